"""One-at-a-time sensitivity sweep over attack hyperparameters.

Usage: python scripts/sensitivity.py --data runs/bench --checkpoint runs/detector.pt --param alpha --values 0 0.3 0.7 1
"""
import argparse
import ast
from pathlib import Path

from divert.cli import ExperimentConfig, cmd_attack, cmd_evaluate
from divert.types import AttackConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--param", required=True, help="AttackConfig field name")
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--out", default="runs/sensitivity")
    p.add_argument("--limit", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    for raw in args.values:
        value = ast.literal_eval(raw)
        tag = f"{args.param}={value}"
        config = AttackConfig(seed=args.seed).replace(**{args.param: value})
        exp = ExperimentConfig(dataset=args.data, checkpoint=args.checkpoint, attack=config, method="full",
                               out_dir=str(Path(args.out) / tag), limit=args.limit)
        path, _ = cmd_attack(exp)
        row = cmd_evaluate([path], Path(args.out) / tag / "summary.csv", resamples=1000)["summaries"][0]
        print(f"{tag:>16}  ASR {row['asr']:.3f}  L-IoUR {row['l_iour']:.3f}  ADS {row['mean_ads_adv']:.3f}  "
              f"PSNR {row['mean_psnr']:.1f}")


if __name__ == "__main__":
    main()
