"""Component ablation: full, image-only, no decoy term, no concealment term, plain PGD.

Usage: python scripts/ablation.py --data runs/bench --checkpoint runs/detector.pt --out runs/ablation
"""
import argparse
from pathlib import Path

from divert.cli import ExperimentConfig, cmd_attack, cmd_evaluate
from divert.types import AttackConfig

VARIANTS = ("full", "vis-only", "no-mislead", "no-hide", "pgd")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--limit", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    paths = []
    for method in VARIANTS:
        exp = ExperimentConfig(dataset=args.data, checkpoint=args.checkpoint, attack=AttackConfig(seed=args.seed),
                               method=method, out_dir=str(Path(args.out) / method), limit=args.limit)
        paths.append(cmd_attack(exp)[0])
    for row in cmd_evaluate(paths, Path(args.out) / "summary.csv")["summaries"]:
        print(f"{row['method']:>10}  ASR {row['asr']:.3f}  L-IoUR {row['l_iour']:.3f}  ADS {row['mean_ads_adv']:.3f}")


if __name__ == "__main__":
    main()
