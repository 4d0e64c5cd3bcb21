"""End-to-end run: dataset, detector, every attack method, evaluation and JEC manifests.

Usage: python scripts/pipeline.py --out runs [--limit 200] [--seed 0]
"""
import argparse
import json
from pathlib import Path

from divert.cli import ExperimentConfig, cmd_attack, cmd_evaluate, cmd_generate_data, cmd_report, cmd_train_detector
from divert.types import AttackConfig

METHODS = ("noise", "fgsm", "pgd", "vis-only", "full")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    out = Path(args.out)
    data, ckpt = out / "bench", out / "detector.pt"
    if not (data / "manifest.csv").exists():
        cmd_generate_data(data)
    if not ckpt.exists():
        print("detector:", json.dumps(cmd_train_detector(data, ckpt, log_path=out / "train_log.csv")))
    records = []
    for method in METHODS:
        exp = ExperimentConfig(dataset=str(data), checkpoint=str(ckpt), attack=AttackConfig(seed=args.seed),
                               method=method, out_dir=str(out / method), workers=args.workers, limit=args.limit)
        path, unflagged = cmd_attack(exp)
        print(f"{method}: {path} unflagged={unflagged:.3f}")
        records.append(path)
    res = cmd_evaluate(records, out / "summary.csv")
    for row in res["summaries"]:
        print(f"{row['method']:>9}  ASR {row['asr']:.3f}  J-ASR {row['j_asr']:.3f}  L-IoUR {row['l_iour']:.3f}  "
              f"ADS {row['mean_ads_clean']:.3f}->{row['mean_ads_adv']:.3f}  PSNR {row['mean_psnr']:.1f}")
    cmd_report(records, out / "jec")


if __name__ == "__main__":
    main()
