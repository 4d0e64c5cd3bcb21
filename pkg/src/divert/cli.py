"""Command-line orchestration: data generation, detector training, attacks, evaluation, reports.

Every AttackConfig field can be set in a YAML/JSON config file (top-level
`attack:` mapping) and overridden by a flag of the same name.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .types import AttackConfig

log = logging.getLogger("divert")

UNFLAGGED_FLOOR = 0.99


@dataclass
class ExperimentConfig:
    dataset: str = "data"
    checkpoint: str = "detector.pt"
    attack: AttackConfig = field(default_factory=AttackConfig)
    method: str = "full"
    out_dir: str = "runs"
    workers: int = 1
    batch_size: int = 50
    limit: Optional[int] = None

    def __post_init__(self):
        if not self.method:
            raise ValueError("method tag must be nonempty")
        if self.workers < 1 or self.batch_size < 1:
            raise ValueError("workers and batch_size must be >= 1")


def load_config_file(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return data or {}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_attack_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(AttackConfig):
        if f.name == "seed":
            continue
        kind = type(f.default)
        conv = _parse_bool if kind is bool else kind
        parser.add_argument(f"--{f.name}", type=conv, default=None, help=f"(default {f.default!r})")


def build_experiment(args, file_cfg: dict) -> ExperimentConfig:
    attack = dict(file_cfg.get("attack") or {})
    for f in dataclasses.fields(AttackConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            attack[f.name] = v
    top = {k: v for k, v in file_cfg.items() if k != "attack"}
    for name in ("dataset", "checkpoint", "method", "out_dir", "workers", "batch_size", "limit"):
        v = getattr(args, name, None)
        if v is not None:
            top[name] = v
    return ExperimentConfig(attack=AttackConfig.from_dict(attack), **top)


# ---------------------------------------------------------------- commands

def cmd_generate_data(out_dir, n_train: int = 2000, n_test: int = 500, size: int = 64,
                      seed: int = 0) -> Path:
    from .bench import generate_dataset

    return generate_dataset(out_dir, n_train, n_test, size, seed)


def cmd_train_detector(dataset, checkpoint, epochs: Optional[int] = None, seed: int = 0,
                       log_path=None) -> dict:
    from .detector import save_checkpoint, train_toy_detector

    if not Path(dataset).exists():
        raise FileNotFoundError(f"dataset {dataset} not found")
    model = train_toy_detector(dataset, epochs, seed, log_path=log_path)
    Path(checkpoint).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, checkpoint)
    return model.train_stats


def _test_fakes(dataset, limit=None) -> list[str]:
    from .bench import read_manifest

    ids = [r["id"] for r in read_manifest(dataset) if r["split"] == "test" and r["label"] == "Fake"]
    if not ids:
        raise ValueError(f"dataset {dataset} has no test fakes")
    return ids[:limit] if limit else ids


def _attack_chunk(job):
    import torch

    from .detector import load_checkpoint
    from .io import load_image, load_mask
    from .optimizer import run_method

    torch.set_num_threads(job.get("threads", torch.get_num_threads()))
    root = Path(job["dataset"])
    config = AttackConfig.from_dict(job["attack"])
    detector = load_checkpoint(job["checkpoint"])
    images = [load_image(root / "fake" / f"{i}.png") for i in job["ids"]]
    # predicted mode never touches ground truth
    masks = ([load_mask(root / "masks" / f"{i}.png") for i in job["ids"]]
             if config.mask_mode == "oracle" else None)
    results = run_method(job["method"], images, masks, detector, config, job["ids"])
    return [(r.record, r.adversarial.values, r.delta) for r in results]


def cmd_attack(exp: ExperimentConfig) -> tuple[Path, float]:
    """Attack every test fake; returns (record file, unflagged fraction)."""
    from .io import save_image, write_records
    from .types import ImageTensor

    for p in (exp.dataset, exp.checkpoint):
        if not Path(p).exists():
            raise FileNotFoundError(f"{p} not found")
    ids = _test_fakes(exp.dataset, exp.limit)
    out = Path(exp.out_dir)
    (out / "adv").mkdir(parents=True, exist_ok=True)
    (out / "delta").mkdir(parents=True, exist_ok=True)
    # chunking depends only on batch_size, so worker count never changes results
    jobs = [dict(dataset=str(exp.dataset), checkpoint=str(exp.checkpoint), method=exp.method,
                 attack=exp.attack.to_dict(), ids=ids[i:i + exp.batch_size])
            for i in range(0, len(ids), exp.batch_size)]
    if exp.workers > 1:
        for j in jobs:
            j["threads"] = 1
        with ProcessPoolExecutor(exp.workers) as pool:
            chunks = list(pool.map(_attack_chunk, jobs))
    else:
        chunks = [_attack_chunk(j) for j in jobs]
    records = []
    for chunk in chunks:
        for rec, adv, delta in chunk:
            save_image(out / "adv" / f"{rec.image_id}.png", ImageTensor(adv))
            np.save(out / "delta" / f"{rec.image_id}.npy", delta)
            records.append(rec)
    path = out / f"records_{exp.method}.jsonl"
    write_records(path, records, meta={"method": exp.method, "config": exp.attack.to_dict()})
    unflagged = sum(not r.flagged for r in records) / len(records)
    return path, unflagged


def cmd_evaluate(record_paths, out_csv, tau: float = 0.2, resamples: int = 10_000) -> dict:
    """Summary CSV plus paired sign tests for every pair of record files."""
    from .io import read_records
    from .metrics import JEC_SEED, EvaluationSummary, paired_comparison, summarize

    if not record_paths:
        raise ValueError("evaluate needs at least one record file")
    loaded = []
    for p in record_paths:
        header, recs = read_records(p)
        if not recs:
            raise ValueError(f"{p}: no records")
        method = header.get("meta", {}).get("method") or recs[0].method
        loaded.append((str(p), method, recs))
    rows = [summarize(recs, method, tau, resamples, JEC_SEED).to_row() for _, method, recs in loaded]
    Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        names = [f.name for f in dataclasses.fields(EvaluationSummary)]
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    pairs = []
    for (pa, ma, ra), (pb, mb, rb) in combinations(loaded, 2):
        cmp = paired_comparison(ra, rb)
        if cmp["shared"]:
            pairs.append({"first": ma, "second": mb, **cmp})
    if pairs:
        with open(Path(out_csv).with_suffix(".paired.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(pairs[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(pairs)
    return {"summaries": rows, "paired": pairs}


def cmd_report(record_paths, out_dir, mode: str = "fixedN", n: int = 100, seed: int = 20260527) -> Path:
    """JEC subset manifest plus the stub JEC score over the sampled records."""
    from .io import read_records
    from .metrics import jec_subsets, stub_jec_score, write_subset_manifest

    by_method = {}
    for p in record_paths:
        header, recs = read_records(p)
        method = header.get("meta", {}).get("method") or (recs[0].method if recs else Path(p).stem)
        by_method[method] = recs
    res = jec_subsets(by_method, mode, n, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / f"jec_{res.mode}_seed{seed}.csv"
    write_subset_manifest(manifest, res)
    with open(out / "jec_stub_scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "image_id", "stub_score"])
        for method in sorted(res.ids):
            lookup = {r.image_id: r for r in by_method[method]}
            for i in res.ids[method]:
                r = lookup[i]
                writer.writerow([method, i, stub_jec_score(None, r.attacked_prediction, r.explanation)])
    for note in res.notices:
        log.warning(note)
    return manifest


# ---------------------------------------------------------------- entry point

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divert", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write the synthetic forgery dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train-detector", help="train the toy detector")
    t.add_argument("--dataset", required=True)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log", default=None, help="per-epoch CSV log")

    a = sub.add_parser("attack", help="attack every test fake")
    a.add_argument("--config", default=None, help="YAML or JSON experiment config")
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--dataset")
    a.add_argument("--checkpoint")
    a.add_argument("--method")
    a.add_argument("--out_dir", "--out-dir", dest="out_dir")
    a.add_argument("--workers", type=int)
    a.add_argument("--batch_size", "--batch-size", dest="batch_size", type=int)
    a.add_argument("--limit", type=int, help="attack only the first N test fakes")
    _add_attack_flags(a)

    e = sub.add_parser("evaluate", help="summarize record files")
    e.add_argument("records", nargs="+")
    e.add_argument("--out", required=True, help="summary CSV path")
    e.add_argument("--tau", type=float, default=0.2)
    e.add_argument("--resamples", type=int, default=10_000)

    r = sub.add_parser("report", help="write JEC subset manifests")
    r.add_argument("records", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=("fixedN", "commonSuccess", "conditional"), default="fixedN")
    r.add_argument("--n", type=int, default=100)
    r.add_argument("--seed", type=int, default=20260527)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "generate-data":
        path = cmd_generate_data(args.out, args.n_train, args.n_test, args.size, args.seed)
        print(path)
        return 0
    if args.command == "train-detector":
        stats = cmd_train_detector(args.dataset, args.checkpoint, args.epochs, args.seed, args.log)
        print(json.dumps(stats, sort_keys=True))
        return 0
    if args.command == "attack":
        exp = build_experiment(args, load_config_file(args.config))
        path, unflagged = cmd_attack(exp)
        print(f"{path} unflagged={unflagged:.4f}")
        return 0 if unflagged >= UNFLAGGED_FLOOR else 1
    if args.command == "evaluate":
        res = cmd_evaluate(args.records, args.out, args.tau, args.resamples)
        for row in res["summaries"]:
            print(f"{row['method']}: ASR={row['asr']:.4f} J-ASR={row['j_asr']:.4f} "
                  f"L-IoUR={row['l_iour']:.4f} ADS {row['mean_ads_clean']:.3f}->{row['mean_ads_adv']:.3f}")
        for p in res["paired"]:
            print(f"{p['first']} vs {p['second']}: shared={p['shared']} "
                  f"{p['first_only']}/{p['second_only']} p={p['p_value']:.4g}")
        return 0
    if args.command == "report":
        print(cmd_report(args.records, args.out, args.mode, args.n, args.seed))
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
