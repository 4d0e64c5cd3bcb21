"""Evaluation metrics and JEC subset-sampling protocols over attack records."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from skimage.metrics import structural_similarity

from .types import AttackRecord, ImageTensor, TamperMask

JEC_SEED = 20260527
JASR_TAU = 0.2
PSNR_CAP = 100.0


class UndefinedMetric(ValueError):
    """Raised when a metric's denominator is empty."""


def _bool(mask) -> np.ndarray:
    return mask.values if isinstance(mask, TamperMask) else np.asarray(mask, dtype=bool)


def iou(pred, gt) -> float:
    """|A & B| / |A | B|; two empty masks agree perfectly (1.0)."""
    a, b = _bool(pred), _bool(gt)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def detectable(records: Iterable[AttackRecord]) -> list[AttackRecord]:
    return [r for r in records if r.clean_prediction == "Fake"]


def asr(records: Sequence[AttackRecord]) -> float:
    det = detectable(records)
    if not det:
        raise UndefinedMetric("no detectable (clean Fake) records")
    return sum(r.attacked_prediction == "Real" for r in det) / len(det)


def joint_asr(records: Sequence[AttackRecord], tau: float = JASR_TAU) -> float:
    """Fraction of the detectable subset flipped to Real with adversarial IoU below tau."""
    det = detectable(records)
    if not det:
        raise UndefinedMetric("no detectable (clean Fake) records")
    return sum(r.attacked_prediction == "Real" and r.iou_adv < tau for r in det) / len(det)


def l_iour(iou_clean: Sequence[float], iou_adv: Sequence[float]) -> float:
    """Relative localization IoU reduction, 1 - mean(IoU_adv) / mean(IoU_clean)."""
    c = float(np.mean(iou_clean))
    if c <= 0:
        raise UndefinedMetric("mean clean IoU is zero")
    return 1.0 - float(np.mean(iou_adv)) / c


def psnr(clean, adv) -> float:
    a = clean.values if isinstance(clean, ImageTensor) else np.asarray(clean, dtype=np.float64)
    b = adv.values if isinstance(adv, ImageTensor) else np.asarray(adv, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(clean, adv) -> float:
    """Gaussian-window SSIM (sigma 1.5, 11 taps) for unit dynamic range, channel mean."""
    a = clean.values if isinstance(clean, ImageTensor) else np.asarray(clean, dtype=np.float64)
    b = adv.values if isinstance(adv, ImageTensor) else np.asarray(adv, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    return float(structural_similarity(a, b, data_range=1.0, channel_axis=-1, gaussian_weights=True,
                                       sigma=1.5, use_sample_covariance=False))


def perceptual_metrics(clean, adv) -> tuple[float, float]:
    return psnr(clean, adv), ssim(clean, adv)


def bootstrap_ci(values: Sequence[float], resamples: int = 10_000, level: float = 0.95,
                 seed: int = JEC_SEED, statistic: Callable = np.mean) -> tuple[float, float]:
    """Percentile bootstrap interval (inverted-CDF percentiles)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("bootstrap needs at least one value")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(resamples, v.size))
    stats = statistic(v[idx], axis=1)
    lo = (1.0 - level) / 2.0
    return (float(np.quantile(stats, lo, method="inverted_cdf")),
            float(np.quantile(stats, 1.0 - lo, method="inverted_cdf")))


def sign_test(a: Sequence[bool], b: Sequence[bool]) -> tuple[int, int, float]:
    """Exact two-sided paired sign test on success indicators.

    Returns (a-only successes, b-only successes, p-value).
    """
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    n10 = int((a & ~b).sum())
    n01 = int((~a & b).sum())
    n = n10 + n01
    if n == 0:
        return n10, n01, 1.0
    k = min(n10, n01)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2**n
    return n10, n01, min(1.0, 2.0 * tail)


def paired_comparison(first: Sequence[AttackRecord], second: Sequence[AttackRecord]) -> dict:
    """Sign test over images detectable under both record sets."""
    a = {r.image_id: r for r in first if r.detectable}
    b = {r.image_id: r for r in second if r.detectable}
    shared = sorted(set(a) & set(b))
    n10, n01, p = sign_test([a[i].success for i in shared], [b[i].success for i in shared])
    return {"shared": len(shared), "first_only": n10, "second_only": n01, "p_value": p}


# ---------------------------------------------------------------- JEC protocols

@dataclass
class SubsetResult:
    mode: str
    seed: int
    n: int
    ids: dict
    notices: list = field(default_factory=list)


def _successes(records_by_method: dict) -> tuple[dict, list]:
    out, notices = {}, []
    for method, recs in records_by_method.items():
        ids = sorted(r.image_id for r in recs if r.success)
        if not ids:
            notices.append(f"{method}: no successful attacks, excluded")
            continue
        out[method] = ids
    return out, notices


def jec_subsets(records_by_method: dict, mode: str = "fixedN", n: int = 100, seed: int = JEC_SEED,
                min_common: int = 50) -> SubsetResult:
    """Sample per-method record ids for JEC scoring.

    conditional: every success. fixedN: the same number per method, min(n,
    smallest success count), drawn with `seed`. commonSuccess: ids every
    method succeeded on, falling back to fixedN below `min_common`.
    """
    succ, notices = _successes(records_by_method)
    if mode == "conditional":
        return SubsetResult(mode, seed, max((len(v) for v in succ.values()), default=0), succ, notices)
    if mode == "commonSuccess":
        common = sorted(set.intersection(*(set(v) for v in succ.values()))) if succ else []
        if len(common) >= min_common:
            return SubsetResult(mode, seed, len(common), {m: list(common) for m in succ}, notices)
        notices.append(f"common-success subset has N={len(common)} < {min_common}; falling back to fixedN")
        res = jec_subsets(records_by_method, "fixedN", n, seed, min_common)
        res.notices = notices + [x for x in res.notices if x not in notices]
        return res
    if mode != "fixedN":
        raise ValueError(f"unknown subset mode {mode!r}")
    feasible = min((len(v) for v in succ.values()), default=0)
    size = min(n, feasible)
    if size < n:
        notices.append(f"fixedN reduced to largest common feasible N={size}")
    rng = np.random.default_rng(seed)
    picked = {}
    for method in sorted(succ):
        ids = succ[method]
        picked[method] = sorted(rng.choice(ids, size=size, replace=False).tolist()) if size else []
    return SubsetResult("fixedN", seed, size, picked, notices)


def write_subset_manifest(path, result: SubsetResult) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# mode={result.mode} seed={result.seed} n={result.n}\n")
        for note in result.notices:
            fh.write(f"# notice: {note}\n")
        fh.write("method,image_id\n")
        for method in sorted(result.ids):
            for i in result.ids[method]:
                fh.write(f"{method},{i}\n")


AFFIRM = ("authentic", "consistent", "natural", "coherent", "no visible", "real")
DOUBT = ("manipulated", "inconsistent", "tamper", "smoothed", "splice", "boundary typical")


def stub_jec_score(image_path, judgment: str, explanation: str) -> float:
    """Keyword heuristic standing in for an external JEC rater. Not a scientific score.

    Counts judgment-supporting vs contradicting cue words and maps the balance
    onto 1..5.
    """
    text = (explanation or "").lower()
    pro, con = (AFFIRM, DOUBT) if judgment == "Real" else (DOUBT, AFFIRM)
    balance = sum(w in text for w in pro) - sum(w in text for w in con)
    return float(min(5, max(1, 3 + balance)))


# ---------------------------------------------------------------- summary

@dataclass
class EvaluationSummary:
    method: str
    n_records: int
    n_detectable: int
    asr: float
    j_asr: float
    mean_iou_clean: float
    mean_iou_adv: float
    l_iour: float
    mean_ads_clean: float
    mean_ads_adv: float
    mean_psnr: float
    mean_ssim: float
    aux_acc: float
    asr_ci_low: float
    asr_ci_high: float
    lpips: Optional[float] = None

    def to_row(self) -> dict:
        return asdict(self)


def _recount(records: Sequence[AttackRecord], tau: float) -> tuple[float, float]:
    det = n_flip = n_joint = 0
    for r in records:
        if r.clean_prediction != "Fake":
            continue
        det += 1
        if r.attacked_prediction == "Real":
            n_flip += 1
            if r.iou_adv < tau:
                n_joint += 1
    return n_flip / det, n_joint / det


def summarize(records: Sequence[AttackRecord], method: Optional[str] = None, tau: float = JASR_TAU,
              resamples: int = 10_000, seed: int = JEC_SEED) -> EvaluationSummary:
    """Summary over the detectable subset, cross-checked against an independent recount."""
    recs = list(records)
    if not recs:
        raise UndefinedMetric("no records")
    det = detectable(recs)
    a, j = asr(recs), joint_asr(recs, tau)
    if (a, j) != _recount(recs, tau):
        raise AssertionError("ASR self-check failed: summary disagrees with recount")
    ic = [r.iou_clean for r in det]
    ia = [r.iou_adv for r in det]
    lo, hi = bootstrap_ci([float(r.success) for r in det], resamples, 0.95, seed)
    # toy analogue of the detector-script accuracy: attacked fakes still called Fake
    aux = sum(r.attacked_prediction == "Fake" for r in recs) / len(recs)
    return EvaluationSummary(
        method=method or recs[0].method,
        n_records=len(recs),
        n_detectable=len(det),
        asr=a,
        j_asr=j,
        mean_iou_clean=float(np.mean(ic)),
        mean_iou_adv=float(np.mean(ia)),
        l_iour=l_iour(ic, ia) if np.mean(ic) > 0 else float("nan"),
        mean_ads_clean=float(np.mean([r.ads_clean for r in det])),
        mean_ads_adv=float(np.mean([r.ads_adv for r in det])),
        mean_psnr=float(np.mean([r.psnr for r in recs])),
        mean_ssim=float(np.mean([r.ssim for r in recs])),
        aux_acc=aux,
        asr_ci_low=lo,
        asr_ci_high=hi,
    )
