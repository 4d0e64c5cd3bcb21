"""Decoy-region selection and the Gaussian pseudo-hotspot field."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .types import AttentionMap, ImageTensor, TamperMask

ENTROPY_BINS = 64
PATCH = 32


@dataclass(frozen=True)
class DecoyRegion:
    """Hotspot centered at (row, col) with spread `sigma`; `field` peaks at 1.0."""

    center: tuple
    sigma: float
    field: np.ndarray
    relaxed: tuple = field(default=())

    @property
    def fallback(self) -> bool:
        return bool(self.relaxed)


def gaussian_hotspot(center, sigma: float, shape) -> DecoyRegion:
    r0, c0 = center
    h, w = shape[:2]
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise ValueError(f"center {center} outside image of shape {(h, w)}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    g = np.exp(-((ii - r0) ** 2 + (jj - c0) ** 2) / (2.0 * sigma**2))
    g.setflags(write=False)
    return DecoyRegion((int(r0), int(c0)), float(sigma), g)


def _gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(gray, axis=(-2, -1))
    return np.hypot(gy, gx)


def _entropy_rows(mag: np.ndarray, bins: int) -> np.ndarray:
    """Histogram entropy for each row of `mag` (shape N x P), bins over [0, row max]."""
    n, size = mag.shape
    top = mag.max(axis=1, keepdims=True)
    scale = np.divide(bins, top, out=np.zeros_like(top), where=top > 0)
    idx = np.minimum((mag * scale).astype(np.int64), bins - 1)
    # same edge correction as np.histogram with linspace edges
    edges = np.arange(bins + 1) * (top / bins)
    edges[:, -1] = top[:, 0]
    idx -= mag < np.take_along_axis(edges, idx, axis=1)
    idx += (mag >= np.take_along_axis(edges, idx + 1, axis=1)) & (idx != bins - 1)
    counts = np.bincount((idx + bins * np.arange(n)[:, None]).ravel(), minlength=n * bins)
    prob = counts.reshape(n, bins) / size
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(prob > 0, prob * np.log2(prob), 0.0)
    out = -terms.sum(axis=1)
    out[top[:, 0] <= 0] = 0.0
    return out


def texture_entropy(patch: np.ndarray, bins: int = ENTROPY_BINS) -> float:
    """Shannon entropy (bits) of the gradient-magnitude histogram of a patch.

    Gradients are central differences on the channel-mean image; the histogram
    spans [0, max magnitude in the patch].
    """
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim == 3:
        p = p.mean(axis=-1)
    mag = _gradient_magnitude(p)
    return float(_entropy_rows(mag.reshape(1, -1), bins)[0])


def _window_origin(center: int, size: int, patch: int) -> int:
    return int(min(max(center - patch // 2, 0), size - patch))


def entropy_map(image: np.ndarray, patch: int = PATCH, bins: int = ENTROPY_BINS) -> np.ndarray:
    """Entropy of the patch containing each pixel (window centered, shifted inside the image)."""
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    h, w = gray.shape
    ph, pw = min(patch, h), min(patch, w)
    windows = np.lib.stride_tricks.sliding_window_view(gray, (ph, pw))
    ny, nx = windows.shape[:2]
    mag = _gradient_magnitude(windows).reshape(ny * nx, ph * pw)
    ent = _entropy_rows(mag, bins).reshape(ny, nx)
    rows = np.array([_window_origin(r, h, ph) for r in range(h)])
    cols = np.array([_window_origin(c, w, pw) for c in range(w)])
    return ent[np.ix_(rows, cols)]


def scaled_distance(distance: float, size: int, reference: int = 512) -> int:
    return int(math.ceil(distance * size / reference))


def candidate_stages(image, mask, attention, *, saliency_threshold=0.5, entropy_low=4.0,
                     entropy_high=6.0, border_distance=50.0, tamper_distance=100.0,
                     reference_size=512) -> dict:
    """Boolean maps for each admissibility constraint."""
    img = image.values if isinstance(image, ImageTensor) else np.asarray(image)
    tamper = mask.tamper if isinstance(mask, TamperMask) else np.asarray(mask, dtype=bool)
    att = attention.values if isinstance(attention, AttentionMap) else np.asarray(attention)
    h, w = tamper.shape
    peak = att.max(initial=0.0)
    saliency = att / peak if peak > 0 else np.zeros_like(att)
    ent = entropy_map(img)
    border = scaled_distance(border_distance, min(h, w), reference_size)
    gap = scaled_distance(tamper_distance, min(h, w), reference_size)
    rr, cc = np.mgrid[0:h, 0:w]
    inside = (rr >= border) & (rr <= h - 1 - border) & (cc >= border) & (cc <= w - 1 - border)
    if tamper.any():
        dist = ndimage.distance_transform_edt(~tamper)
    else:
        dist = np.full((h, w), np.inf)
    return {
        "background": ~tamper,
        "semantic": saliency < saliency_threshold,
        "texture": (ent >= entropy_low) & (ent <= entropy_high),
        "spatial": inside & (dist > gap),
    }


def _admissible(stages: dict) -> tuple[np.ndarray, tuple]:
    # relaxation order: texture window, then spatial, then semantic; background never relaxed
    order = [(), ("texture",), ("texture", "spatial"), ("texture", "spatial", "semantic")]
    for relaxed in order:
        ok = stages["background"].copy()
        for name in ("semantic", "texture", "spatial"):
            if name not in relaxed:
                ok &= stages[name]
        if ok.any():
            return ok, relaxed
    return stages["background"], ("none",)


def decoy_score(attention: np.ndarray, background: np.ndarray, hotspot: np.ndarray) -> float:
    """Initial attention response of a candidate: sum over R_bg of M * G."""
    return float((attention * hotspot)[background].sum())


def select_decoy(image, mask, attention, seed: int, *, sigma: float = 15.0, k: int = 3,
                 **constraints) -> DecoyRegion:
    """Three-stage decoy selection; samples `k` admissible centers, keeps the best responder.

    When no pixel passes every stage, constraints are relaxed (texture, then
    spatial, then semantic) and the returned region lists what was relaxed.
    The tampered region is never eligible.
    """
    tamper = mask.tamper if isinstance(mask, TamperMask) else np.asarray(mask, dtype=bool)
    if tamper.all():
        raise ValueError("mask leaves no background for a decoy")
    att = attention.values if isinstance(attention, AttentionMap) else np.asarray(attention)
    stages = candidate_stages(image, tamper, att, **constraints)
    ok, relaxed = _admissible(stages)
    flat = np.flatnonzero(ok)
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(flat, size=min(k, flat.size), replace=False))
    w = tamper.shape[1]
    best, best_score = None, -np.inf
    for idx in picks:
        center = divmod(int(idx), w)
        region = gaussian_hotspot(center, sigma, tamper.shape)
        score = decoy_score(att, ~tamper, region.field)
        if score > best_score:
            best, best_score = region, score
    return DecoyRegion(best.center, best.sigma, best.field, relaxed)
