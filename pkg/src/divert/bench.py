"""Synthetic tampered-image dataset with exact ground-truth masks.

Real images are procedural: multi-octave smooth noise, a few oriented stripe
textures and a fine sensor-like grain. Every forgery kind leaves a
mid-frequency cue inside its region (foreign content, softened texture, a
tint or a smooth fill) and then re-applies grain of the native strength, so
the cue sits well above the 8-bit step rather than in the noise floor.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import save_image, save_mask
from .types import MIN_SIDE, ImageTensor, TamperMask

KINDS = ("splice-rect", "copy-move", "blend-ellipse")
GRAIN = 3.0 / 255.0
MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("id", "split", "label", "kind", "seed", "region_fraction", "blend_width")


@dataclass(frozen=True)
class ForgerySpec:
    kind: str
    region_fraction: float
    blend_width: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown forgery kind {self.kind!r}")
        if not 0.0 < self.region_fraction < 1.0:
            raise ValueError("region_fraction must lie in (0, 1)")
        if self.region_fraction > 0.5:
            raise ValueError("region_fraction must be <= 0.5")
        if self.blend_width < 0:
            raise ValueError("blend_width must be >= 0")


def item_seed(master_seed: int, index: int) -> int:
    """Per-item RNG seed derived from (master seed, item index)."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255) / 255.0


def _smooth_noise(rng: np.random.Generator, size: int, channels: int = 3) -> np.ndarray:
    out = np.zeros((size, size, channels))
    total = 0.0
    for cells in (2, 4, 8, 16):
        amp = cells ** -0.8
        coarse = rng.random((cells + 1, cells + 1, channels))
        zoom = (size / (cells + 1), size / (cells + 1), 1)
        layer = ndimage.zoom(coarse, zoom, order=1, mode="nearest")[:size, :size]
        out += amp * layer
        total += amp
    return out / total


def _stripes(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, math.pi)
    freq = rng.uniform(0.15, 0.6)
    phase = rng.uniform(0, 2 * math.pi)
    wave = 0.5 + 0.5 * np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    cy, cx = rng.uniform(0, size, 2)
    radius = rng.uniform(0.15, 0.35) * size
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
    color = rng.uniform(-0.25, 0.25, 3)
    return wave, blob[..., None] * color


def _clean_content(rng: np.random.Generator, size: int) -> np.ndarray:
    img = _smooth_noise(rng, size)
    img = (img - img.min()) / max(img.max() - img.min(), 1e-9)
    img = 0.15 + 0.7 * img
    for _ in range(rng.integers(1, 4)):
        wave, tint = _stripes(rng, size)
        img = img + tint * (wave[..., None] - 0.5)
    return img


def generate_real(seed: int, size: int = 64) -> ImageTensor:
    """Procedural natural-statistics image on the 8-bit grid."""
    if size < MIN_SIDE:
        raise ValueError(f"size must be >= {MIN_SIDE}")
    rng = np.random.default_rng(seed)
    img = _clean_content(rng, size)
    img = img + rng.normal(0.0, GRAIN, img.shape)
    return ImageTensor(_quantize(np.clip(img, 0.0, 1.0)))


def _rect_shape(area: int, size: int, rng: np.random.Generator, max_side: int) -> tuple[int, int]:
    """Pick (h, w) with aspect in [1/2, 2] and h*w as close to `area` as possible (exact if feasible)."""
    for offset in range(0, max(area // 10, 1) + 1):
        for a in (area - offset, area + offset):
            pairs = [
                (h, a // h)
                for h in range(1, max_side + 1)
                if a > 0 and a % h == 0 and a // h <= max_side and 0.5 <= h / (a // h) <= 2.0
            ]
            if pairs:
                return pairs[rng.integers(len(pairs))]
    raise ValueError(f"cannot fit a rectangle of area {area} in a {size}px image")


def _regrain(patch: np.ndarray, rng: np.random.Generator, sigma: float = 2.0) -> np.ndarray:
    """Resampling-style blur that softens texture, then noise-matched grain."""
    smooth = ndimage.gaussian_filter(patch, sigma=(sigma, sigma, 0))
    return smooth + rng.normal(0.0, GRAIN, smooth.shape)


def place_copy_move(rng: np.random.Generator, size: int, rh: int, rw: int) -> tuple[int, int, int, int]:
    """Source and destination corners (sy, sx, dy, dx) of two disjoint rh x rw rectangles."""
    for _ in range(200):
        sy, dy = rng.integers(0, size - rh + 1, 2)
        sx, dx = rng.integers(0, size - rw + 1, 2)
        if sy + rh <= dy or dy + rh <= sy or sx + rw <= dx or dx + rw <= sx:
            return int(sy), int(sx), int(dy), int(dx)
    raise ValueError("could not place disjoint copy-move regions")


def _ensure_changed(forged: np.ndarray, base: np.ndarray, region: np.ndarray) -> np.ndarray:
    same = region & np.all(forged == base, axis=-1)
    if same.any():
        ch = forged[..., 0]
        bump = np.where(base[..., 0] < 0.5, 1.0 / 255.0, -1.0 / 255.0)
        ch[same] = base[..., 0][same] + bump[same]
    return forged


def generate_forgery(base: ImageTensor, spec: ForgerySpec) -> tuple[ImageTensor, TamperMask]:
    """Tamper `base` per `spec`; the returned mask is exactly the modified pixels."""
    rng = np.random.default_rng(spec.seed)
    src = np.array(base.values)
    h, w = base.height, base.width
    if h != w:
        raise ValueError("only square images are supported")
    size = h
    area = int(round(spec.region_fraction * size * size))
    if area < 4:
        raise ValueError("region fraction too small for the image size")
    forged = src.copy()
    region = np.zeros((size, size), dtype=bool)

    if spec.kind == "splice-rect":
        rh, rw = _rect_shape(area, size, rng, int(0.8 * size))
        y0 = rng.integers(0, size - rh + 1)
        x0 = rng.integers(0, size - rw + 1)
        donor = _clean_content(rng, size)[:rh, :rw] + rng.uniform(-0.12, 0.12, 3)
        forged[y0:y0 + rh, x0:x0 + rw] = _regrain(donor, rng)
        region[y0:y0 + rh, x0:x0 + rw] = True

    elif spec.kind == "copy-move":
        if spec.region_fraction > 0.25:
            raise ValueError("copy-move needs region_fraction <= 0.25")
        rh, rw = _rect_shape(area, size, rng, size // 2)
        sy, sx, dy, dx = place_copy_move(rng, size, rh, rw)
        patch = src[sy:sy + rh, sx:sx + rw] + rng.uniform(-0.06, 0.06, 3)
        forged[dy:dy + rh, dx:dx + rw] = _regrain(patch, rng)
        region[dy:dy + rh, dx:dx + rw] = True

    else:  # blend-ellipse
        aspect = rng.uniform(0.6, 1.6)
        a = math.sqrt(area / math.pi * aspect)
        b = area / (math.pi * a)
        if 2 * max(a, b) > 0.9 * size:
            raise ValueError("ellipse does not fit in the image")
        cy = rng.uniform(b, size - b)
        cx = rng.uniform(a, size - a)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        r = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
        inside = r < 1.0
        # feather ramps from 0 at the rim to 1 at blend_width px inside
        depth = (1.0 - r) * min(a, b)
        weight = np.clip(depth / max(spec.blend_width, 1e-9), 0.0, 1.0) if spec.blend_width else inside * 1.0
        weight = np.where(inside, np.maximum(weight, 1e-3), 0.0)
        fill = ndimage.gaussian_filter(src, sigma=(3.0, 3.0, 0)) + rng.uniform(-0.08, 0.08, 3)
        fill = fill + rng.normal(0.0, GRAIN, fill.shape)
        forged = weight[..., None] * fill + (1.0 - weight[..., None]) * src
        region = inside

    forged = _quantize(np.clip(forged, 0.0, 1.0))
    forged[~region] = src[~region]
    forged = _ensure_changed(forged, src, region)
    mask = np.any(forged != src, axis=-1)
    return ImageTensor(np.clip(forged, 0.0, 1.0)), TamperMask(mask.astype(np.uint8), "oracle")


def random_spec(rng: np.random.Generator, index: int, seed: int) -> ForgerySpec:
    kind = KINDS[index % len(KINDS)]
    hi = 0.2 if kind == "copy-move" else 0.3
    return ForgerySpec(
        kind=kind,
        region_fraction=float(np.round(rng.uniform(0.08, hi), 4)),
        blend_width=int(rng.integers(2, 7)),
        seed=seed,
    )


def make_pair(master_seed: int, index: int, size: int = 64):
    """Deterministic (real, forged, mask, spec) for one dataset slot."""
    seed = item_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    real = generate_real(int(rng.integers(2**31)), size)
    base = generate_real(int(rng.integers(2**31)), size)
    spec = random_spec(rng, index, int(rng.integers(2**31)))
    forged, mask = generate_forgery(base, spec)
    return real, forged, mask, spec


def generate_dataset(out_dir, n_train: int = 2000, n_test: int = 500, size: int = 64,
                     master_seed: int = 0) -> Path:
    """Write real/, fake/, masks/ and manifest.csv under `out_dir`."""
    out = Path(out_dir)
    for sub in ("real", "fake", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        real, forged, mask, spec = make_pair(master_seed, i, size)
        rid, fid = f"r{i:05d}", f"f{i:05d}"
        save_image(out / "real" / f"{rid}.png", real)
        save_image(out / "fake" / f"{fid}.png", forged)
        save_mask(out / "masks" / f"{fid}.png", mask)
        seed = item_seed(master_seed, i)
        rows.append(dict(id=rid, split=split, label="Real", kind="", seed=seed,
                         region_fraction="", blend_width=""))
        rows.append(dict(id=fid, split=split, label="Fake", kind=spec.kind, seed=seed,
                         region_fraction=spec.region_fraction, blend_width=spec.blend_width))
    with open(out / MANIFEST, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return out


def read_manifest(root) -> list[dict]:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        if row.get("label") not in ("Real", "Fake") or row.get("split") not in ("train", "test"):
            raise ValueError(f"corrupt manifest row: {row}")
    return rows
