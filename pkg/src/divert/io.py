"""Image, mask and record-file I/O."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .types import AttackRecord, ImageTensor, TamperMask

RECORD_FORMAT = "divert-records"
RECORD_VERSION = 1


def load_image(path) -> ImageTensor:
    """Read an 8-bit RGB raster and scale it to [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise OSError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (FileNotFoundError, Image.UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return ImageTensor(arr.astype(np.float64) / 255.0)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image) -> None:
    values = image.values if isinstance(image, ImageTensor) else image
    Image.fromarray(to_uint8(values), mode="RGB").save(path)


def load_mask(path, source: str = "oracle") -> TamperMask:
    with Image.open(path) as im:
        if im.mode not in ("L", "1"):
            raise OSError(f"{path}: expected single-channel mask, got mode {im.mode}")
        arr = np.asarray(im.convert("L"))
    return TamperMask((arr >= 128).astype(np.uint8), source)


def save_mask(path, mask) -> None:
    values = mask.values if isinstance(mask, TamperMask) else np.asarray(mask, dtype=bool)
    Image.fromarray(values.astype(np.uint8) * 255, mode="L").save(path)


def save_gray(path, values: np.ndarray) -> None:
    """Save a nonnegative map as a max-normalized grayscale PNG."""
    v = np.asarray(values, dtype=np.float64)
    peak = v.max(initial=0.0)
    v = v / peak if peak > 0 else v
    Image.fromarray(to_uint8(v), mode="L").save(path)


def _dumps(obj) -> str:
    # json emits shortest round-trip repr for floats (17 significant digits max)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def write_records(path, records: Iterable[AttackRecord], meta: dict | None = None) -> None:
    header = {"format": RECORD_FORMAT, "version": RECORD_VERSION}
    if meta:
        header["meta"] = meta
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for rec in records:
            fh.write(_dumps(rec.to_dict()) + "\n")


def append_record(path, record: AttackRecord) -> None:
    path = Path(path)
    if not path.exists():
        write_records(path, [])
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(record.to_dict()) + "\n")


def read_records(path) -> tuple[dict, list[AttackRecord]]:
    return _read_header(path), list(iter_records(path))


def _read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: missing record header") from exc
    if header.get("format") != RECORD_FORMAT:
        raise ValueError(f"{path}: not a record file")
    if header.get("version") != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported record version {header.get('version')}")
    return header


def iter_records(path) -> Iterator[AttackRecord]:
    _read_header(path)
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            if line.strip():
                yield AttackRecord.from_dict(json.loads(line))
