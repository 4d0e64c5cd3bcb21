import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from divert.bench import (KINDS, ForgerySpec, generate_dataset, generate_forgery, generate_real,
                          make_pair, place_copy_move, read_manifest)
from divert.decoy import texture_entropy
from divert.metrics import iou


def test_generate_real_is_deterministic_and_shaped():
    a, b = generate_real(11, 64), generate_real(11, 64)
    assert a.shape == (64, 64, 3)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, generate_real(12, 64).values)


def test_real_images_offer_decoy_texture():
    # subset scan (stride 16) of 32x32 windows; finding one is sufficient
    hits = 0
    for seed in range(1000):
        v = generate_real(seed, 64).values
        hits += any(4.0 <= texture_entropy(v[r:r + 32, c:c + 32]) <= 6.0
                    for r in (0, 16, 32) for c in (0, 16, 32))
    assert hits / 1000 >= 0.90


def test_splice_quarter_area():
    base = generate_real(0, 64)
    forged, mask = generate_forgery(base, ForgerySpec("splice-rect", 0.25, seed=5))
    assert mask.values.sum() == 1024
    assert np.array_equal(forged.values[~mask.values], base.values[~mask.values])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 32), st.integers(1, 32))
def test_copy_move_source_disjoint_from_destination(seed, rh, rw):
    sy, sx, dy, dx = place_copy_move(np.random.default_rng(seed), 64, rh, rw)
    src = np.zeros((64, 64), dtype=bool)
    dst = np.zeros((64, 64), dtype=bool)
    src[sy:sy + rh, sx:sx + rw] = True
    dst[dy:dy + rh, dx:dx + rw] = True
    assert src.sum() == dst.sum() == rh * rw
    assert not (src & dst).any()


@pytest.mark.parametrize("bad", [dict(kind="paint", region_fraction=0.1), dict(kind="splice-rect", region_fraction=0.0),
                                 dict(kind="splice-rect", region_fraction=0.6),
                                 dict(kind="splice-rect", region_fraction=0.1, blend_width=-1)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        ForgerySpec(**bad)


def test_copy_move_fraction_limit():
    with pytest.raises(ValueError):
        generate_forgery(generate_real(0, 64), ForgerySpec("copy-move", 0.4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(KINDS), st.floats(0.05, 0.2), st.integers(0, 6))
def test_mask_is_exactly_the_changed_pixels(seed, kind, fraction, blend):
    base = generate_real(seed, 64)
    forged, mask = generate_forgery(base, ForgerySpec(kind, round(fraction, 4), blend, seed))
    changed = np.any(forged.values != base.values, axis=-1)
    assert iou(mask.values, changed) == 1.0
    assert np.array_equal(forged.values[~mask.values], base.values[~mask.values])
    assert mask.values.any()


def test_make_pair_reproducible():
    a, b = make_pair(0, 17), make_pair(0, 17)
    for x, y in zip(a[:2], b[:2]):
        assert np.array_equal(x.values, y.values)
    assert np.array_equal(a[2].values, b[2].values) and a[3] == b[3]


def test_dataset_counts_and_reproducibility(tmp_path):
    one = generate_dataset(tmp_path / "a", n_train=6, n_test=3, size=32, master_seed=4)
    two = generate_dataset(tmp_path / "b", n_train=6, n_test=3, size=32, master_seed=4)
    assert (one / "manifest.csv").read_bytes() == (two / "manifest.csv").read_bytes()
    for sub in ("real", "fake", "masks"):
        files = sorted((one / sub).iterdir())
        assert len(files) == (9 if sub != "masks" else 9)
        for f in files:
            assert f.read_bytes() == (two / sub / f.name).read_bytes()
    rows = read_manifest(one)
    assert sum(r["split"] == "train" for r in rows) == 12 and sum(r["split"] == "test" for r in rows) == 6


def test_default_split_sizes(bench_dir):
    rows = read_manifest(bench_dir)
    count = {(s, l): 0 for s in ("train", "test") for l in ("Real", "Fake")}
    for r in rows:
        count[r["split"], r["label"]] += 1
    assert count == {("train", "Real"): 2000, ("train", "Fake"): 2000, ("test", "Real"): 500, ("test", "Fake"): 500}
    assert len(list((bench_dir / "fake").iterdir())) == 2500
    assert len(list((bench_dir / "masks").iterdir())) == 2500


def test_corrupt_manifest_rejected(tmp_path):
    with open(tmp_path / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "split", "label"])
        w.writerow(["x", "validation", "Real"])
    with pytest.raises(ValueError):
        read_manifest(tmp_path)
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "none")
