from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from divert.io import load_image, load_mask, read_records, save_image, save_mask, write_records
from divert.types import (EPSILON, ETA_V, AttackConfig, AttackRecord, ImageTensor, Perturbation,
                          TamperMask, clip_adversarial, success_flag)


def _png(path, value, size=32):
    Image.fromarray(np.full((size, size, 3), value, dtype=np.uint8), mode="RGB").save(path)
    return path


@pytest.mark.parametrize("value,expected", [(255, 1.0), (0, 0.0), (128, 128 / 255)])
def test_load_image_scales_by_255(tmp_path, value, expected):
    img = load_image(_png(tmp_path / "x.png", value))
    assert img.shape == (32, 32, 3)
    assert np.all(img.values == expected)
    if value == 128:
        assert abs(img.values[0, 0, 0] - 0.50196) < 1e-5


def test_load_image_rejects_non_rgb(tmp_path):
    Image.fromarray(np.zeros((32, 32), dtype=np.uint8), mode="L").save(tmp_path / "g.png")
    with pytest.raises(OSError):
        load_image(tmp_path / "g.png")
    with pytest.raises(OSError):
        load_image(tmp_path / "missing.png")


def test_image_invariants():
    with pytest.raises(ValueError):
        ImageTensor(np.full((32, 32, 3), 1.5))
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((16, 16, 3)))
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((32, 32)))


def test_clip_adversarial_examples():
    eps = float(EPSILON)
    half = ImageTensor(np.full((32, 32, 3), 0.5))
    assert np.array_equal(clip_adversarial(half, Perturbation.zeros((32, 32, 3), eps)).values, half.values)
    up = Perturbation(np.full((32, 32, 3), eps), eps)
    assert np.all(clip_adversarial(ImageTensor(np.ones((32, 32, 3))), up).values == 1.0)
    out = clip_adversarial(half, up).values
    assert np.allclose(out, 0.5 + 8 / 255) and abs(out[0, 0, 0] - 0.53137) < 1e-5


def test_perturbation_budget_enforced():
    with pytest.raises(ValueError):
        Perturbation(np.full((32, 32, 3), 0.1), float(EPSILON))


def test_config_defaults_are_the_published_values():
    c = AttackConfig()
    assert c.epsilon == float(Fraction(8, 255)) and c.eta_v == float(Fraction(1, 255))
    assert EPSILON == Fraction(8, 255) and ETA_V == Fraction(1, 255)
    assert (c.alpha, c.beta, c.lambda1, c.lambda2, c.lambda_s) == (0.7, 0.1, 1.0, 0.01, 1.0)
    assert (c.sigma, c.eta_e, c.T, c.k_nn) == (15.0, 0.01, 100, 100)
    assert (c.grad_clip, c.warmup, c.attention_gamma, c.mask_gamma, c.mask_freeze) == (1.0, 10, 0.9, 0.8, 50)


@pytest.mark.parametrize("bad", [dict(threat_level="III"), dict(mask_mode="x"), dict(alpha=1.5),
                                 dict(beta=-1), dict(eta_v=0), dict(attention_gamma=1.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        AttackConfig(**bad)


def test_config_round_trip():
    c = AttackConfig(seed=3, alpha=0.5)
    assert AttackConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        AttackConfig.from_dict({"nope": 1})


def test_record_success_must_match_predictions():
    with pytest.raises(ValueError):
        AttackRecord("a", "Fake", "Real", False, 0.5, 0.5, 0.5, 0.5, 40, 0.9)
    with pytest.raises(ValueError):
        AttackRecord("a", "Fake", "Maybe", False, 0.5, 0.5, 0.5, 0.5, 40, 0.9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_image_round_trip_within_quantization(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    values = rng.random((32, 32, 3))
    path = tmp_path_factory.mktemp("rt") / "a.png"
    save_image(path, ImageTensor(values))
    assert np.abs(load_image(path).values - values).max() <= 1 / 255


def test_mask_round_trip(tmp_path):
    m = np.zeros((32, 32), dtype=np.uint8)
    m[4:9, 3:20] = 1
    save_mask(tmp_path / "m.png", TamperMask(m))
    back = load_mask(tmp_path / "m.png")
    assert np.array_equal(back.values, m.astype(bool))
    assert np.unique(np.asarray(Image.open(tmp_path / "m.png"))).tolist() == [0, 255]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["Real", "Fake"]), st.sampled_from(["Real", "Fake"]),
                          st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=8))
def test_records_round_trip_and_success_recomputable(tmp_path_factory, rows):
    recs = [AttackRecord(f"i{k}", c, a, success_flag(c, a), u, v, u, v, 33.3333333333, 0.1 + v / 2,
                         loss_trace=[{"t": 1, "l_det": u / 3}], flags=["x"])
            for k, (c, a, u, v) in enumerate(rows)]
    path = tmp_path_factory.mktemp("rec") / "r.jsonl"
    write_records(path, recs, meta={"method": "full"})
    header, back = read_records(path)
    assert header["meta"] == {"method": "full"}
    assert back == recs
    for r in back:
        assert r.success == (r.clean_prediction == "Fake" and r.attacked_prediction == "Real")


def test_record_file_needs_header(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"image_id": "a"}\n')
    with pytest.raises(ValueError):
        read_records(tmp_path / "bad.jsonl")
