import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from divert.metrics import (JEC_SEED, JASR_TAU, PSNR_CAP, UndefinedMetric, asr, bootstrap_ci, iou, jec_subsets,
                            joint_asr, l_iour, paired_comparison, psnr, sign_test, ssim, stub_jec_score,
                            summarize, write_subset_manifest)
from divert.types import AttackRecord


def rec(i, clean="Fake", adv="Real", iou_adv=0.1, iou_clean=0.5, method="full"):
    return AttackRecord(str(i), clean, adv, clean == "Fake" and adv == "Real", iou_clean, iou_adv,
                        0.3, 0.7, 40.0, 0.95, method=method)


def test_asr_hand_built():
    recs = ([rec(i, "Fake", "Real") for i in range(3)] + [rec(i, "Fake", "Fake") for i in range(3, 6)]
            + [rec(i, "Real", "Real") for i in range(6, 10)])
    assert asr(recs) == 0.5
    assert asr([rec(0, "Fake", "Fake")]) == 0.0
    with pytest.raises(UndefinedMetric):
        asr([rec(0, "Real", "Real")])


def test_iou_examples():
    a = np.array([[1, 1], [0, 0]], dtype=bool)
    b = np.array([[0, 1], [0, 1]], dtype=bool)
    assert iou(a, a) == 1.0 and iou(a, ~a) == 0.0
    assert iou(a, b) == 1 / 3
    assert iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0
    with pytest.raises(ValueError):
        iou(a, np.zeros((3, 3), bool))


@settings(max_examples=60)
@given(arrays(np.bool_, (4, 5)), arrays(np.bool_, (4, 5)))
def test_iou_symmetric(a, b):
    assert iou(a, b) == iou(b, a)
    assert iou(a, a) == 1.0


def test_joint_asr_defaults_and_saturation():
    assert JASR_TAU == 0.2
    recs = [rec(0, iou_adv=0.1), rec(1, iou_adv=0.5), rec(2, adv="Fake"), rec(3, clean="Real", adv="Real")]
    assert joint_asr(recs) == 1 / 3
    assert joint_asr(recs, 1.0) == asr(recs)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.floats(0, 1)), min_size=1, max_size=20),
       st.floats(0, 1), st.floats(0, 1))
def test_joint_asr_monotone_in_tau(rows, t1, t2):
    recs = [rec(i, "Fake" if c else "Real", "Real" if a else "Fake", iou_adv=u) for i, (c, a, u) in enumerate(rows)]
    if not any(c for c, _, _ in rows):
        return
    lo, hi = sorted((t1, t2))
    assert joint_asr(recs, lo) <= joint_asr(recs, hi) <= asr(recs)


def test_l_iour():
    assert abs(l_iour([0.4, 0.6], [0.1, 0.1]) - 0.8) < 1e-15
    with pytest.raises(UndefinedMetric):
        l_iour([0.0], [0.0])


def test_psnr_examples():
    x = np.full((32, 32, 3), 0.5)
    assert psnr(x, x) == PSNR_CAP == 100.0
    assert abs(psnr(x, x + 8 / 255) - 20 * math.log10(255 / 8)) < 1e-9
    assert abs(psnr(x, x + 8 / 255) - 30.07) < 0.01


@settings(max_examples=40)
@given(st.floats(1e-4, 0.3), st.floats(1e-4, 0.3))
def test_psnr_decreasing_in_mse(a, b):
    x = np.full((32, 32, 3), 0.5)
    if abs(a - b) > 1e-9:
        lo, hi = sorted((a, b))
        assert psnr(x, x + lo) > psnr(x, x + hi)


def test_ssim_constant_images_closed_form():
    x = np.full((32, 32, 3), 0.2)
    y = np.full((32, 32, 3), 0.6)
    c1 = (0.01 * 1.0) ** 2
    expected = (2 * 0.2 * 0.6 + c1) / (0.2**2 + 0.6**2 + c1)
    assert abs(ssim(x, y) - expected) < 1e-9


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (32, 32, 3), elements=st.floats(0, 1)))
def test_ssim_self_is_one(x):
    assert abs(ssim(x, x) - 1.0) < 1e-12


def test_bootstrap_examples():
    assert bootstrap_ci([0.3] * 7) == (0.3, 0.3)
    values = np.array([0.1, 0.5, 0.9])
    means = sorted(float(np.mean(c)) for c in itertools.product(values, repeat=3))
    assert bootstrap_ci(values) == (means[int(np.ceil(0.025 * 27)) - 1], means[int(np.ceil(0.975 * 27)) - 1])
    assert bootstrap_ci(values, seed=JEC_SEED) == bootstrap_ci(values)
    with pytest.raises(ValueError):
        bootstrap_ci([])


def _binom_oracle(n10, n01):
    n = n10 + n01
    if n == 0:
        return 1.0
    k = min(n10, n01)
    p = sum(math.comb(n, i) for i in range(k + 1)) * 0.5**n
    return min(1.0, 2 * p)


def test_sign_test_hand_counts():
    a = [True] * 8 + [False] * 2 + [True] * 5
    b = [False] * 8 + [True] * 2 + [True] * 5
    n10, n01, p = sign_test(a, b)
    assert (n10, n01) == (8, 2)
    # 2 * P(X <= 2), X ~ Bin(10, 1/2) = 2 * 56 / 1024
    assert p == 2 * 56 / 1024
    assert sign_test(a, a)[2] == 1.0


@settings(max_examples=60)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), max_size=40))
def test_sign_test_matches_binomial(pairs):
    a = [x for x, _ in pairs]
    b = [y for _, y in pairs]
    n10, n01, p = sign_test(a, b)
    assert abs(p - _binom_oracle(n10, n01)) < 1e-12
    assert sign_test(b, a)[2] == p


def test_paired_comparison_identical_sets():
    recs = [rec(i, adv="Real" if i % 2 else "Fake") for i in range(10)]
    cmp = paired_comparison(recs, recs)
    assert cmp == {"shared": 10, "first_only": 0, "second_only": 0, "p_value": 1.0}


def test_jec_conditional_and_common():
    succ = {"a": [rec(i) for i in "abc"], "b": [rec(i) for i in "bcd"], "z": [rec("q", adv="Fake")]}
    res = jec_subsets(succ, "commonSuccess")
    assert res.mode == "fixedN" and any("N=2 < 50" in n for n in res.notices)
    assert any("z: no successful attacks" in n for n in res.notices)
    assert res.ids == {"a": sorted(res.ids["a"]), "b": sorted(res.ids["b"])} and res.n == 3
    cond = jec_subsets(succ, "conditional")
    assert cond.ids == {"a": ["a", "b", "c"], "b": ["b", "c", "d"]}
    with pytest.raises(ValueError):
        jec_subsets(succ, "random")


def test_subset_manifest(tmp_path):
    res = jec_subsets({"a": [rec(i) for i in range(5)]}, "fixedN", 3)
    write_subset_manifest(tmp_path / "m.csv", res)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == f"# mode=fixedN seed={JEC_SEED} n=3"
    assert lines[1] == "method,image_id" and len(lines) == 5


def test_stub_score_range():
    assert stub_jec_score(None, "Real", "The image looks authentic and consistent") == 5.0
    assert stub_jec_score(None, "Real", "manipulated splice") == 1.0
    assert 1.0 <= stub_jec_score(None, "Fake", "") <= 5.0


def test_summarize_self_check():
    recs = [rec(0), rec(1, adv="Fake", iou_adv=0.4), rec(2, clean="Real", adv="Real")]
    s = summarize(recs, resamples=500)
    assert (s.n_records, s.n_detectable, s.asr, s.j_asr) == (3, 2, 0.5, 0.5)
    assert s.asr_ci_low <= s.asr <= s.asr_ci_high
    assert s.lpips is None and s.to_row()["method"] == "full"
    with pytest.raises(UndefinedMetric):
        summarize([])
