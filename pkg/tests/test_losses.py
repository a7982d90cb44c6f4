import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mofu import autograd as ag
from mofu.losses import (LossReport, MaskSet, combine_masks, default_perm_count, flow_match_target,
                         SCALE_EPS, permutation_loss, sample_permutations, scale_loss, spatial_weight_map, spsl_total, sq_err)
from mofu.numerics import grad_check, softmax


def half_planes(n=8):
    left = np.zeros((n, n))
    left[:, : n // 2] = 1
    return left, 1 - left


def test_flow_target_examples():
    n = np.random.default_rng(0).standard_normal((2, 3))
    x_t, target = flow_match_target(np.zeros((2, 3)), n, 0.5)
    assert np.array_equal(x_t, n / 2) and np.array_equal(target, n)
    x0 = np.random.default_rng(1).standard_normal((2, 3))
    x_t, _ = flow_match_target(x0, n, 1e-12)
    assert np.max(np.abs(x_t - x0)) < 1e-11


def test_flow_target_formula():
    rng = np.random.default_rng(2)
    x0, n = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3))
    x_t, target = flow_match_target(x0, n, 0.3)
    for a, b, c, d in zip(x0.ravel(), n.ravel(), x_t.ravel(), target.ravel()):
        assert abs(c - (0.7 * a + 0.3 * b)) < 1e-15
        assert abs(d - (b - a)) < 1e-15


def test_flow_target_per_item_t():
    rng = np.random.default_rng(3)
    x0, n = rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 2))
    x_t, _ = flow_match_target(x0, n, np.array([0.2, 0.6]))
    assert np.array_equal(x_t[1], flow_match_target(x0[1], n[1], 0.6)[0])


@pytest.mark.parametrize("t", [0.0, 1.0, -0.5, 1.5])
def test_flow_target_rejects_t(t):
    with pytest.raises(ValueError):
        flow_match_target(np.zeros(2), np.zeros(2), t)


def test_weight_map_full_coverage():
    assert np.array_equal(spatial_weight_map(MaskSet([np.ones((6, 6))], [1.0]), 4, 4), np.ones((4, 4)))
    two = spatial_weight_map(MaskSet([np.ones((6, 6)), np.ones((3, 3))], [0.5, 0.5]), 4, 4)
    assert np.array_equal(two, np.ones((4, 4)))


def test_weight_map_half_planes():
    left, right = half_planes()
    m = combine_masks([left, right], softmax(np.array([math.log(3), 0.0])), 4, 4)
    # 8 -> 4 align-corners samples source columns 0, 7/3, 14/3, 7: no sample straddles the seam
    assert np.allclose(m[:, :2], 0.75, atol=1e-15) and np.allclose(m[:, 2:], 0.25, atol=1e-15)


def test_weight_map_uses_area_softmax():
    left, right = half_planes()
    ms = MaskSet([left, right], [0.9, 0.1])
    w = math.exp(0.8) / (math.exp(0.8) + 1)
    m = spatial_weight_map(ms, 4, 4)
    assert np.allclose(m[:, :2], w, atol=1e-15) and np.allclose(m[:, 2:], 1 - w, atol=1e-15)


def test_maskset_validation():
    with pytest.raises(ValueError):
        MaskSet([], [])
    with pytest.raises(ValueError):
        MaskSet([np.ones((2, 2))], [0.0])
    with pytest.raises(ValueError):
        MaskSet([np.ones((2, 2))], [0.5, 0.5])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=4), st.floats(-3, 3))
def test_area_weights_sum_and_shift(areas, c):
    w = softmax(np.array(areas))
    assert abs(w.sum() - 1) < 1e-12
    assert np.max(np.abs(softmax(np.array(areas) + c) - w)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_weight_map_range(r, lat, seed):
    rng = np.random.default_rng(seed)
    masks = [(rng.random((8, 8)) < 0.5).astype(float) for _ in range(r)]
    for m in masks:
        m[0, 0] = 1
    out = spatial_weight_map(MaskSet(masks, [m.mean() for m in masks]), lat, lat)
    assert out.min() >= 0 and out.max() <= 1 + 1e-15


def test_scale_loss_uniform_is_mse():
    rng = np.random.default_rng(4)
    pred, target = rng.standard_normal((2, 4, 3, 4, 4)), rng.standard_normal((2, 4, 3, 4, 4))
    err = sq_err(pred, target)
    assert abs(scale_loss(err, np.ones((4, 4))).data - np.mean((pred - target) ** 2)) < 1e-12
    assert scale_loss(np.zeros((1, 1, 1, 4, 4)), np.ones((4, 4))).data == 0.0


def test_scale_loss_double_loop():
    rng = np.random.default_rng(5)
    err = rng.random((1, 1, 1, 4, 4))
    m = np.zeros((4, 4))
    m[:, :2] = 0.75
    m[:, 2:] = 0.25
    num = den = 0.0
    for i in range(4):
        for j in range(4):
            num += err[0, 0, 0, i, j] * m[i, j]
            den += m[i, j]
    assert abs(scale_loss(err, m).data - num / (den + SCALE_EPS)) < 1e-12


def test_scale_loss_per_sample_maps():
    rng = np.random.default_rng(6)
    err, maps = rng.random((2, 3, 2, 4, 4)), rng.random((2, 4, 4))
    full = np.broadcast_to(maps[:, None, None], err.shape)
    assert abs(scale_loss(err, maps).data - (err * full).sum() / (full.sum() + SCALE_EPS)) < 1e-12
    with pytest.raises(ValueError):
        scale_loss(err, -maps)


def test_scale_loss_gradient():
    rng = np.random.default_rng(7)
    target, m = rng.standard_normal((1, 2, 2, 3, 3)), rng.random((3, 3))
    rep = grad_check(lambda p: scale_loss(sq_err(p["x"], target), m), {"x": rng.standard_normal(target.shape)})
    assert rep.max_rel_error < 1e-6


def test_perm_counts():
    assert [default_perm_count(n) for n in (1, 2, 3, 4)] == [0, 1, 3, 3]
    perms = sample_permutations(3, 5, np.random.default_rng(0))
    assert len(set(perms)) == 5 and (0, 1, 2) not in perms
    assert sample_permutations(1, 3, np.random.default_rng(0)) == []
    with pytest.raises(ValueError):
        sample_permutations(3, 0, np.random.default_rng(0))
    big = sample_permutations(9, 4, np.random.default_rng(1))
    assert len(set(big)) == 4 and tuple(range(9)) not in big


def test_perm_loss_single_reference():
    assert permutation_loss([np.ones((2, 4, 4))], None).data == 0.0


@pytest.mark.parametrize("n", [2, 3, 4])
def test_perm_loss_faithful_is_zero(n):
    refs = list(np.random.default_rng(n).standard_normal((n, 3, 4, 4)))
    assert permutation_loss(refs, None, rng=np.random.default_rng(0)).data == 0.0
    assert abs(permutation_loss(refs, 2, canonical=False, rng=np.random.default_rng(0)).data) < 1e-12


def test_perm_loss_perturb_hook():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((2, 2, 4, 4))
    delta = 1e-2 * rng.standard_normal((2, 4, 4))

    def hook(ordered, perm):
        return [ordered[0], ordered[1] + delta]
    val = permutation_loss([a, b], None, perturb=hook).data
    assert val > 0
    assert abs(val - np.sum(delta ** 2)) < 1e-10


def test_perm_loss_rejects_zero_count():
    with pytest.raises(ValueError):
        permutation_loss([np.ones((1, 2, 2))] * 2, 0)


def test_perm_loss_gradient_reaches_inputs():
    rng = np.random.default_rng(9)
    delta = rng.standard_normal((1, 4, 4))

    def loss(p):
        return permutation_loss([p["a"], p["b"]], None, 0.3, band_weights=(2.0, 0.5),
                                perturb=lambda o, perm: [o[0] * 1.5, o[1] * 0.5 + delta])
    rep = grad_check(loss, {"a": rng.standard_normal((1, 4, 4)), "b": rng.standard_normal((1, 4, 4))})
    assert rep.max_rel_error < 1e-6
    assert np.any(rep.analytic["a"] != 0)


def test_spsl_total():
    assert spsl_total(0.0, 0.0) == 0.0
    assert spsl_total(0.25, 0.5) == 0.75
    a, b = np.random.default_rng(10).random(2)
    assert spsl_total(a, b) == a + b
    assert spsl_total(a, b, 2.0, 0.5) == 2 * a + 0.5 * b
    assert spsl_total(ag.Var(0.25), ag.Var(0.5)).data == 0.75


def test_loss_report_keys():
    d = LossReport(0.1, 0.0, 0.1, 0.3, 7).to_dict()
    assert sorted(d) == ["l_mse_mean", "l_perm", "l_scale", "l_spsl", "step"]
