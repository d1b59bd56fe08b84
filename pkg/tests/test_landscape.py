import numpy as np
import pytest
from dataclasses import replace

import sidlab as sl
from sidlab.landscape import PRESETS, preset

ALL_PRESETS = ["ou", "quad-attract(1)", "dw", "gauss-attract(1)", "gauss-repel(1)"]


def test_potential_eval_examples():
    assert sl.potential_eval(preset("ou"), 2.0) == (2.0, pytest.approx(2.0))
    assert sl.potential_eval(preset("dw"), 1.0) == (0.0, pytest.approx(0.0))
    v, g = sl.potential_eval(preset("dw"), 0.0)
    assert v == pytest.approx(0.25) and g == pytest.approx(0.0)


def test_interaction_eval_examples():
    v, g = sl.interaction_eval(preset("quad-attract(1)"), 3.0)
    assert v == pytest.approx(4.5) and g == pytest.approx(3.0)
    v, g = sl.interaction_eval(preset("gauss-attract(1)"), 1.0)
    assert v == pytest.approx(1 - np.exp(-0.5))
    assert g == pytest.approx(np.exp(-0.5))


@pytest.mark.parametrize("name", ALL_PRESETS)
def test_interaction_normalized_at_zero(name):
    v, g = sl.interaction_eval(preset(name), 0.0)
    assert v == 0.0
    assert np.all(g == 0.0)


def test_effective_potential_examples():
    w, dw_ = sl.effective_potential(preset("quad-attract(1)"), 0.0, 1.0)
    assert w == pytest.approx(1.0) and dw_ == pytest.approx(2.0)
    w, _ = sl.effective_potential(preset("dw"), -1.0, 0.0)
    assert w == pytest.approx(0.25)
    # W_a(a) = 0 for any preset
    for name in ALL_PRESETS:
        ls = preset(name)
        a = np.zeros(ls.dim)
        w, _ = sl.effective_potential(ls, a, a)
        assert w == 0.0


def test_effective_potential_invariant_under_constant_shift():
    ls = preset("dw")
    shifted = replace(ls, v=lambda p, _v=ls.v: _v(p) + 3.7)
    for x in (-1.5, -0.3, 0.4):
        w1, g1 = sl.effective_potential(ls, -1.0, x)
        w2, g2 = sl.effective_potential(shifted, -1.0, x)
        assert w1 == pytest.approx(w2, abs=1e-12)
        assert np.array_equal(g1, g2)


@pytest.mark.parametrize("name", ALL_PRESETS)
def test_gradients_match_finite_differences(name):
    ls = preset(name)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-2, 2, size=(1000, ls.dim))
    h = 1e-6
    for fn, grad in ((ls.v, ls.grad_v), (ls.f, ls.grad_f)):
        g = grad(pts)
        for k in range(ls.dim):
            dp = np.zeros(ls.dim)
            dp[k] = h
            fd = (fn(pts + dp) - fn(pts - dp)) / (2 * h)
            scale = np.maximum(np.abs(g[:, k]), 1.0)
            assert np.max(np.abs(fd - g[:, k]) / scale) < 1e-6


@pytest.mark.parametrize("name", ALL_PRESETS)
def test_hessians_match_finite_differences(name):
    ls = preset(name)
    rng = np.random.default_rng(5)
    pts = rng.uniform(-2, 2, size=(200, ls.dim))
    h = 1e-5
    for grad, hess in ((ls.grad_v, ls.hess_v), (ls.grad_f, ls.hess_f)):
        hmat = hess(pts)
        for k in range(ls.dim):
            dp = np.zeros(ls.dim)
            dp[k] = h
            fd = (grad(pts + dp) - grad(pts - dp)) / (2 * h)
            assert np.max(np.abs(fd - hmat[:, :, k])) < 1e-5


def test_bounded_interaction_gradient_flag():
    ls = preset("gauss-attract(2)")
    rng = np.random.default_rng(3)
    pts = rng.uniform(-6, 6, size=(20000, 1))
    assert np.linalg.norm(ls.grad_f(pts), axis=1).max() <= ls.bound_grad_f + 1e-12


def test_estimate_lipschitz_linear_fields():
    ou = preset("ou")
    assert sl.estimate_lipschitz(ou.grad_v, (-2.0, 2.0), 10000, seed=1) == pytest.approx(1.0, abs=1e-3)
    qa = preset("quad-attract(1)", dim=2)
    est = sl.estimate_lipschitz(qa.grad_f, (np.full(2, -2.0), np.full(2, 2.0)), 10000, seed=2)
    assert est == pytest.approx(1.0, abs=1e-3)


def test_estimate_lipschitz_double_well():
    # max |V''| = |3x^2 - 1| = 11 at the edges of [-2, 2]
    est = sl.estimate_lipschitz(preset("dw").grad_v, (-2.0, 2.0), 100000, seed=7)
    assert abs(est - 11.0) / 11.0 < 0.05
    assert est <= 11.0 + 1e-9  # sampled lower bound never exceeds the true constant


def test_estimate_lipschitz_degenerate_region():
    with pytest.raises(ValueError):
        sl.estimate_lipschitz(preset("ou").grad_v, (1.0, 1.0), 100, seed=0)


def test_strong_attraction_ou():
    k, ok = sl.check_strong_attraction(preset("ou"), 0.0, 0.1, 0.1, 4096, seed=0)
    assert ok and k == pytest.approx(1.0, abs=1e-6)


def test_strong_attraction_quad():
    k, ok = sl.check_strong_attraction(preset("quad-attract(1)"), 0.0, 0.1, 0.1, 8192, seed=0)
    assert ok
    assert 1.0 <= k <= 2.0


def test_strong_attraction_repulsive_fails():
    k, ok = sl.check_strong_attraction(preset("gauss-repel(10)"), 0.0, 0.1, 0.1, 4096, seed=0)
    assert not ok and k < 0


def test_strong_attraction_seed_reproducible():
    args = (preset("quad-attract(2)"), 0.0, 0.2, 0.1, 2048)
    k1, _ = sl.check_strong_attraction(*args, seed=123)
    k2, _ = sl.check_strong_attraction(*args, seed=123)
    assert k1 == k2


def test_preset_catalog_records_scope():
    for name in ALL_PRESETS:
        ls = preset(name)
        assert set(ls.flag_scope) == {"lip_grad_v", "lip_grad_f", "bound_grad_f"}
    assert "ball" in preset("dw").flag_scope["lip_grad_v"]
    assert preset("ou").flag_scope["lip_grad_v"] == "global"


def test_preset_unknown_name():
    with pytest.raises(KeyError):
        preset("nope")


class TestClamp:
    def test_inside_bit_identical(self):
        dw = preset("dw")
        cl = sl.clamp_landscape(dw, 2.0, 0.5)
        xs = np.linspace(-1.999, 1.999, 257)[:, None]
        assert np.array_equal(cl.v(xs), dw.v(xs))
        assert np.array_equal(cl.grad_v(xs), dw.grad_v(xs))

    def test_gradient_capped_outside(self):
        cl = sl.clamp_landscape(preset("dw"), 2.0, 0.5)
        rng = np.random.default_rng(0)
        far = np.sign(rng.normal(size=(10000, 1))) * rng.uniform(2.51, 25.0, size=(10000, 1))
        assert np.abs(cl.grad_v(far)).max() <= cl.info["grad_v_cap"] + 1e-12

    def test_value_continuous_across_shell(self):
        cl = sl.clamp_landscape(preset("dw"), 2.0, 0.5)
        ray = np.linspace(1.9, 2.7, 160001)[:, None]
        h = ray[1, 0] - ray[0, 0]
        vals = cl.v(ray)
        grads = cl.grad_v(ray)[:, 0]
        # C^1 along the ray: jumps explained by the gradient to first order
        mid = 0.5 * (grads[1:] + grads[:-1])
        assert np.max(np.abs(np.diff(vals) - mid * h)) < 1e-8

    def test_clamped_gradient_is_a_gradient_2d(self):
        cl = sl.clamp_landscape(preset("quad-attract(1)", dim=2), 1.5, 0.5)
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(500, 2)) * 2.0
        h = 1e-6
        g = cl.grad_v(pts)
        for k in range(2):
            dp = np.zeros(2)
            dp[k] = h
            fd = (cl.v(pts + dp) - cl.v(pts - dp)) / (2 * h)
            assert np.max(np.abs(fd - g[:, k])) < 1e-8

    def test_interaction_still_normalized(self):
        cl = sl.clamp_landscape(preset("gauss-attract(2)"), 1.0, 0.5)
        v, g = sl.interaction_eval(cl, 0.0)
        assert v == 0.0 and np.all(g == 0.0)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            sl.clamp_landscape(preset("dw"), -1.0, 0.5)
        with pytest.raises(ValueError):
            sl.clamp_landscape(preset("dw"), 1.0, 0.0)
