import math

import numpy as np
import pytest

import sidlab as sl
from sidlab.action import MinimizeActionResult
from sidlab.dynamics import Path, make_init_point
from sidlab.landscape import preset
from sidlab.measures import make_init

PRESET_NAMES = ["ou", "quad-attract(1)", "dw", "gauss-attract(1)", "gauss-repel(1)"]


def ramp_path(dt=1e-4, T=1.0):
    pts = (np.arange(0, int(round(T / dt)) + 1) * dt)[:, None]
    return Path(dt, pts)


class TestActionFull:
    def test_zero_on_deterministic_flow(self):
        dt = 1e-3
        for name in PRESET_NAMES:
            init = make_init_point(0.8 if name != "dw" else -0.3)
            path = sl.integrate_deterministic(init, preset(name), dt, 2.0)
            assert sl.action_full(path, init, preset(name)) < 10 * dt

    def test_linear_ramp_closed_form(self):
        # f(t) = t against V = x^2/2, F = 0: cost (1/4) int (1+t)^2 = 7/12
        path = ramp_path()
        val = sl.action_full(path, make_init_point(0.0), preset("ou"))
        assert abs(val - 7.0 / 12.0) < 1e-3

    def test_split_additivity(self):
        dt = 1e-3
        n = 1000
        rng = np.random.default_rng(10)
        steps = rng.normal(size=n) * 0.02
        pts = np.concatenate([[0.4], 0.4 + np.cumsum(steps)])[:, None]
        ls = preset("gauss-attract(1)")
        init = make_init(1.0, [(0.2, 1.0)], 0.4)
        whole = sl.action_full(Path(dt, pts), init, ls)

        half = n // 2
        first = sl.action_full(Path(dt, pts[: half + 1]), init, ls)
        # carry the occupation: original prior plus the traversed block as atoms
        carried_atoms = [(pts[k, 0], dt) for k in range(half)]
        t_half = half * dt
        mix = ([(0.2, 1.0)] + carried_atoms)
        total = 1.0 + t_half
        init2 = make_init(total, [(z, w / total) for z, w in mix], pts[half, 0])
        second = sl.action_full(Path(dt, pts[half:]), init2, ls)
        assert whole == pytest.approx(first + second, abs=1e-8)

    def test_frozen_initial_condition(self):
        # t0 = inf: the interaction stays pinned at the prior for all time
        init = make_init(math.inf, [(0.5, 1.0)], 0.0)
        ls = preset("quad-attract(1)")
        dt = 1e-3
        path = sl.integrate_deterministic(init, ls, dt, 2.0)
        assert sl.action_full(path, init, ls) < 10 * dt

    def test_start_mismatch_rejected(self):
        with pytest.raises(ValueError):
            sl.action_full(ramp_path(), make_init_point(1.0), preset("ou"))


class TestActionEffective:
    def test_matches_full_without_interaction(self):
        path = ramp_path()
        assert sl.action_effective(path, preset("ou"), 0.0) == pytest.approx(
            sl.action_full(path, make_init_point(0.0), preset("ou")))

    def test_zero_on_effective_flow(self):
        dt = 1e-3
        p = sl.integrate_effective_flow(0.8, 0.0, preset("quad-attract(1)"), dt, 3.0)
        assert sl.action_effective(p, preset("quad-attract(1)"), 0.0) < 10 * dt

    def test_reversed_flow_costs_potential_difference(self):
        # integrate uphill: phi' = +grad W_a, cost telescopes to W(end) - W(start)
        ls = preset("quad-attract(1)")
        a = np.zeros(1)
        dt = 1e-4
        x = np.array([0.05])
        pts = [x.copy()]
        while x[0] < 1.0:
            x = x + dt * (ls.grad_v(x[None, :])[0] + ls.grad_f(x[None, :])[0])
            pts.append(x.copy())
        path = Path(dt, np.array(pts))
        w_start, _ = sl.effective_potential(ls, a, pts[0])
        w_end, _ = sl.effective_potential(ls, a, pts[-1])
        val = sl.action_effective(path, ls, a)
        assert abs(val - (w_end - w_start)) / (w_end - w_start) < 0.02

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            pts = rng.normal(size=(50, 1))
            assert sl.action_effective(Path(0.01, pts), preset("dw"), -1.0) >= 0.0


class TestActionGradient:
    @pytest.mark.parametrize("name", ["ou", "quad-attract(1)", "dw", "gauss-attract(1)"])
    def test_matches_finite_differences(self, name):
        ls = preset(name)
        rng = np.random.default_rng(14)
        n = 40
        dt = 0.05
        pts = np.cumsum(rng.normal(size=(n + 1, 1)) * 0.1, axis=0)
        path = Path(dt, pts)
        a = np.zeros(1)
        grad = sl.action_gradient(path, ls, a)
        h = 1e-6
        scale = np.abs(grad).max()
        for k in (1, n // 2, n - 1):
            bumped = pts.copy()
            bumped[k, 0] += h
            up = sl.action_effective(Path(dt, bumped), ls, a)
            bumped[k, 0] -= 2 * h
            dn = sl.action_effective(Path(dt, bumped), ls, a)
            fd = (up - dn) / (2 * h)
            assert abs(fd - grad[k - 1, 0]) / scale < 1e-5

    def test_near_zero_on_deterministic_flow(self):
        dt = 1e-3
        p = sl.integrate_effective_flow(0.8, 0.0, preset("ou"), dt, 4.0)
        g = sl.action_gradient(p, preset("ou"), 0.0)
        assert np.abs(g).max() < 10 * dt

    def test_quadratic_growth_of_perturbation(self):
        # bumping one interior node by delta raises the cost by Theta(delta^2/dt)
        dt = 1e-3
        init = make_init_point(0.8)
        p = sl.integrate_deterministic(init, preset("ou"), dt, 1.0)
        base = sl.action_full(p, init, preset("ou"))
        deltas = np.array([1e-3, 2e-3, 4e-3])
        rises = []
        for d in deltas:
            pts = p.points.copy()
            pts[500, 0] += d
            rises.append(sl.action_full(Path(dt, pts), init, preset("ou")) - base)
        ratios = np.array(rises[1:]) / np.array(rises[:-1])
        assert np.allclose(ratios, 4.0, rtol=0.05)
        assert rises[0] == pytest.approx(deltas[0] ** 2 / (2 * dt), rel=0.05)


class TestMinimizeAction:
    def test_quasipotential_identities(self):
        cases = [
            ("ou", 0.0, 1.0, 0.5),
            ("quad-attract(1)", 0.0, 1.0, 1.0),
            ("dw", -1.0, 0.0, 0.25),
        ]
        for name, a, z, expect in cases:
            res = sl.minimize_action(preset(name), a, z)
            assert res.converged
            assert abs(res.value - expect) / expect < 0.02

    def test_values_decrease_then_plateau_in_horizon(self):
        res = sl.minimize_action(preset("ou"), 0.0, 1.0)
        vals = [res.per_horizon[t] for t in sorted(res.per_horizon)]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))

    def test_minimizer_found_reversed_flow(self):
        ls = preset("ou")
        res = sl.minimize_action(ls, 0.0, 1.0, T_grid=(4.0, 8.0), N=800)
        path = res.path
        dt = path.dt
        vel = np.diff(path.points, axis=0) / dt
        mid = path.points[:-1]
        resid_opt = np.linalg.norm(vel - (ls.grad_v(mid) + ls.grad_f(mid)), axis=1).mean()
        n = path.points.shape[0] - 1
        line = np.linspace(0, 1, n + 1)[:, None]
        vel0 = np.diff(line, axis=0) / dt
        resid_line = np.linalg.norm(
            vel0 - (ls.grad_v(line[:-1]) + ls.grad_f(line[:-1])), axis=1).mean()
        assert resid_opt < resid_line / 10

    def test_coincident_endpoints_rejected(self):
        with pytest.raises(ValueError):
            sl.minimize_action(preset("ou"), 0.0, 0.0)

    def test_frozen_vs_full_gap(self):
        # evaluating the full cost (prior pinned at delta_a with large t0) on the
        # effective minimizer stays within the documented first-order bound
        ls = preset("quad-attract(1)")
        res = sl.minimize_action(ls, 0.0, 1.0, T_grid=(4.0, 8.0), N=800)
        rho = 0.05
        init = make_init(1e6, [(0.0, 1.0)], 0.0)
        full = sl.action_full(res.path, init, ls)
        bound = sl.frozen_gap_bound(rho, 0.5, ls.lip_grad_f, 1.0)
        assert abs(full - res.value) <= bound + 0.05 * res.value


class TestComputeH:
    def test_ou_ball(self):
        h, z = sl.compute_H(preset("ou"), sl.Ball(np.zeros(1), 1.0), 0.0)
        assert h == pytest.approx(0.5, abs=1e-10)

    def test_dw_interval_saddle(self):
        h, z = sl.compute_H(preset("dw"), sl.Interval(-2, 0), -1.0)
        assert h == pytest.approx(0.25, abs=1e-10)
        assert z[0] == pytest.approx(0.0)

    def test_quad_attract_interval(self):
        h, _ = sl.compute_H(preset("quad-attract(1)"), sl.Interval(-1, 1), 0.0)
        assert h == pytest.approx(1.0, abs=1e-10)

    def test_ball_2d_refinement(self):
        # attraction toward an off-center a makes the nearest boundary point cheapest
        ls = preset("quad-attract(1)", dim=2)
        a = np.array([0.3, 0.0])
        h, z = sl.compute_H(ls, sl.Ball(np.zeros(2), 1.0), a)
        assert z == pytest.approx([1.0, 0.0], abs=1e-4)
        w_expect = 0.5 + 0.5 * 0.7 ** 2 - 0.5 * 0.3 ** 2  # V(z)+F(z-a)-V(a) at (1,0)
        assert h == pytest.approx(w_expect, abs=1e-6)


class TestFrozenGapBound:
    def test_zero_radius(self):
        assert sl.frozen_gap_bound(0.0, 0.5, 1.0, 0.5) == 0.0

    def test_monotone_in_radius(self):
        vals = [sl.frozen_gap_bound(r, 0.1, 1.0, 0.5) for r in (0.05, 0.1, 0.2)]
        assert vals[0] < vals[1] < vals[2]

    def test_formula_value(self):
        assert sl.frozen_gap_bound(0.1, 0.1, 1.0, 0.5) == pytest.approx(0.11 * math.sqrt(0.5))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            sl.frozen_gap_bound(-0.1, 0.1, 1.0, 0.5)


class TestBuildPsi:
    def make_psi(self, t_a=50.0):
        ls = preset("ou")
        dom = sl.Ball(np.zeros(1), 1.0)
        init = make_init(50.0, [(0.0, 1.0)], 0.05)
        return init, ls, dom, sl.build_psi(init, ls, dom, 0.0, rho=0.05,
                                           eta=0.05, T_a=t_a)

    def test_endpoint_strictly_outside(self):
        _, _, dom, psi = self.make_psi()
        assert not dom.contains(psi.points[-1])
        assert abs(psi.points[-1, 0]) > 1.0

    def test_action_within_budget(self):
        init, ls, _, psi = self.make_psi()
        h = 0.5
        val = sl.action_full(psi, init, ls)
        assert val <= h + 0.1 * h

    def test_occupation_trace_stays_near_dirac(self):
        init, _, _, psi = self.make_psi()
        mu = init.measure(cap=1 << 18)
        worst = 0.0
        for k in range(psi.points.shape[0] - 1):
            mu.push_sample(psi.points[k], psi.dt)
            if k % 50 == 0:
                worst = max(worst, mu.w2_to_dirac(0.0))
        assert worst <= 1.5 * 0.05 + 1e-9

    def test_starts_at_x0(self):
        init, _, _, psi = self.make_psi()
        assert psi.points[0, 0] == init.x0[0]
