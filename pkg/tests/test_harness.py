import json
import math

import numpy as np
import pytest
from scipy import integrate as sint

import sidlab as sl
from sidlab.dynamics import ExitRecord, Path
from sidlab.harness import (
    BVPResult,
    ExitStats,
    ExperimentConfig,
    read_records_csv,
    write_records_csv,
)
from sidlab.landscape import Landscape, preset


def small_config(**over):
    base = dict(
        landscape={"name": "ou"},
        domain={"variant": "interval", "lo": -1.0, "hi": 1.0},
        sigma_grid=[1.0, 0.8],
        trajectories_per_sigma=12,
        x0=0.0,
        dt=1e-3,
        horizon_cap=1e4,
        master_seed=77,
    )
    base.update(over)
    return ExperimentConfig(**base)


def synthetic_records(H, sigmas, n=50, noise=0.0, seed=0, censored_frac=0.0):
    rng = np.random.default_rng(seed)
    recs = []
    for s in sigmas:
        mean = math.exp(2 * H / s ** 2)
        for i in range(n):
            if rng.uniform() < censored_frac:
                recs.append(ExitRecord(s, i, None, None, True, 1e12, None, None, 0))
                continue
            t = mean * math.exp(noise * rng.normal())
            recs.append(ExitRecord(s, i, t, np.array([1.0]), False, 1e12, None, None, 0))
    return recs


class TestCampaign:
    def test_counts_and_determinism(self, tmp_path):
        cfg = small_config(output_dir=str(tmp_path / "out"))
        r1 = sl.run_exit_campaign(cfg)
        r2 = sl.run_exit_campaign(cfg)
        assert r1.summary["stats"] == r2.summary["stats"]
        for s, st in r1.stats.per_sigma.items():
            assert st.n == 12
        assert (tmp_path / "out" / "records.csv").exists()
        assert (tmp_path / "out" / "summary.json").exists()
        doc = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert doc["config_hash"] == cfg.hash()

    def test_worker_count_invariance(self):
        r1 = sl.run_exit_campaign(small_config(n_workers=1))
        r3 = sl.run_exit_campaign(small_config(n_workers=3))
        assert r1.summary["stats"] == r3.summary["stats"]
        for a, b in zip(r1.records, r3.records):
            assert a.seed == b.seed and a.exit_time == b.exit_time

    def test_validation(self):
        with pytest.raises(ValueError):
            small_config(sigma_grid=[])
        with pytest.raises(ValueError):
            small_config(sigma_grid=[0.5, -1.0])
        with pytest.raises(ValueError):
            small_config(trajectories_per_sigma=0)

    def test_dt_guidance_warning(self):
        cfg = small_config(dt=0.05, sigma_grid=[1.0], trajectories_per_sigma=4)
        with pytest.warns(UserWarning):
            sl.run_exit_campaign(cfg)

    def test_records_csv_round_trip(self, tmp_path):
        cfg = small_config(output_dir=str(tmp_path))
        res = sl.run_exit_campaign(cfg)
        back = read_records_csv(tmp_path / "records.csv")
        assert len(back) == len(res.records)
        for a, b in zip(res.records, back):
            assert a.sigma == b.sigma and a.seed == b.seed
            assert a.exit_time == b.exit_time
            assert a.censored == b.censored


class TestKramersWindow:
    def test_exact_exponent_inside(self):
        recs = synthetic_records(0.5, [0.6, 0.5], n=40)
        frac = sl.kramers_window_fraction(recs, 0.5, delta=0.1)
        assert all(v == 1.0 for v in frac.values())

    def test_zero_delta_strict(self):
        recs = synthetic_records(0.5, [0.6], n=40)
        frac = sl.kramers_window_fraction(recs, 0.5, delta=0.0)
        assert frac[0.6] == 0.0

    def test_matches_direct_recount(self):
        rng = np.random.default_rng(1)
        recs = synthetic_records(0.5, [0.5], n=200, noise=1.0, seed=2)
        H, delta, s = 0.5, 0.2, 0.5
        frac = sl.kramers_window_fraction(recs, H, delta)[s]
        lo, hi = math.exp(2 * (H - delta) / s**2), math.exp(2 * (H + delta) / s**2)
        count = sum(1 for r in recs if not r.censored and lo < r.exit_time < hi)
        assert frac == count / len(recs)

    def test_censored_counted_outside(self):
        recs = synthetic_records(0.5, [0.5], n=100, censored_frac=0.3, seed=3)
        frac = sl.kramers_window_fraction(recs, 0.5, 0.3)[0.5]
        n_cens = sum(r.censored for r in recs)
        assert frac <= 1.0 - n_cens / len(recs) + 1e-12

    def test_nested_windows_monotone(self):
        recs = synthetic_records(0.5, [0.5], n=200, noise=0.8, seed=4)
        fracs = [sl.kramers_window_fraction(recs, 0.5, d)[0.5] for d in (0.05, 0.1, 0.2, 0.4)]
        assert all(a <= b for a, b in zip(fracs, fracs[1:]))
        assert fracs[-1] <= 1.0


class TestSlope:
    def test_exact_synthetic_any_grid(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            H = float(rng.uniform(0.1, 2.0))
            sigmas = sorted(set(np.round(rng.uniform(0.3, 1.2, size=4), 3)))
            if len(sigmas) < 2:
                continue
            stats = ExitStats.from_records(synthetic_records(H, sigmas, n=8))
            slope, intercept, stderr = sl.estimate_kramers_slope(stats)
            assert slope == pytest.approx(2 * H, abs=1e-9)
            assert stderr == pytest.approx(0.0, abs=1e-8)

    def test_single_sigma_rejected(self):
        stats = ExitStats.from_records(synthetic_records(0.5, [0.5], n=8))
        with pytest.raises(ValueError):
            sl.estimate_kramers_slope(stats)

    def test_censored_levels_warn(self):
        recs = synthetic_records(0.5, [0.7, 0.5], n=20, censored_frac=0.0)
        recs += [ExitRecord(0.4, i, None, None, True, 1e12, None, None, 0) for i in range(20)]
        stats = ExitStats.from_records(recs)
        with pytest.warns(UserWarning):
            slope, _, _ = sl.estimate_kramers_slope(stats)
        assert slope == pytest.approx(1.0, abs=1e-9)

    def test_bootstrap_ci_coverage(self):
        # calibration study: t-based 90% CI from the fitted stderr should cover
        # the true slope in at least 85 of 100 synthetic datasets
        from scipy.stats import t as t_dist

        H = 0.5
        sigmas = [0.7, 0.6, 0.5, 0.45, 0.4]
        q = t_dist.ppf(0.95, df=len(sigmas) - 2)
        covered = 0
        for rep in range(100):
            rng = np.random.default_rng(1000 + rep)
            recs = []
            for s in sigmas:
                mean = math.exp(2 * H / s ** 2)
                times = rng.exponential(mean, size=400)
                recs += [ExitRecord(s, i, float(t), np.array([1.0]), False, 1e15,
                                    None, None, 0) for i, t in enumerate(times)]
            slope, _, stderr = sl.estimate_kramers_slope(ExitStats.from_records(recs))
            if abs(slope - 2 * H) <= q * stderr:
                covered += 1
        assert covered >= 85


class TestExitLocation:
    def test_all_at_point(self):
        recs = synthetic_records(0.5, [0.5], n=30)
        assert sl.exit_location_mass(recs, lambda p: abs(p[0] - 1.0) < 1e-9) == 1.0

    def test_disjoint_region(self):
        recs = synthetic_records(0.5, [0.5], n=30)
        assert sl.exit_location_mass(recs, lambda p: p[0] < 0) == 0.0

    def test_half_half(self):
        recs = synthetic_records(0.5, [0.5], n=30)
        for i, r in enumerate(recs):
            if i % 2:
                r.exit_point = np.array([-1.0])
        assert sl.exit_location_mass(recs, lambda p: p[0] > 0) == 0.5

    def test_all_censored_rejected(self):
        recs = [ExitRecord(0.5, i, None, None, True, 1e12, None, None, 0) for i in range(5)]
        with pytest.raises(ValueError):
            sl.exit_location_mass(recs, lambda p: True)


class TestTraceExcursions:
    def test_enter_and_stay(self):
        dt = 0.1
        ts = np.arange(0, 100) * dt
        xs = np.maximum(2.0 - ts, 0.0)[:, None]  # reaches 0 at t=2, stays
        trace = sl.trace_excursions(Path(dt, xs), [], a=0.0, rho=0.2, eps=0.5, t_st=0.0)
        assert trace.tau_list and trace.tau_list[0] == pytest.approx(1.8, abs=dt)
        assert not trace.theta_list
        assert trace.gamma is None

    def test_oscillation_interleaves(self):
        dt = 0.01
        ts = np.arange(0, 4000) * dt
        xs = (0.4 * np.sin(ts))[:, None]  # swings through both thresholds
        trace = sl.trace_excursions(Path(dt, xs), [], a=0.0, rho=0.1, eps=0.5, t_st=0.0)
        assert len(trace.tau_list) > 1 and len(trace.theta_list) >= 1
        seq = []
        for tau, th in zip(trace.tau_list, trace.theta_list):
            seq += [tau, th]
        assert all(a <= b for a, b in zip(seq, seq[1:]))
        assert trace.T_in_total + trace.T_out_total <= ts[-1] - trace.tau_list[0] + 1e-9

    def test_gamma_from_constructed_snapshots(self):
        dt = 0.01
        xs = np.zeros((1000, 1))
        snaps = [(t, 0.05 if t < 7.0 else 0.3) for t in np.arange(0, 10, 0.5)]
        trace = sl.trace_excursions(Path(dt, xs), snaps, a=0.0, rho=0.1, eps=0.5, t_st=0.0)
        assert trace.gamma == pytest.approx(7.0, abs=0.5)

    def test_interleaving_on_simulated_paths(self):
        ou = preset("ou")
        for seed in range(6):
            rec, path, mu = sl.simulate_sid(
                sl.dynamics.make_init_point(0.0), ou, sl.Interval(-1, 1),
                sigma=0.6, dt=1e-3, horizon=500.0, seed=seed)
            trace = sl.trace_excursions(path, [], a=0.0, rho=0.1, eps=0.5,
                                        t_st=0.0, exit_time=rec.exit_time)
            events = []
            for tau, th in zip(trace.tau_list, trace.theta_list):
                events += [tau, th]
            assert all(a <= b for a, b in zip(events, events[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            sl.trace_excursions(Path(0.1, np.zeros((10, 1))), [], 0.0, -1.0, 0.5, 0.0)


class TestBVP:
    def test_brownian_closed_form(self):
        flat = Landscape(dim=1,
                         v=lambda p: np.zeros(p.shape[0]),
                         grad_v=lambda p: np.zeros_like(p),
                         f=lambda p: np.zeros(p.shape[0]),
                         grad_f=lambda p: np.zeros_like(p),
                         interaction_zero=True)
        res = sl.bvp_mean_exit_1d(flat, (-1, 1), 1.0, grid_n=128)
        xs = np.linspace(-1, 1, 11)
        for x in xs:
            assert res.u_at(x) == pytest.approx((1 - x * x), abs=1e-4)

    @staticmethod
    def quadrature_mean_exit(landscape, lo, hi, sigma, x0):
        # classical two-sided exit formula via direct quadrature
        def p(x):
            return math.exp(-2.0 * float(landscape.v(np.array([[x]]))[0]) / sigma ** 2)

        def inv_p(x):
            return 1.0 / p(x)

        def P(x):
            return sint.quad(p, lo, x, limit=200)[0]

        num = sint.quad(lambda y: P(y) * inv_p(y), lo, hi, limit=200)[0]
        den = sint.quad(inv_p, lo, hi, limit=200)[0]
        c = (2.0 / sigma ** 2) * num / den
        val = sint.quad(lambda y: (c - (2.0 / sigma ** 2) * P(y)) * inv_p(y),
                        lo, x0, limit=200)[0]
        return val

    def test_ou_matches_quadrature(self):
        ou = preset("ou")
        res = sl.bvp_mean_exit_1d(ou, (-1, 1), 1.0, grid_n=512)
        ref = self.quadrature_mean_exit(ou, -1.0, 1.0, 1.0, 0.0)
        assert abs(res.u_at(0.0) - ref) < 1e-3

    def test_second_order_convergence(self):
        ou = preset("ou")
        ref = self.quadrature_mean_exit(ou, -1.0, 1.0, 0.8, 0.0)
        errs = [abs(sl.bvp_mean_exit_1d(ou, (-1, 1), 0.8, grid_n=n).u_at(0.0) - ref)
                for n in (128, 256)]
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.2)

    def test_interaction_rejected(self):
        with pytest.raises(ValueError):
            sl.bvp_mean_exit_1d(preset("quad-attract(1)"), (-1, 1), 1.0)

    def test_grid_floor(self):
        with pytest.raises(ValueError):
            sl.bvp_mean_exit_1d(preset("ou"), (-1, 1), 1.0, grid_n=32)


def test_config_round_trip_and_hash():
    cfg = small_config()
    doc = json.loads(json.dumps(cfg.to_dict()))
    back = ExperimentConfig.from_dict(doc)
    assert back.hash() == cfg.hash()
    assert back.sigma_grid == cfg.sigma_grid
