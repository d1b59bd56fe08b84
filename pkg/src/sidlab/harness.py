"""Experiment campaigns: exit-time sampling, Kramers statistics, excursion
instrumentation, the 1d mean-exit oracle, configuration and persistence.

A campaign fans out over (sigma, trajectory) pairs with per-trajectory noise
streams keyed by (master_seed, sigma index, trajectory index); aggregation
sorts records deterministically, so reruns are bit-identical regardless of
worker count.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from . import dynamics, geometry
from .action import compute_H
from .dynamics import ExitRecord, Path, _GammaSpec, run_batch
from .landscape import Landscape, preset
from .measures import DEFAULT_ATOM_CAP, ExtendedInit, make_init

__all__ = [
    "ExperimentConfig",
    "ExitStats",
    "CampaignResult",
    "ExcursionTrace",
    "run_exit_campaign",
    "kramers_window_fraction",
    "estimate_kramers_slope",
    "exit_location_mass",
    "trace_excursions",
    "bvp_mean_exit_1d",
    "BVPResult",
    "write_records_csv",
    "read_records_csv",
    "path_to_csv",
]


@dataclass
class ExperimentConfig:
    """Declarative description of an exit-time campaign (JSON serializable)."""

    landscape: dict
    domain: Optional[dict]
    sigma_grid: list
    trajectories_per_sigma: int
    x0: object = 0.0
    t0: float = 0.0
    mu0: Optional[list] = None  # [[point, weight], ...]; default: delta at x0
    dt: float = 1e-3
    horizon_cap: float = 1e6
    master_seed: int = 0
    rho: Optional[float] = None
    eps: float = 0.5
    t_st: Optional[float] = None
    attractor: Optional[object] = None
    snapshot_every: int = 100
    measure_cap: int = DEFAULT_ATOM_CAP
    n_workers: int = 1
    output_dir: Optional[str] = None

    def __post_init__(self):
        if not self.sigma_grid or any(s <= 0 for s in self.sigma_grid):
            raise ValueError("sigma_grid must be nonempty and strictly positive")
        if self.trajectories_per_sigma < 1:
            raise ValueError("trajectories_per_sigma must be >= 1")
        if self.dt <= 0 or self.horizon_cap <= 0:
            raise ValueError("dt and horizon_cap must be positive")

    def build(self):
        ls = preset(self.landscape["name"], **self.landscape.get("params", {}))
        dom = geometry.domain_from_spec(self.domain) if self.domain else None
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        mu0 = self.mu0 if self.mu0 is not None else ([[x0.tolist(), 1.0]] if self.t0 > 0 else [])
        t0 = math.inf if self.t0 == "inf" else float(self.t0)
        init = make_init(t0, [(np.asarray(p), w) for p, w in mu0], x0)
        return ls, dom, init

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return cls(**doc)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class SigmaStats:
    sigma: float
    n: int
    n_censored: int
    mean_exit: Optional[float]
    median_exit: Optional[float]
    log_mean: Optional[float]
    gamma_fraction: Optional[float]
    exit_points: np.ndarray

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma, "n": self.n, "n_censored": self.n_censored,
            "mean_exit": self.mean_exit, "median_exit": self.median_exit,
            "log_mean": self.log_mean, "gamma_fraction": self.gamma_fraction,
            "exit_points": self.exit_points.tolist(),
        }


@dataclass
class ExitStats:
    per_sigma: dict

    @classmethod
    def from_records(cls, records) -> "ExitStats":
        by_sigma = {}
        for r in records:
            by_sigma.setdefault(r.sigma, []).append(r)
        out = {}
        for s in sorted(by_sigma):
            rs = sorted(by_sigma[s], key=lambda r: r.seed)
            times = np.array([r.exit_time for r in rs if not r.censored])
            pts = np.array([r.exit_point for r in rs if not r.censored])
            gammas = [r.gamma_before_exit for r in rs if r.gamma_before_exit is not None]
            out[s] = SigmaStats(
                sigma=s, n=len(rs),
                n_censored=sum(r.censored for r in rs),
                mean_exit=float(times.mean()) if times.size else None,
                median_exit=float(np.median(times)) if times.size else None,
                log_mean=float(np.log(times.mean())) if times.size else None,
                gamma_fraction=(sum(gammas) / len(gammas)) if gammas else None,
                exit_points=pts if pts.size else np.empty((0, 1)),
            )
        return cls(out)

    def to_dict(self) -> dict:
        return {str(s): st.to_dict() for s, st in self.per_sigma.items()}


@dataclass
class CampaignResult:
    config: ExperimentConfig
    records: list
    stats: ExitStats
    summary: dict


def _default_t_st(landscape, init, a, rho, dt):
    """Stabilization time: when the noiseless path enters B_{rho/2}(a), tripled."""
    x = init.x0.copy()
    mu = init.measure()
    t, t_cap = 0.0, 1e4
    while float(np.linalg.norm(x - a)) > rho / 2:
        drift = landscape.grad_v(x[None, :])[0] + mu.interaction_drift(landscape, x)
        mu.push_sample(x, dt)
        x = x - dt * drift
        t += dt
        if t > t_cap:
            raise RuntimeError("noiseless path never stabilizes near the attractor")
    return 3.0 * t


def run_exit_campaign(config: ExperimentConfig) -> CampaignResult:
    """Run the configured campaign and aggregate per-sigma exit statistics.

    Records are persisted (CSV + JSON summary) when the config names an
    output directory.
    """
    landscape, domain, init = config.build()
    if domain is None:
        raise ValueError("campaigns need an exit domain")
    if config.dt > dynamics.suggest_dt(landscape) * (1 + 1e-9):
        warnings.warn(f"dt={config.dt:g} exceeds guidance "
                      f"{dynamics.suggest_dt(landscape):g} for this landscape")

    a = (np.atleast_1d(np.asarray(config.attractor, dtype=float))
         if config.attractor is not None
         else dynamics.find_attractor(init.x0, landscape, dt=min(1e-2, config.dt * 10),
                                      tol=1e-8))
    inradius = domain.inradius()
    rho = config.rho if config.rho is not None else 0.1 * inradius
    if not math.isfinite(rho):
        raise ValueError("rho must be given explicitly for unbounded domains")
    t_st = (config.t_st if config.t_st is not None
            else _default_t_st(landscape, init, a, rho, config.dt))
    gamma_spec = _GammaSpec(a=a, threshold=(1 + config.eps) * rho, t_st=t_st)

    h_barrier, _ = compute_H(landscape, domain, a)

    all_records = []
    for si, sigma in enumerate(config.sigma_grid):
        if math.isfinite(inradius) and sigma * math.sqrt(config.dt) > 0.1 * inradius:
            warnings.warn(f"noise step sigma*sqrt(dt)={sigma * math.sqrt(config.dt):.3g} "
                          f"exceeds 10% of the domain inradius")
        horizon = min(config.horizon_cap, math.exp(2 * (h_barrier + 1) / sigma ** 2))
        keys = [(config.master_seed, si, ti)
                for ti in range(config.trajectories_per_sigma)]
        chunks = [c for c in np.array_split(np.arange(len(keys)), max(config.n_workers, 1))
                  if c.size]

        def run_chunk(idx):
            sub = [keys[i] for i in idx]
            recs, _, _ = run_batch(
                landscape, init, sigma, config.dt, horizon, sub, domain,
                gamma=gamma_spec, snapshot_every=config.snapshot_every,
                cap=config.measure_cap)
            return recs

        if config.n_workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=config.n_workers) as pool:
                for recs in pool.map(run_chunk, chunks):
                    all_records.extend(recs)
        else:
            for c in chunks:
                all_records.extend(run_chunk(c))

    all_records.sort(key=lambda r: (r.sigma, r.seed))
    stats = ExitStats.from_records(all_records)
    summary = {
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "attractor": a.tolist(),
        "rho": rho,
        "eps": config.eps,
        "t_st": t_st,
        "barrier_H": h_barrier,
        "stats": stats.to_dict(),
    }
    if config.output_dir:
        out = FsPath(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_records_csv(all_records, out / "records.csv", init.dim)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return CampaignResult(config, all_records, stats, summary)


def kramers_window_fraction(records, H: float, delta: float) -> dict:
    """Per-sigma empirical probability of exp(2(H-d)/s^2) < tau < exp(2(H+d)/s^2).

    Inequalities are strict; censored records count as outside the window.
    """
    by_sigma = {}
    for r in records:
        by_sigma.setdefault(r.sigma, []).append(r)
    if not by_sigma:
        raise ValueError("no records")
    out = {}
    for s, rs in by_sigma.items():
        lo = math.exp(2 * (H - delta) / s ** 2)
        hi = math.exp(2 * (H + delta) / s ** 2)
        hits = sum(1 for r in rs
                   if not r.censored and lo < r.exit_time < hi)
        out[s] = hits / len(rs)
    return out


def estimate_kramers_slope(stats: ExitStats):
    """Least-squares fit of log(mean exit time) against 1/sigma^2.

    The slope estimates twice the barrier height.  Sigma levels whose
    records are all censored are dropped with a warning; levels with some
    censoring keep the mean over non-censored records (also warned, the
    mean is then biased low).  Returns (slope, intercept, stderr).
    """
    xs, ys = [], []
    for s, st in sorted(stats.per_sigma.items()):
        if st.mean_exit is None:
            warnings.warn(f"sigma={s}: all records censored; excluded from slope fit")
            continue
        if st.n_censored:
            warnings.warn(f"sigma={s}: {st.n_censored}/{st.n} censored records "
                          "excluded from the mean exit time")
        xs.append(1.0 / s ** 2)
        ys.append(math.log(st.mean_exit))
    if len(xs) < 2:
        raise ValueError("need at least two sigma levels with non-censored means")
    x = np.array(xs)
    y = np.array(ys)
    n = x.size
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    stderr = (math.sqrt(float(resid @ resid) / (n - 2) / sxx) if n > 2 else 0.0)
    return slope, intercept, stderr


def exit_location_mass(records, region: Callable) -> float:
    """Fraction of non-censored exits whose exit point satisfies the predicate."""
    pts = [r.exit_point for r in records if not r.censored]
    if not pts:
        raise ValueError("all records censored")
    return sum(bool(region(p)) for p in pts) / len(pts)


@dataclass
class ExcursionTrace:
    """Alternating hitting times of B_rho(a) and S_{(1+eps)rho}(a) plus the
    occupation-measure watch."""

    tau_list: list
    theta_list: list
    gamma: Optional[float]
    T_in_total: float
    T_out_total: float
    w2_trace: np.ndarray  # (k, 2): time, W2(mu_t, delta_a)


def trace_excursions(path: Path, snapshots, a, rho: float, eps: float,
                     t_st: float, exit_time: Optional[float] = None) -> ExcursionTrace:
    """Extract excursion stopping times from a discrete trajectory.

    ``snapshots`` is a sequence of (t, W2) pairs or (t, measure) pairs; the
    first snapshot time at or after ``t_st`` whose W2 exceeds (1+eps)*rho
    gives gamma (None when censored).  If ``exit_time`` is given, reaching
    it counts as hitting the boundary component of the stopping sets.
    """
    if rho <= 0 or eps <= 0:
        raise ValueError("rho and eps must be positive")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    ts = path.times()
    dist = np.linalg.norm(path.points - a, axis=1)

    taus, thetas = [], []
    waiting_for = "tau"
    for i, t in enumerate(ts):
        at_exit = exit_time is not None and t >= exit_time
        if waiting_for == "tau":
            if (t >= t_st and dist[i] <= rho) or at_exit:
                taus.append(min(t, exit_time) if at_exit else t)
                waiting_for = "theta"
                if at_exit:
                    break
        else:
            if dist[i] >= (1 + eps) * rho:
                thetas.append(t)
                waiting_for = "tau"
        if at_exit:
            break

    w2_rows = []
    for t, item in snapshots:
        w2 = item.w2_to_dirac(a) if hasattr(item, "w2_to_dirac") else float(item)
        w2_rows.append((float(t), w2))
    w2_trace = np.array(w2_rows) if w2_rows else np.empty((0, 2))
    gamma = None
    for t, w2 in w2_rows:
        if t >= t_st and w2 > (1 + eps) * rho:
            gamma = t
            break

    t_in = sum(th - ta for ta, th in zip(taus, thetas))
    t_out = sum(ta2 - th for th, ta2 in zip(thetas, taus[1:]))
    return ExcursionTrace(taus, thetas, gamma, t_in, t_out, w2_trace)


@dataclass
class BVPResult:
    xs: np.ndarray
    u: np.ndarray

    def u_at(self, x: float) -> float:
        return float(np.interp(x, self.xs, self.u))


def bvp_mean_exit_1d(landscape: Landscape, interval, sigma: float,
                     grid_n: int = 512) -> BVPResult:
    """Mean exit time of dX = -V'(X) dt + sigma dW from an interval, by
    second-order central finite differences on
    (sigma^2/2) u'' - V' u' = -1 with absorbing ends.

    Only valid without self-interaction (the landscape must have F = 0).
    """
    if landscape.dim != 1:
        raise ValueError("the mean-exit boundary value oracle is 1d only")
    if not landscape.interaction_zero:
        raise ValueError("oracle requires a landscape with zero interaction")
    if grid_n < 64:
        raise ValueError("grid_n must be >= 64")
    lo, hi = float(interval[0]), float(interval[1])
    xs = np.linspace(lo, hi, grid_n + 1)
    h = xs[1] - xs[0]
    inner = xs[1:-1]
    vp = landscape.grad_v(inner[:, None])[:, 0]
    half_s2 = 0.5 * sigma ** 2

    diag = np.full(grid_n - 1, -2.0 * half_s2 / h ** 2)
    upper = half_s2 / h ** 2 - vp / (2 * h)
    lower = half_s2 / h ** 2 + vp / (2 * h)
    ab = np.zeros((3, grid_n - 1))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    rhs = np.full(grid_n - 1, -1.0)
    try:
        u_inner = solve_banded((1, 1), ab, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise RuntimeError(f"singular mean-exit system: {exc}") from exc
    u = np.zeros(grid_n + 1)
    u[1:-1] = u_inner
    return BVPResult(xs, u)


def write_records_csv(records, file, dim: int):
    """Persist exit records; schema: sigma, seed, exit_time, censored,
    exit coordinates, gamma_before_exit, steps."""
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        coord_cols = [f"exit_x{k}" for k in range(dim)]
        w.writerow(["sigma", "seed", "exit_time", "censored", *coord_cols,
                    "gamma_before_exit", "steps"])
        for r in records:
            coords = (list(np.atleast_1d(r.exit_point)) if r.exit_point is not None
                      else [""] * dim)
            w.writerow([r.sigma, r.seed,
                        "" if r.exit_time is None else repr(r.exit_time),
                        int(r.censored), *[repr(float(c)) if c != "" else "" for c in coords],
                        "" if r.gamma_before_exit is None else int(r.gamma_before_exit),
                        r.steps])


def read_records_csv(file) -> list:
    out = []
    with open(file, newline="") as fh:
        rd = csv.DictReader(fh)
        coord_cols = [c for c in rd.fieldnames if c.startswith("exit_x")]
        for row in rd:
            censored = bool(int(row["censored"]))
            pt = (np.array([float(row[c]) for c in coord_cols])
                  if not censored else None)
            out.append(ExitRecord(
                sigma=float(row["sigma"]), seed=int(row["seed"]),
                exit_time=None if censored else float(row["exit_time"]),
                exit_point=pt, censored=censored, horizon=math.nan,
                gamma_before_exit=(None if row["gamma_before_exit"] == ""
                                   else bool(int(row["gamma_before_exit"]))),
                gamma_time=None, steps=int(row["steps"])))
    return out


def path_to_csv(path: Path, file):
    """Export a path as CSV rows (t, x0..x_{d-1})."""
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        d = path.points.shape[1]
        w.writerow(["t", *[f"x{k}" for k in range(d)]])
        for t, p in zip(path.times(), path.points):
            w.writerow([repr(float(t)), *[repr(float(c)) for c in p]])
