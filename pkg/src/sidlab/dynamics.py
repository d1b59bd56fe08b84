"""Time integrators for the self-interacting dynamics.

The stochastic system moves by explicit Euler-Maruyama,
``x' = x - (grad V(x) + grad F * mu_t(x)) dt + sigma sqrt(dt) xi``,
with the occupation measure accumulated by left-Riemann sampling of the
trajectory (each step contributes the pre-step state with weight dt).

Batches of trajectories advance in lockstep; every trajectory owns a
Philox noise stream keyed by its seed tuple, so results are bit-identical
regardless of how a campaign is chunked across workers.  Landscapes with
zero or linear interaction gradients use exact running-moment drift
(algebraically equal to the atom sum); everything else sums over the
thinned atom store.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .landscape import Landscape
from .measures import DEFAULT_ATOM_CAP, ExtendedInit, OccupationMeasure

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

__all__ = [
    "Path",
    "ExitRecord",
    "step_sid",
    "simulate_sid",
    "integrate_deterministic",
    "integrate_effective_flow",
    "find_attractor",
    "suggest_dt",
]

_RNG_CHUNK = 8192


@dataclass
class Path:
    """Uniformly gridded trajectory; ``points`` has shape (n, d)."""

    dt: float
    points: np.ndarray
    start_time_offset: float = 0.0

    def times(self) -> np.ndarray:
        return self.start_time_offset + self.dt * np.arange(self.points.shape[0])

    @property
    def duration(self) -> float:
        return self.dt * (self.points.shape[0] - 1)


@dataclass
class ExitRecord:
    """Outcome of one trajectory against an exit domain."""

    sigma: float
    seed: int
    exit_time: Optional[float]
    exit_point: Optional[np.ndarray]
    censored: bool
    horizon: float
    gamma_before_exit: Optional[bool]
    gamma_time: Optional[float]
    steps: int


def suggest_dt(landscape: Landscape, fallback: float = 1e-3) -> float:
    """Step-size guidance dt <= 0.01 / max(Lip_gradV + Lip_gradF, 1)."""
    lv = landscape.lip_grad_v
    lf = landscape.lip_grad_f
    if lv is None or lf is None:
        return fallback
    return 0.01 / max(lv + lf, 1.0)


def step_sid(x, mu: OccupationMeasure, landscape: Landscape, sigma: float,
             dt: float, xi) -> np.ndarray:
    """One Euler-Maruyama step of the self-interacting diffusion."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    drift = landscape.grad_v(x[None, :])[0] + mu.interaction_drift(landscape, x)
    return x - drift * dt + sigma * math.sqrt(dt) * xi


class _Interaction:
    """Per-batch drift strategy for the occupation-measure convolution."""

    def __init__(self, landscape: Landscape, init: ExtendedInit, batch: int,
                 cap: int, keep_atoms: bool):
        self.landscape = landscape
        self.init = init
        self.batch = batch
        self.cap = cap
        d = init.dim
        self.d = d
        self.frozen = math.isinf(init.t0)
        self.zero = landscape.interaction_zero
        self.beta = landscape.interaction_linear_coeff
        self.linear = (not self.zero) and (self.beta is not None) and not self.frozen
        self.generic = not (self.zero or self.linear or self.frozen)
        # atom storage is needed for generic drift, and for callers that want
        # the final measure back
        self.store_atoms = self.generic or keep_atoms
        if self.store_atoms:
            self.atom_pts = np.empty((batch, cap, d))
            self.atom_w = np.empty(cap)
            self.n_atoms = 0
        if self.linear:
            # running integral of the path, plus the prior block's first moment
            self.s1 = np.zeros((batch, d))
            if init.t0 > 0 and init.mu0_points.size:
                self.m0 = init.mu0_weights @ init.mu0_points
            else:
                self.m0 = np.zeros(d)

    def conv(self, x: np.ndarray, t: float) -> np.ndarray:
        """grad F * mu_t evaluated at the batch positions (pre-push state)."""
        if self.zero:
            return 0.0
        ls = self.landscape
        if self.frozen:
            diffs = x[:, None, :] - self.init.mu0_points[None, :, :]
            g = ls.grad_f(diffs.reshape(-1, self.d)).reshape(self.batch, -1, self.d)
            return np.einsum("bpd,p->bd", g, self.init.mu0_weights)
        t0 = self.init.t0
        total = t0 + t
        if total <= 0.0:
            return 0.0  # t0 = 0 before the first push: time-average limit is zero
        if self.linear:
            mean = (t0 * self.m0 + self.s1) / total
            return self.beta * (x - mean)
        acc = np.zeros((self.batch, self.d))
        if t0 > 0 and self.init.mu0_points.size:
            diffs = x[:, None, :] - self.init.mu0_points[None, :, :]
            g = ls.grad_f(diffs.reshape(-1, self.d)).reshape(self.batch, -1, self.d)
            acc += t0 * np.einsum("bpd,p->bd", g, self.init.mu0_weights)
        if self.n_atoms:
            diffs = x[:, None, :] - self.atom_pts[:, : self.n_atoms, :]
            g = ls.grad_f(diffs.reshape(-1, self.d)).reshape(self.batch, -1, self.d)
            acc += np.einsum("bpd,p->bd", g, self.atom_w[: self.n_atoms])
        return acc / total

    def push(self, x: np.ndarray, dt: float):
        if self.frozen:
            return
        if self.linear:
            self.s1 += x * dt
        if self.store_atoms:
            if self.n_atoms == self.cap:
                self._merge()
            self.atom_pts[:, self.n_atoms, :] = x
            self.atom_w[self.n_atoms] = dt
            self.n_atoms += 1

    def _merge(self):
        n = self.n_atoms
        m = n // 2
        wp = self.atom_w[0:2 * m:2]
        wq = self.atom_w[1:2 * m:2]
        ws = wp + wq
        num = (self.atom_pts[:, 0:2 * m:2, :] * wp[None, :, None]
               + self.atom_pts[:, 1:2 * m:2, :] * wq[None, :, None])
        self.atom_pts[:, :m, :] = num / ws[None, :, None]
        self.atom_w[:m] = ws
        if n % 2:
            self.atom_pts[:, m, :] = self.atom_pts[:, n - 1, :]
            self.atom_w[m] = self.atom_w[n - 1]
            m += 1
        self.n_atoms = m

    def measure_for(self, row: int, elapsed: float) -> OccupationMeasure:
        """Materialize the row's occupation measure from the engines state."""
        mu = self.init.measure(cap=self.cap)
        if self.store_atoms and not self.frozen:
            mu._pts[: self.n_atoms] = self.atom_pts[row, : self.n_atoms]
            mu._dtw[: self.n_atoms] = self.atom_w[: self.n_atoms]
            mu._n = self.n_atoms
        mu.elapsed = elapsed
        return mu


@dataclass
class _GammaSpec:
    """Occupation-stabilization watch: first time W2(mu_t, delta_a) > threshold."""

    a: np.ndarray
    threshold: float
    t_st: float


def _euler_1d_chunk_py(x, s, noise, dt, sq, v_dw, v_param, beta, use_linear,
                       t0, t0m0, s1, lo, hi, use_gamma, a, acc2, thr2, t_st,
                       snap_every, gamma_t):
    """Scalar 1d stepping kernel; arithmetic mirrors the vectorized engine
    operation for operation so results agree bit for bit."""
    status = 0
    lam_out = 0.0
    b_out = 0.0
    for k in range(noise.shape[0]):
        if v_dw:
            xx = x * x
            gv = xx * x - x
        else:
            gv = v_param * x
        if use_linear:
            total = t0 + s * dt
            if total > 0.0:
                conv = beta * (x - (t0m0 + s1) / total)
            else:
                conv = 0.0
        else:
            conv = 0.0
        drift = gv + conv
        x_new = (x - dt * drift) + sq * noise[k]
        if not math.isfinite(x_new):
            status = 2
            break
        if use_linear:
            s1 = s1 + x * dt
        if use_gamma:
            d_a = x - a
            acc2 = acc2 + (d_a * d_a) * dt
        if not (lo < x_new < hi):
            lam_out = 2.0
            u = x_new - x
            if lo > -math.inf and u != 0.0:
                lam = (lo - x) / u
                if 0.0 <= lam <= 1.0 and lam < lam_out:
                    lam_out = lam
                    b_out = lo
            if hi < math.inf and u != 0.0:
                lam = (hi - x) / u
                if 0.0 <= lam <= 1.0 and lam < lam_out:
                    lam_out = lam
                    b_out = hi
            if lam_out > 1.0:
                lam_out = 1.0
                b_out = x_new
            x = b_out
            s = s + 1
            status = 1
            break
        x = x_new
        s = s + 1
        if use_gamma and s % snap_every == 0 and math.isnan(gamma_t):
            t_now = s * dt
            w2sq = acc2 / (t0 + t_now)
            if t_now >= t_st and w2sq > thr2:
                gamma_t = t_now
    return x, s, s1, acc2, gamma_t, status, lam_out, b_out


_euler_1d_chunk = (njit(cache=True)(_euler_1d_chunk_py) if _HAVE_NUMBA
                   else _euler_1d_chunk_py)

_KERNEL_CHUNK = 32768


def _kernel_eligible(landscape, domain, init, keep_atoms, path_every, gamma):
    """The jitted scalar path covers 1d interval (or unbounded) domains with
    zero or linear interaction and no path/measure collection."""
    if not _HAVE_NUMBA or keep_atoms or path_every:
        return False
    if init.dim != 1 or landscape.info.get("grad_v_form") is None:
        return False
    from .geometry import Interval  # local to avoid an import cycle
    if domain is not None and not isinstance(domain, Interval):
        return False
    if landscape.interaction_zero:
        return True
    if math.isinf(init.t0):
        return False
    return landscape.interaction_linear_coeff is not None


def _run_kernel_1d(landscape, init, sigma, dt, horizon, seed_keys, domain,
                   gamma, snapshot_every):
    form = landscape.info["grad_v_form"]
    v_dw = form[0] == "double_well"
    v_param = float(form[1]) if not v_dw else 0.0
    use_linear = (not landscape.interaction_zero
                  and landscape.interaction_linear_coeff is not None)
    beta = float(landscape.interaction_linear_coeff or 0.0)
    t0 = init.t0
    m0 = float(init.mu0_weights @ init.mu0_points[:, 0]) if init.mu0_points.size else 0.0
    t0m0 = t0 * m0
    lo, hi = (-math.inf, math.inf) if domain is None else (domain.lo, domain.hi)
    use_gamma = gamma is not None
    if use_gamma:
        a = float(gamma.a[0])
        thr2 = gamma.threshold ** 2
        t_st = gamma.t_st
        acc2_0 = 0.0
        if t0 > 0 and init.mu0_points.size:
            acc2_0 = t0 * float(np.sum(init.mu0_weights
                                       * np.sum((init.mu0_points - gamma.a) ** 2, axis=1)))
    else:
        a, thr2, t_st, acc2_0 = 0.0, 0.0, 0.0, 0.0

    n_total = int(math.ceil(horizon / dt))
    sq = sigma * math.sqrt(dt)
    x0 = float(init.x0[0])
    if domain is not None and not (lo < x0 < hi):
        raise ValueError("x0 lies outside the exit domain")

    records = []
    for key in seed_keys:
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
        x, s, s1, acc2, gamma_t = x0, 0, 0.0, acc2_0, math.nan
        status, lam, b = 0, 0.0, 0.0
        while s < n_total:
            k = min(_KERNEL_CHUNK, n_total - s)
            noise = gen.standard_normal(k)
            x, s, s1, acc2, gamma_t, status, lam, b = _euler_1d_chunk(
                x, s, noise, dt, sq, v_dw, v_param, beta, use_linear,
                t0, t0m0, s1, lo, hi, use_gamma, a, acc2, thr2, t_st,
                snapshot_every, gamma_t)
            if status == 1:
                break
            if status == 2:
                raise RuntimeError(
                    f"non-finite state around step {s}; dt is likely too large "
                    "for the landscape stiffness")
        censored = status != 1
        exit_t = None if censored else (s - 1 + lam) * dt
        g_time = None if math.isnan(gamma_t) else float(gamma_t)
        if use_gamma:
            cutoff = horizon if censored else exit_t
            g_before = bool(g_time is not None and g_time <= cutoff)
        else:
            g_before = None
        records.append(ExitRecord(
            sigma=sigma, seed=key[-1],
            exit_time=exit_t,
            exit_point=None if censored else np.array([b]),
            censored=censored, horizon=horizon,
            gamma_before_exit=g_before, gamma_time=g_time, steps=s))
    return records


def run_batch(landscape: Landscape, init: ExtendedInit, sigma: float, dt: float,
              horizon: float, seed_keys, domain=None, *, gamma: Optional[_GammaSpec] = None,
              snapshot_every: int = 100, cap: int = DEFAULT_ATOM_CAP,
              keep_atoms: bool = False, path_every: int = 0):
    """Advance a batch of trajectories in lockstep until exit or horizon.

    ``seed_keys`` is a list of integer tuples; trajectory i draws noise from
    ``Philox(SeedSequence(seed_keys[i]))``.  Returns (records, paths, inter)
    where ``paths`` is None unless ``path_every > 0`` and ``inter`` exposes
    the interaction state for measure reconstruction.
    """
    if dt <= 0 or horizon <= 0:
        raise ValueError("dt and horizon must be positive")
    if _kernel_eligible(landscape, domain, init, keep_atoms, path_every, gamma):
        records = _run_kernel_1d(landscape, init, sigma, dt, horizon, seed_keys,
                                 domain, gamma, snapshot_every)
        return records, None, None
    B = len(seed_keys)
    d = init.dim
    x0 = init.x0
    if domain is not None and not domain.contains(x0):
        raise ValueError("x0 lies outside the exit domain")

    gens = [np.random.Generator(np.random.Philox(np.random.SeedSequence(k)))
            for k in seed_keys]
    chunk = max(256, min(_RNG_CHUNK, (1 << 22) // max(B * d, 1)))
    noise = np.empty((B, chunk, d))

    x = np.tile(x0, (B, 1))
    active = np.ones(B, dtype=bool)
    exit_time = np.full(B, np.nan)
    exit_steps = np.zeros(B, dtype=np.int64)
    exit_points = [None] * B

    inter = _Interaction(landscape, init, B, cap, keep_atoms)

    gamma_time = np.full(B, np.nan)
    if gamma is not None:
        acc2 = np.zeros(B)
        if init.t0 > 0 and not math.isinf(init.t0) and init.mu0_points.size:
            w20 = float(np.sum(init.mu0_weights
                               * np.sum((init.mu0_points - gamma.a) ** 2, axis=1)))
            acc2 += init.t0 * w20

    paths = [[] for _ in range(B)] if path_every > 0 else None

    sq = sigma * math.sqrt(dt)
    n_steps = int(math.ceil(horizon / dt))
    s = 0
    while s < n_steps and active.any():
        k = s % chunk
        if k == 0:
            for i, g in enumerate(gens):
                noise[i] = g.standard_normal((chunk, d))
        if paths is not None and s % path_every == 0:
            for i in np.nonzero(active)[0]:
                paths[i].append(x[i].copy())

        t = s * dt
        conv = inter.conv(x, t)
        drift = landscape.grad_v(x) + conv
        x_new = np.where(active[:, None], x - dt * drift + sq * noise[:, k, :], x)
        if not np.all(np.isfinite(x_new[active])):
            bad = np.nonzero(active & ~np.all(np.isfinite(x_new), axis=1))[0]
            raise RuntimeError(
                f"non-finite state at step {s} (t={t:.4g}) for trajectories {bad.tolist()}; "
                "dt is likely too large for the landscape stiffness")

        inter.push(x, dt)
        if gamma is not None:
            acc2 += np.where(active, np.sum((x - gamma.a) ** 2, axis=1) * dt, 0.0)

        if domain is not None:
            inside = domain.contains_batch(x_new)
            newly = active & ~inside
            if newly.any():
                for i in np.nonzero(newly)[0]:
                    hit = domain.crossing(x[i], x_new[i])
                    lam, z = hit if hit is not None else (1.0, x_new[i].copy())
                    exit_time[i] = (s + lam) * dt
                    exit_points[i] = z
                    exit_steps[i] = s + 1
                    x_new[i] = z
                active &= inside

        x = x_new
        s += 1

        if gamma is not None and s % snapshot_every == 0:
            t_now = s * dt
            if math.isinf(init.t0):
                w2sq = np.full(B, float(np.sum(init.mu0_weights
                               * np.sum((init.mu0_points - gamma.a) ** 2, axis=1))))
            else:
                w2sq = acc2 / (init.t0 + t_now)
            trig = active & np.isnan(gamma_time) & (t_now >= gamma.t_st) \
                & (w2sq > gamma.threshold ** 2)
            gamma_time[trig] = t_now

    exit_steps[active] = s
    records = []
    for i in range(B):
        censored = bool(active[i])
        g_time = None if math.isnan(gamma_time[i]) else float(gamma_time[i])
        if gamma is None:
            g_before = None
        else:
            cutoff = horizon if censored else exit_time[i]
            g_before = bool(g_time is not None and g_time <= cutoff)
        records.append(ExitRecord(
            sigma=sigma,
            seed=seed_keys[i][-1],
            exit_time=None if censored else float(exit_time[i]),
            exit_point=None if censored else exit_points[i],
            censored=censored,
            horizon=horizon,
            gamma_before_exit=g_before,
            gamma_time=g_time,
            steps=int(exit_steps[i]),
        ))

    out_paths = None
    if paths is not None:
        out_paths = [Path(dt * path_every, np.array(p)) for p in paths]
    return records, out_paths, inter


def simulate_sid(init: ExtendedInit, landscape: Landscape, domain=None,
                 sigma: float = 0.0, dt: float = 1e-3, horizon: float = 10.0,
                 seed: int = 0, *, gamma_params=None, snapshot_every: int = 100,
                 cap: int = DEFAULT_ATOM_CAP, path_every: int = 1):
    """Simulate one trajectory; returns (ExitRecord, Path, OccupationMeasure).

    ``gamma_params``, when given, is a dict with keys ``a``, ``threshold``
    and ``t_st`` enabling the occupation-stabilization watch.  The same seed
    always reproduces the same output bit for bit.
    """
    gspec = None
    if gamma_params is not None:
        gspec = _GammaSpec(np.atleast_1d(np.asarray(gamma_params["a"], dtype=float)),
                           float(gamma_params["threshold"]), float(gamma_params["t_st"]))
    records, paths, inter = run_batch(
        landscape, init, sigma, dt, horizon, [(int(seed),)], domain,
        gamma=gspec, snapshot_every=snapshot_every, cap=cap,
        keep_atoms=True, path_every=max(1, path_every))
    rec = records[0]
    path = paths[0]
    elapsed = rec.steps * dt
    mu = inter.measure_for(0, elapsed)
    return rec, path, mu


def integrate_deterministic(init: ExtendedInit, landscape: Landscape,
                            dt: float, T: float) -> Path:
    """Euler integration of the noiseless dynamics with running occupation drift.

    Uses the same left-Riemann occupation bookkeeping as the stochastic
    stepper, so evaluating the action functional on the result gives zero up
    to float roundoff.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = int(round(T / dt))
    mu = init.measure()
    x = init.x0.copy()
    pts = np.empty((n + 1, init.dim))
    pts[0] = x
    for k in range(n):
        drift = landscape.grad_v(x[None, :])[0] + mu.interaction_drift(landscape, x)
        x_next = x - dt * drift
        if not np.all(np.isfinite(x_next)):
            raise RuntimeError(f"non-finite state at t={k * dt:.4g}; reduce dt")
        mu.push_sample(x, dt)
        x = x_next
        pts[k + 1] = x
    return Path(dt, pts)


def integrate_effective_flow(x0, a, landscape: Landscape, dt: float, T: float) -> Path:
    """Euler integration of the frozen-measure flow phi' = -grad V - grad F(. - a)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    n = int(round(T / dt))
    pts = np.empty((n + 1, x.size))
    pts[0] = x
    for k in range(n):
        g = landscape.grad_v(x[None, :])[0] + landscape.grad_f((x - a)[None, :])[0]
        x = x - dt * g
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"non-finite state at t={k * dt:.4g}; reduce dt")
        pts[k + 1] = x
    return Path(dt, pts)


def find_attractor(x0, landscape: Landscape, dt: float = 1e-2, tol: float = 1e-6,
                   T_max: float = 500.0):
    """Locate the attractor of the noiseless dynamics started at x0.

    The self-interacting flow is integrated for a burn-in window to select
    the basin; because the occupation-measure average converges only
    algebraically, the estimate is then polished with the frozen effective
    flow (interaction pinned at the current point), which contracts
    exponentially onto the stationary point.  The result satisfies
    |grad V(a) + grad F(0)| < tol; failure to converge by ``T_max`` raises.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    init = make_init_point(x0)
    mu = init.measure()
    x = init.x0.copy()
    burn_steps = int(round(min(T_max, 50.0) / dt))
    for _ in range(burn_steps):
        drift = landscape.grad_v(x[None, :])[0] + mu.interaction_drift(landscape, x)
        if float(np.linalg.norm(drift)) < tol:
            break
        mu.push_sample(x, dt)
        x = x - dt * drift
        if not np.all(np.isfinite(x)):
            raise RuntimeError("blow-up during attractor search; reduce dt")

    remaining = int(round(T_max / dt))
    grad_f_at_zero = landscape.grad_f(np.zeros((1, x.size)))[0]
    for _ in range(remaining):
        g = landscape.grad_v(x[None, :])[0] + grad_f_at_zero
        if float(np.linalg.norm(g)) < tol:
            return x
        x = x - dt * g
        if not np.all(np.isfinite(x)):
            raise RuntimeError("blow-up during attractor search; reduce dt")
    raise RuntimeError(f"no convergence within T_max={T_max}")


def make_init_point(x0) -> ExtendedInit:
    """Plain initial condition (t0=0, empty prior, x0): the original dynamics."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return ExtendedInit(0.0, np.empty((0, x0.size)), np.empty(0), x0)
