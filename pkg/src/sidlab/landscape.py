"""Confinement/interaction potential pairs and runnable assumption checkers.

A :class:`Landscape` bundles a confinement potential ``V`` and an interaction
potential ``F`` on R^d together with analytic gradients (and Hessians, used by
the path optimizer).  ``F`` is normalized at construction so that ``F(0) = 0``;
additive constants in ``F`` do not change the dynamics but would shift the
barrier height, so the normalization keeps it well defined.

All field callables are vectorized: values map ``(n, d) -> (n,)`` and
gradients/Hessians map ``(n, d) -> (n, d)`` / ``(n, d, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Landscape",
    "PRESETS",
    "preset",
    "potential_eval",
    "interaction_eval",
    "effective_potential",
    "estimate_lipschitz",
    "check_strong_attraction",
    "clamp_landscape",
]


@dataclass
class Landscape:
    """A confinement/interaction potential pair with gradient metadata.

    ``lip_grad_v``, ``lip_grad_f`` and ``bound_grad_f`` are the constants of
    the gradient-Lipschitz and gradient-boundedness properties when known
    analytically; ``flag_scope`` records for each constant whether it holds
    globally or only on a stated ball (``"global"`` or ``"ball:R"``).
    """

    dim: int
    v: Callable[[np.ndarray], np.ndarray]
    grad_v: Callable[[np.ndarray], np.ndarray]
    f: Callable[[np.ndarray], np.ndarray]
    grad_f: Callable[[np.ndarray], np.ndarray]
    hess_v: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess_f: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"
    lip_grad_v: Optional[float] = None
    lip_grad_f: Optional[float] = None
    bound_grad_f: Optional[float] = None
    interaction_zero: bool = False
    # beta such that grad F(u) = beta * u, when the interaction gradient is
    # exactly linear; enables O(1) moment-based drift in long campaigns.
    interaction_linear_coeff: Optional[float] = None
    confinement_at_infinity: bool = True  # recorded, not verified (sampling cannot check it)
    flag_scope: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        # Normalize F so F(0) = 0 exactly.
        z = np.zeros((1, self.dim))
        f0 = float(self.f(z)[0])
        if f0 != 0.0:
            raw = self.f
            self.f = lambda u, _raw=raw, _f0=f0: _raw(u) - _f0

    def point(self, x) -> np.ndarray:
        """Coerce scalar/sequence input to a (d,) float array."""
        p = np.atleast_1d(np.asarray(x, dtype=float))
        if p.shape != (self.dim,):
            raise ValueError(f"expected point in R^{self.dim}, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite point")
        return p


def _quad_v(points):
    return 0.5 * np.sum(points * points, axis=-1)


def _quad_grad(points):
    return np.array(points, copy=True)


def _quad_hess(points):
    n, d = points.shape
    return np.broadcast_to(np.eye(d), (n, d, d)).copy()


def _zero_scalar(points):
    return np.zeros(points.shape[0])


def _zero_vec(points):
    return np.zeros_like(points)


def _zero_hess(points):
    n, d = points.shape
    return np.zeros((n, d, d))


def _make_ou(dim=1):
    return Landscape(
        dim=dim,
        v=_quad_v, grad_v=_quad_grad, hess_v=_quad_hess,
        f=_zero_scalar, grad_f=_zero_vec, hess_f=_zero_hess,
        name="ou",
        lip_grad_v=1.0, lip_grad_f=0.0, bound_grad_f=0.0,
        interaction_zero=True, interaction_linear_coeff=0.0,
        flag_scope={"lip_grad_v": "global", "lip_grad_f": "global", "bound_grad_f": "global"},
        info={"grad_v_form": ("linear", 1.0)},
    )


def _make_quad_attract(beta=1.0, dim=1):
    beta = float(beta)

    def f(u):
        return 0.5 * beta * np.sum(u * u, axis=-1)

    def grad_f(u):
        return beta * u

    def hess_f(u):
        n, d = u.shape
        return beta * np.broadcast_to(np.eye(d), (n, d, d)).copy()

    return Landscape(
        dim=dim,
        v=_quad_v, grad_v=_quad_grad, hess_v=_quad_hess,
        f=f, grad_f=grad_f, hess_f=hess_f,
        name=f"quad-attract({beta:g})",
        lip_grad_v=1.0, lip_grad_f=beta, bound_grad_f=None,
        interaction_linear_coeff=beta,
        flag_scope={"lip_grad_v": "global", "lip_grad_f": "global",
                    "bound_grad_f": "unbounded (holds on any ball only)"},
        info={"grad_v_form": ("linear", 1.0)},
    )


def _make_dw():
    def v(points):
        x = points[..., 0]
        return 0.25 * (x * x - 1.0) ** 2

    def grad_v(points):
        x = points[..., 0]
        return (x ** 3 - x)[..., None]

    def hess_v(points):
        x = points[..., 0]
        return (3.0 * x * x - 1.0)[:, None, None]

    return Landscape(
        dim=1,
        v=v, grad_v=grad_v, hess_v=hess_v,
        f=_zero_scalar, grad_f=_zero_vec, hess_f=_zero_hess,
        name="dw",
        lip_grad_v=11.0, lip_grad_f=0.0, bound_grad_f=0.0,
        interaction_zero=True, interaction_linear_coeff=0.0,
        flag_scope={"lip_grad_v": "ball:2 (|V''| <= 11 on [-2,2]; grows like 3x^2)",
                    "lip_grad_f": "global", "bound_grad_f": "global"},
        info={"grad_v_form": ("double_well",)},
    )


def _make_gauss(gamma=1.0, sign=-1.0, dim=1):
    """Gaussian interaction on a quadratic confinement.

    sign=-1: attracting well F = gamma*(1 - exp(-|u|^2/2));
    sign=+1: repelling bump F = gamma*(exp(-|u|^2/2) - 1).
    """
    gamma = float(gamma)

    def f(u):
        e = np.exp(-0.5 * np.sum(u * u, axis=-1))
        return sign * gamma * e  # constant removed by normalization

    def grad_f(u):
        e = np.exp(-0.5 * np.sum(u * u, axis=-1))
        return -sign * gamma * u * e[..., None]

    def hess_f(u):
        n, d = u.shape
        e = np.exp(-0.5 * np.sum(u * u, axis=-1))
        outer = u[:, :, None] * u[:, None, :]
        eye = np.broadcast_to(np.eye(d), (n, d, d))
        return -sign * gamma * e[:, None, None] * (eye - outer)

    kind = "attract" if sign < 0 else "repel"
    return Landscape(
        dim=dim,
        v=_quad_v, grad_v=_quad_grad, hess_v=_quad_hess,
        f=f, grad_f=grad_f, hess_f=hess_f,
        name=f"gauss-{kind}({gamma:g})",
        lip_grad_v=1.0, lip_grad_f=gamma, bound_grad_f=gamma * math.exp(-0.5),
        flag_scope={"lip_grad_v": "global", "lip_grad_f": "global", "bound_grad_f": "global"},
    )


PRESETS = {
    "ou": _make_ou,
    "quad-attract": _make_quad_attract,
    "dw": _make_dw,
    "gauss-attract": lambda gamma=1.0, dim=1: _make_gauss(gamma, -1.0, dim),
    "gauss-repel": lambda gamma=1.0, dim=1: _make_gauss(gamma, +1.0, dim),
}


def preset(spec: str, **kwargs) -> Landscape:
    """Build a preset landscape from a name like ``"quad-attract(1)"``.

    A single positional parameter in parentheses is passed as the preset's
    first keyword (``beta`` or ``gamma``); explicit keyword arguments win.
    """
    name = spec.strip()
    arg = None
    if "(" in name:
        name, rest = name.split("(", 1)
        arg = float(rest.rstrip(") "))
    name = name.strip()
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    if arg is not None:
        first = {"quad-attract": "beta", "gauss-attract": "gamma", "gauss-repel": "gamma"}
        if name not in first:
            raise ValueError(f"preset {name!r} takes no parenthesized parameter")
        kwargs.setdefault(first[name], arg)
    return PRESETS[name](**kwargs)


def potential_eval(landscape: Landscape, x):
    """Evaluate (V(x), grad V(x)) at a single point."""
    p = landscape.point(x)[None, :]
    return float(landscape.v(p)[0]), landscape.grad_v(p)[0]


def interaction_eval(landscape: Landscape, u):
    """Evaluate (F(u), grad F(u)) at a single displacement; F(0) = 0."""
    p = landscape.point(u)[None, :]
    return float(landscape.f(p)[0]), landscape.grad_f(p)[0]


def effective_potential(landscape: Landscape, a, x):
    """Evaluate the effective potential W_a(x) = V(x) + F(x-a) - V(a) and its gradient."""
    pa = landscape.point(a)[None, :]
    px = landscape.point(x)[None, :]
    w = float(landscape.v(px)[0] + landscape.f(px - pa)[0] - landscape.v(pa)[0])
    dw = landscape.grad_v(px)[0] + landscape.grad_f(px - pa)[0]
    return w, dw


def effective_w_batch(landscape: Landscape, a, points: np.ndarray) -> np.ndarray:
    """Vectorized W_a over an (n, d) array of points."""
    a = np.asarray(a, dtype=float).reshape(1, -1)
    va = float(landscape.v(a)[0])
    return landscape.v(points) + landscape.f(points - a) - va


def effective_grad_batch(landscape: Landscape, a, points: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(1, -1)
    return landscape.grad_v(points) + landscape.grad_f(points - a)


def estimate_lipschitz(field_fn, region, n_samples: int, seed: int) -> float:
    """Sampled lower bound on the Lipschitz constant of a gradient field over a box.

    Half the budget goes to independent point pairs, half to short directional
    probes (step 1e-4 of the box diameter) that pick up the local operator
    norm.  The true constant can only be underestimated.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in region)
    if np.any(hi <= lo):
        raise ValueError("degenerate region")
    d = lo.size
    rng = np.random.default_rng(seed)
    m = n_samples // 2

    x = rng.uniform(lo, hi, size=(m, d))
    y = rng.uniform(lo, hi, size=(m, d))
    keep = np.linalg.norm(x - y, axis=1) > 1e-12
    x, y = x[keep], y[keep]
    ratios_far = np.linalg.norm(field_fn(x) - field_fn(y), axis=1) / np.linalg.norm(x - y, axis=1)

    h = 1e-4 * float(np.linalg.norm(hi - lo))
    z = rng.uniform(lo, hi, size=(n_samples - m, d))
    u = rng.normal(size=(n_samples - m, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    z2 = np.clip(z + h * u, lo, hi)
    hs = np.linalg.norm(z2 - z, axis=1)
    keep = hs > 1e-12
    ratios_loc = np.linalg.norm(field_fn(z2[keep]) - field_fn(z[keep]), axis=1) / hs[keep]

    return float(max(ratios_far.max(initial=0.0), ratios_loc.max(initial=0.0)))


def check_strong_attraction(landscape: Landscape, a, delta_x: float, delta_mu: float,
                            n_samples: int = 4096, seed: int = 0):
    """Sampled check of the strong-attraction condition around ``a``.

    Samples points x in the punctured ball of radius ``delta_x`` and test
    measures (single atoms and two-atom mixtures) around ``delta_a``, and
    returns the minimum Rayleigh quotient
    ``<grad V(x) + grad F * mu(x), x - a> / |x - a|^2`` together with the
    sign test ``K_est > 0``.

    The measure radius is scaled proportionally to ``|x - a| / delta_x``:
    the condition is a joint small-radius statement, and a fixed measure
    radius would produce spurious negative quotients at points much closer
    to ``a`` than the test atoms, failing every attracting landscape.  This
    remains a necessary-condition sampler: single atoms and two-atom
    mixtures are the extreme points of the ball but do not exhaust it.
    """
    if delta_x <= 0 or delta_mu <= 0:
        raise ValueError("delta_x and delta_mu must be positive")
    a = landscape.point(a)
    d = landscape.dim
    rng = np.random.default_rng(seed)

    k_min = math.inf
    batch = 512
    done = 0
    while done < n_samples:
        b = min(batch, n_samples - done)
        dirs = rng.normal(size=(b, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        # keep radii away from 0 so the quotient stays well conditioned
        rx = delta_x * rng.uniform(0.05, 1.0, size=b)
        x = a + rx[:, None] * dirs
        r_mu = delta_mu * (rx / delta_x)

        # one atom at distance <= r_mu, and a two-atom mixture in the same ball
        u1 = rng.normal(size=(b, d))
        u1 /= np.linalg.norm(u1, axis=1, keepdims=True)
        y1 = a + (r_mu * rng.uniform(0, 1, size=b))[:, None] * u1
        conv_single = landscape.grad_f(x - y1)

        u2 = rng.normal(size=(b, 2, d))
        u2 /= np.linalg.norm(u2, axis=2, keepdims=True)
        y2 = a + (r_mu[:, None, None] * rng.uniform(0, 1, size=(b, 2, 1))) * u2
        w = rng.uniform(0.1, 0.9, size=b)
        conv_two = (w[:, None] * landscape.grad_f(x - y2[:, 0])
                    + (1.0 - w)[:, None] * landscape.grad_f(x - y2[:, 1]))

        gv = landscape.grad_v(x)
        xa = x - a
        r2 = np.sum(xa * xa, axis=1)
        for conv in (conv_single, conv_two):
            q = np.sum((gv + conv) * xa, axis=1) / r2
            k_min = min(k_min, float(q.min()))
        done += b

    return k_min, k_min > 0.0


def _soft_radial_clamp(r_mod: float, shell: float):
    """C^1 radial map m with m(r)=r on [0,R], quadratic blend on [R,R+shell],
    constant R + shell/2 beyond.  m' is piecewise linear, hence Lipschitz."""
    R, s = float(r_mod), float(shell)
    m_inf = R + 0.5 * s

    def m(r):
        r = np.asarray(r, dtype=float)
        out = np.where(r <= R, r, np.where(r >= R + s, m_inf, r - (r - R) ** 2 / (2 * s)))
        return out

    def m_prime(r):
        r = np.asarray(r, dtype=float)
        return np.where(r <= R, 1.0, np.where(r >= R + s, 0.0, 1.0 - (r - R) / s))

    return m, m_prime, m_inf


def clamp_landscape(landscape: Landscape, r_mod: float, shell: float) -> Landscape:
    """Modify (V, F) outside the ball of radius ``r_mod`` so gradients are
    globally bounded and Lipschitz, leaving values inside bit-identical.

    Implementation: compose each potential with the C^1 soft radial
    retraction c(x) = m(|x|) x/|x|; since c is the identity on the inner
    ball, values and gradients there are untouched, and outside the shell
    the composition freezes the radial profile.  The blend is C^1 (not C^2),
    which is sufficient for Euler integration.
    """
    if r_mod <= 0 or shell <= 0:
        raise ValueError("r_mod and shell must be positive")
    m, m_prime, m_inf = _soft_radial_clamp(r_mod, shell)
    d = landscape.dim

    def retract(points):
        r = np.linalg.norm(points, axis=-1)
        inner = r <= r_mod
        safe_r = np.where(r > 0, r, 1.0)
        scale = np.where(inner, 1.0, m(r) / safe_r)
        return points * scale[..., None]

    def clamp_scalar(fn):
        def wrapped(points):
            return fn(retract(points))
        return wrapped

    def clamp_grad(fn):
        def wrapped(points):
            r = np.linalg.norm(points, axis=-1)
            inner = r <= r_mod
            g = fn(retract(points))
            if np.all(inner):
                return g
            safe_r = np.where(r > 0, r, 1.0)
            e = points / safe_r[..., None]
            radial = np.sum(g * e, axis=-1, keepdims=True) * e
            tangential = g - radial
            out = m_prime(r)[..., None] * radial + (m(r) / safe_r)[..., None] * tangential
            return np.where(inner[..., None], g, out)
        return wrapped

    def numeric_hess(grad_fn):
        def wrapped(points):
            n = points.shape[0]
            h = 1e-6
            out = np.empty((n, d, d))
            for k in range(d):
                dp = np.zeros(d)
                dp[k] = h
                out[:, :, k] = (grad_fn(points + dp) - grad_fn(points - dp)) / (2 * h)
            return out
        return wrapped

    gv = clamp_grad(landscape.grad_v)
    gf = clamp_grad(landscape.grad_f)

    # documented caps: sup |grad| on the retraction range (ball of radius m_inf)
    rng = np.random.default_rng(12345)
    probe = rng.normal(size=(4096, d))
    probe /= np.linalg.norm(probe, axis=1, keepdims=True)
    probe *= m_inf * rng.uniform(0, 1, size=(4096, 1)) ** (1.0 / d)
    cap_v = float(np.linalg.norm(landscape.grad_v(probe), axis=1).max())
    cap_f = float(np.linalg.norm(landscape.grad_f(probe), axis=1).max())

    clamped = replace(
        landscape,
        v=clamp_scalar(landscape.v),
        grad_v=gv,
        hess_v=numeric_hess(gv),
        f=clamp_scalar(landscape.f),
        grad_f=gf,
        hess_f=numeric_hess(gf),
        name=f"{landscape.name}|clamped({r_mod:g},{shell:g})",
        bound_grad_f=cap_f,
        interaction_zero=landscape.interaction_zero,
        interaction_linear_coeff=None if not landscape.interaction_zero else 0.0,
        flag_scope={"lip_grad_v": "global (clamped)", "lip_grad_f": "global (clamped)",
                    "bound_grad_f": "global (clamped)"},
        info={**{k: v for k, v in landscape.info.items() if k != "grad_v_form"},
              "clamp_radius": r_mod, "clamp_shell": shell,
              "grad_v_cap": cap_v, "grad_f_cap": cap_f},
    )
    return clamped
