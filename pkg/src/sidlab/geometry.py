"""Exit domains: containment, boundary operations, and level-set checks.

Domains are open sets G in R^d given as primitives (interval, ball, box) or
implicitly by a level function g with g < 0 inside.  Crossing detection is
exact for primitives and bisected to |g| < 1e-10 for implicit domains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .landscape import Landscape, effective_grad_batch, effective_w_batch

__all__ = [
    "Interval",
    "Ball",
    "Box",
    "Implicit",
    "IMPLICIT_BUILTINS",
    "domain_from_spec",
    "SublevelReport",
    "contains",
    "detect_crossing",
    "sample_boundary",
    "inner_normal",
    "check_sublevel",
    "level_set_min_gradient",
    "check_flow_stability",
]

_BISECT_TOL = 1e-10


class Interval:
    """Open interval (lo, hi) in d=1; endpoints may be infinite.

    Unbounded intervals need ``grid_box`` (a finite truncation) for the grid
    based checks; simulation itself does not.
    """

    dim = 1

    def __init__(self, lo: float, hi: float, grid_box=None):
        if not lo < hi:
            raise ValueError("need lo < hi")
        self.lo, self.hi = float(lo), float(hi)
        self.grid_box = grid_box

    def __repr__(self):
        return f"Interval({self.lo}, {self.hi})"

    def contains(self, x) -> bool:
        x = float(np.asarray(x).reshape(()))
        return self.lo < x < self.hi

    def contains_batch(self, points) -> np.ndarray:
        x = points[..., 0]
        return (x > self.lo) & (x < self.hi)

    def bbox(self):
        if math.isinf(self.lo) or math.isinf(self.hi):
            if self.grid_box is None:
                raise ValueError("unbounded interval needs grid_box for grid operations")
            return (np.array([self.grid_box[0]]), np.array([self.grid_box[1]]))
        return (np.array([self.lo]), np.array([self.hi]))

    def bbox_is_truncation(self):
        return math.isinf(self.lo) or math.isinf(self.hi)

    def inradius(self) -> float:
        if math.isinf(self.lo) or math.isinf(self.hi):
            return math.inf
        return 0.5 * (self.hi - self.lo)

    def boundary_points(self):
        return [b for b in (self.lo, self.hi) if math.isfinite(b)]

    def crossing(self, p, q):
        p, q = float(p[0]), float(q[0])
        lams = []
        for b in (self.lo, self.hi):
            if math.isfinite(b) and (q - p) != 0.0:
                lam = (b - p) / (q - p)
                if 0.0 <= lam <= 1.0:
                    lams.append((lam, b))
        if not lams:
            return None
        lam, b = min(lams)
        return lam, np.array([b])

    def inner_normal_at(self, z):
        z = float(z[0])
        mid_candidates = [(abs(z - b), b) for b in self.boundary_points()]
        _, b = min(mid_candidates)
        return np.array([1.0 if b == self.lo else -1.0])

    def to_spec(self):
        d = {"variant": "interval", "lo": self.lo, "hi": self.hi}
        if self.grid_box is not None:
            d["grid_box"] = list(self.grid_box)
        return d


class Ball:
    """Open ball of given center and radius."""

    def __init__(self, center, radius: float):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)
        self.dim = self.center.size

    def __repr__(self):
        return f"Ball({self.center.tolist()}, {self.radius})"

    def contains(self, x) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(np.linalg.norm(x - self.center)) < self.radius

    def contains_batch(self, points) -> np.ndarray:
        return np.linalg.norm(points - self.center, axis=-1) < self.radius

    def bbox(self):
        return (self.center - self.radius, self.center + self.radius)

    def bbox_is_truncation(self):
        return False

    def inradius(self) -> float:
        return self.radius

    def crossing(self, p, q):
        # smallest lambda in [0,1] with |p + lam (q-p) - c| = R
        u = q - p
        w = p - self.center
        aa = float(np.dot(u, u))
        if aa == 0.0:
            return None
        bb = 2.0 * float(np.dot(w, u))
        cc = float(np.dot(w, w)) - self.radius ** 2
        disc = bb * bb - 4 * aa * cc
        if disc < 0:
            return None
        sq = math.sqrt(disc)
        lams = [l for l in ((-bb - sq) / (2 * aa), (-bb + sq) / (2 * aa)) if 0.0 <= l <= 1.0]
        if not lams:
            return None
        lam = min(lams)
        z = self.center + (p + lam * u - self.center) * (self.radius / np.linalg.norm(p + lam * u - self.center))
        return lam, z

    def inner_normal_at(self, z):
        n = self.center - z
        return n / np.linalg.norm(n)

    def to_spec(self):
        return {"variant": "ball", "center": self.center.tolist(), "radius": self.radius}


class Box:
    """Open axis-aligned box given by two opposite corners."""

    def __init__(self, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("need lo < hi componentwise")
        self.dim = self.lo.size

    def __repr__(self):
        return f"Box({self.lo.tolist()}, {self.hi.tolist()})"

    def contains(self, x) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.all(x > self.lo) and np.all(x < self.hi))

    def contains_batch(self, points) -> np.ndarray:
        return np.all((points > self.lo) & (points < self.hi), axis=-1)

    def bbox(self):
        return (self.lo.copy(), self.hi.copy())

    def bbox_is_truncation(self):
        return False

    def inradius(self) -> float:
        return float(np.min(self.hi - self.lo) / 2)

    def crossing(self, p, q):
        # first exit = earliest coordinate leaving its interval
        best = None
        for k in range(self.dim):
            u = q[k] - p[k]
            if u == 0.0:
                continue
            for b in (self.lo[k], self.hi[k]):
                lam = (b - p[k]) / u
                if 0.0 <= lam <= 1.0:
                    z = p + lam * (q - p)
                    # crossing must lie on the closed box surface
                    if np.all(z >= self.lo - 1e-12) and np.all(z <= self.hi + 1e-12):
                        if best is None or lam < best[0]:
                            zc = np.clip(z, self.lo, self.hi)
                            zc[k] = b
                            best = (lam, zc)
        return best

    def inner_normal_at(self, z):
        gaps = np.concatenate([np.abs(z - self.lo), np.abs(z - self.hi)])
        i = int(np.argmin(gaps))
        n = np.zeros(self.dim)
        if i < self.dim:
            n[i] = 1.0
        else:
            n[i - self.dim] = -1.0
        return n

    def to_spec(self):
        return {"variant": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


class Implicit:
    """Domain {g < 0} for a smooth level function with a strict bounding box."""

    def __init__(self, g: Callable[[np.ndarray], np.ndarray], bbox_lo, bbox_hi,
                 dim: int, name: str = "implicit"):
        self.g = g
        self._lo = np.atleast_1d(np.asarray(bbox_lo, dtype=float))
        self._hi = np.atleast_1d(np.asarray(bbox_hi, dtype=float))
        self.dim = dim
        self.name = name

    def __repr__(self):
        return f"Implicit({self.name})"

    def contains(self, x) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(self.g(x[None, :])[0]) < 0.0

    def contains_batch(self, points) -> np.ndarray:
        return self.g(points) < 0.0

    def bbox(self):
        return (self._lo.copy(), self._hi.copy())

    def bbox_is_truncation(self):
        return False

    def inradius(self) -> float:
        # conservative sampled estimate: distance from the box center to the boundary
        center = 0.5 * (self._lo + self._hi)
        zs = sample_boundary(self, 256, seed=7)
        return float(np.min(np.linalg.norm(zs - center, axis=1)))

    def _grad_g(self, z):
        h = 1e-7
        g0 = np.empty(self.dim)
        for k in range(self.dim):
            dp = np.zeros(self.dim)
            dp[k] = h
            g0[k] = (float(self.g((z + dp)[None, :])[0]) - float(self.g((z - dp)[None, :])[0])) / (2 * h)
        return g0

    def crossing(self, p, q):
        gp = float(self.g(p[None, :])[0])
        gq = float(self.g(q[None, :])[0])
        if gq < 0.0:
            return None
        # coarse scan for the first sign change, then bisection
        ts = np.linspace(0.0, 1.0, 33)
        vals = self.g(p[None, :] + ts[:, None] * (q - p)[None, :])
        idx = np.nonzero(vals >= 0.0)[0]
        hi = float(ts[idx[0]]) if idx.size else 1.0
        lo = float(ts[idx[0] - 1]) if idx.size and idx[0] > 0 else 0.0
        glo = gp
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            gm = float(self.g((p + mid * (q - p))[None, :])[0])
            if abs(gm) < _BISECT_TOL:
                lo = hi = mid
                break
            if (gm < 0) == (glo < 0):
                lo = mid
                glo = gm
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
        return lam, p + lam * (q - p)

    def inner_normal_at(self, z):
        gg = self._grad_g(z)
        nrm = np.linalg.norm(gg)
        if nrm < 1e-12:
            raise ValueError("level-function gradient vanishes at boundary point")
        return -gg / nrm

    def to_spec(self):
        return {"variant": "implicit", "name": self.name,
                "bbox_lo": self._lo.tolist(), "bbox_hi": self._hi.tolist()}


def _quartic_ball(radius=1.0, dim=2):
    r4 = float(radius) ** 4

    def g(points):
        return np.sum(points ** 4, axis=-1) - r4

    margin = 0.25 * radius
    lo = -(radius + margin) * np.ones(dim)
    hi = (radius + margin) * np.ones(dim)
    return Implicit(g, lo, hi, dim, name=f"quartic({radius:g},d={dim})")


IMPLICIT_BUILTINS = {"quartic": _quartic_ball}


def domain_from_spec(spec: dict):
    """Build a domain from its config-file description."""
    variant = spec["variant"]
    if variant == "interval":
        return Interval(spec["lo"], spec["hi"], grid_box=spec.get("grid_box"))
    if variant == "ball":
        return Ball(spec["center"], spec["radius"])
    if variant == "box":
        return Box(spec["lo"], spec["hi"])
    if variant == "implicit":
        name = spec["name"].split("(")[0]
        if name not in IMPLICIT_BUILTINS:
            raise KeyError(f"unknown implicit domain {name!r}")
        kwargs = {k: v for k, v in spec.items() if k not in ("variant", "name")}
        if "(" in spec["name"]:
            kwargs.setdefault("radius", float(spec["name"].split("(")[1].rstrip(") ")))
        return IMPLICIT_BUILTINS[name](**kwargs)
    raise KeyError(f"unknown domain variant {variant!r}")


def contains(domain, x) -> bool:
    """True iff x lies in the open domain."""
    return domain.contains(x)


def detect_crossing(domain, p, q):
    """First boundary crossing of the segment p -> q, or None if q stays inside.

    p must lie inside the domain.  Returns (lam, z) with z on the boundary;
    exact for primitives, |g(z)| < 1e-10 for implicit domains.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if not domain.contains(p):
        raise ValueError("segment start lies outside the domain")
    if domain.contains(q):
        return None
    return domain.crossing(p, q)


def sample_boundary(domain, n: int, seed: int = 0) -> np.ndarray:
    """n points on the boundary (for intervals: the finite endpoints)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(domain, Interval):
        pts = domain.boundary_points()
        if not pts:
            raise ValueError("interval has no finite boundary")
        return np.array(pts[:n], dtype=float).reshape(-1, 1)
    if isinstance(domain, Ball):
        u = rng.normal(size=(n, domain.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return domain.center + domain.radius * u
    if isinstance(domain, Box):
        d = domain.dim
        widths = domain.hi - domain.lo
        areas = np.empty(2 * d)
        for k in range(d):
            face_area = np.prod(np.delete(widths, k)) if d > 1 else 1.0
            areas[2 * k] = areas[2 * k + 1] = face_area
        probs = areas / areas.sum()
        faces = rng.choice(2 * d, size=n, p=probs)
        pts = rng.uniform(domain.lo, domain.hi, size=(n, d))
        for i, f in enumerate(faces):
            k, side = divmod(f, 2)
            pts[i, k] = domain.hi[k] if side else domain.lo[k]
        return pts
    if isinstance(domain, Implicit):
        lo, hi = domain.bbox()
        out = []
        attempts = 0
        while len(out) < n and attempts < 200:
            attempts += 1
            z = rng.uniform(lo, hi, size=domain.dim)
            # project onto {g = 0} by damped Newton along grad g
            ok = False
            for _ in range(100):
                gz = float(domain.g(z[None, :])[0])
                if abs(gz) < 1e-9:
                    ok = True
                    break
                gg = domain._grad_g(z)
                n2 = float(np.dot(gg, gg))
                if n2 < 1e-18:
                    break
                z = z - gz * gg / n2
            if ok and np.all(z >= lo) and np.all(z <= hi):
                out.append(z)
        if len(out) < n:
            raise ValueError("boundary projection failed to produce enough points")
        return np.array(out)
    raise TypeError(f"unsupported domain {type(domain)!r}")


def inner_normal(domain, z) -> np.ndarray:
    """Unit vector at boundary point z pointing into the domain."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return domain.inner_normal_at(z)


@dataclass
class SublevelReport:
    """Grid verdict on the effective-potential sublevel region inside G."""

    bounded: bool
    connected: bool
    touch_set: np.ndarray
    grid_resolution: float
    n_region_cells: int = 0
    n_stray_cells: int = 0
    stray_cells: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))


def _grid_axes(lo, hi, resolution, inflate_cells):
    axes = []
    for k in range(lo.size):
        n = int(math.ceil((hi[k] - lo[k]) / resolution)) + 1 + 2 * inflate_cells
        axes.append(lo[k] - inflate_cells * resolution + resolution * np.arange(n))
    return axes


def check_sublevel(landscape: Landscape, a, H: float, domain, resolution: float) -> SublevelReport:
    """Flood-fill check that {W_a <= H} inside G is bounded and connected.

    The grid covers the domain's bounding box (inflated by two cells for
    bounded domains, so touching the frame only flags truncated unbounded
    variants).  Restricted to d <= 3.
    """
    if H <= 0:
        raise ValueError("H must be positive")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if not domain.contains(a):
        raise ValueError("a must lie inside the domain")
    d = domain.dim
    if d > 3:
        raise ValueError("grid check restricted to d <= 3")

    lo, hi = domain.bbox()
    inflate = 0 if domain.bbox_is_truncation() else 2
    axes = _grid_axes(lo, hi, resolution, inflate)
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=-1)
    shape = mesh[0].shape

    w = effective_w_batch(landscape, a, centers).reshape(shape)
    in_g = domain.contains_batch(centers).reshape(shape)
    region = (w <= H) & in_g

    labels, _ = ndimage.label(region)
    a_idx = tuple(int(np.argmin(np.abs(ax - a[k]))) for k, ax in enumerate(axes))
    a_label = labels[a_idx]
    if a_label == 0:
        # a's own cell center missed the region (coarse grid); fall back to the
        # nearest region cell
        coords = np.argwhere(region)
        if coords.size == 0:
            raise ValueError("sublevel region empty at this resolution")
        cell_pts = np.stack([axes[k][coords[:, k]] for k in range(d)], axis=-1)
        a_label = labels[tuple(coords[int(np.argmin(np.linalg.norm(cell_pts - a, axis=1)))])]

    main = labels == a_label
    frame = np.zeros(shape, dtype=bool)
    for k in range(d):
        sl = [slice(None)] * d
        sl[k] = 0
        frame[tuple(sl)] = True
        sl[k] = -1
        frame[tuple(sl)] = True
    bounded = not bool(np.any(main & frame))

    stray = region & ~main
    stray_coords = np.argwhere(stray)
    stray_pts = (np.stack([axes[k][stray_coords[:, k]] for k in range(d)], axis=-1)
                 if stray_coords.size else np.empty((0, d)))
    connected = stray_coords.shape[0] == 0

    zs = sample_boundary(domain, 512, seed=51)
    wz = effective_w_batch(landscape, a, zs)
    gz = np.linalg.norm(effective_grad_batch(landscape, a, zs), axis=1)
    tol = resolution * (gz + resolution) + 1e-12
    touch = zs[np.abs(wz - H) < tol]

    return SublevelReport(
        bounded=bounded,
        connected=connected,
        touch_set=touch,
        grid_resolution=resolution,
        n_region_cells=int(region.sum()),
        n_stray_cells=int(stray_coords.shape[0]),
        stray_cells=stray_pts,
    )


def level_set_min_gradient(landscape: Landscape, a, H: float, domain,
                           n: int = 256, seed: int = 0) -> float:
    """Minimum of |grad W_a| over sampled points of the level set {W_a = H} in the closed domain.

    Points are located by scanning segments from ``a`` to boundary samples for
    the first crossing of the level, then polished by bisection.  A value near
    zero flags a critical point on the level set (degenerate inner-normal
    condition).
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    zs = sample_boundary(domain, n, seed=seed)
    found = []
    for z in zs:
        ts = np.linspace(0.0, 1.0, 129)
        pts = a[None, :] + ts[:, None] * (z - a)[None, :]
        vals = effective_w_batch(landscape, a, pts) - H
        idx = np.nonzero(vals >= 0.0)[0]
        if idx.size == 0:
            continue
        i = int(idx[0])
        lo_t, hi_t = (ts[i - 1], ts[i]) if i > 0 else (0.0, ts[i])
        for _ in range(80):
            mid = 0.5 * (lo_t + hi_t)
            vm = float(effective_w_batch(landscape, a, (a + mid * (z - a))[None, :])[0]) - H
            if vm < 0:
                lo_t = mid
            else:
                hi_t = mid
        p = a + 0.5 * (lo_t + hi_t) * (z - a)
        found.append(p)
    if not found:
        raise ValueError("failed to locate the level set on sampled segments")
    pts = np.array(found)
    grads = np.linalg.norm(effective_grad_batch(landscape, a, pts), axis=1)
    return float(grads.min())


def check_flow_stability(landscape: Landscape, a, domain, n_starts: int = 64,
                         T: float = 20.0, dt: float = 1e-3, seed: int = 0):
    """Integrate the effective flow from starts in the closed domain.

    Passes iff every trajectory stays inside G (allowing a one-step
    overshoot of size dt*|grad W_a|) and ends within 1e-3 of ``a``.
    Returns (pass, failing start points).
    """
    if dt <= 0 or T <= 0:
        raise ValueError("dt and T must be positive")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    rng = np.random.default_rng(seed)
    n_b = max(1, n_starts // 2)
    starts = [sample_boundary(domain, n_b, seed=seed)]
    lo, hi = domain.bbox()
    need = n_starts - n_b
    inner = []
    while len(inner) < need:
        cand = rng.uniform(lo, hi, size=(4 * need, domain.dim))
        cand = cand[domain.contains_batch(cand)]
        inner.extend(cand[: need - len(inner)])
    starts.append(np.array(inner).reshape(-1, domain.dim))
    x0 = np.concatenate(starts, axis=0)

    x = x0.copy()
    ok = np.ones(x.shape[0], dtype=bool)
    steps = int(round(T / dt))
    for _ in range(steps):
        g = effective_grad_batch(landscape, a, x)
        x_new = x - dt * g
        inside = domain.contains_batch(x_new)
        if not np.all(inside):
            # allow the one-step integration overshoot, nothing more
            for i in np.nonzero(~inside & ok)[0]:
                cross = domain.crossing(x[i], x_new[i]) if domain.contains(x[i]) else None
                overshoot = float(np.linalg.norm(x_new[i] - cross[1])) if cross else math.inf
                if overshoot > dt * float(np.linalg.norm(g[i])) + 1e-9:
                    ok[i] = False
        x = x_new
    ok &= np.linalg.norm(x - a, axis=1) <= 1e-3
    failures = x0[~ok]
    return bool(np.all(ok)), failures
