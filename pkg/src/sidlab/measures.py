"""Occupation measures and extended initial conditions.

The occupation measure of a trajectory mixes a prior block of time-mass
``t0`` (an arbitrary atomic probability measure) with the time-discretized
path: after elapsed time t the prior carries normalized weight
``t0 / (t0 + t)`` and each stored path sample of duration dt carries
``dt / (t0 + t)``.  With ``t0 = inf`` the measure is frozen at the prior.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .landscape import Landscape

__all__ = [
    "ExtendedInit",
    "OccupationMeasure",
    "make_init",
    "w2_discrete_1d",
    "DEFAULT_ATOM_CAP",
]

DEFAULT_ATOM_CAP = 4096


@dataclass(frozen=True)
class ExtendedInit:
    """Initial condition triple (t0, mu0, x0) for the generalized dynamics.

    ``t0 = inf`` marks the frozen-measure regime in which path samples never
    change the effective measure.
    """

    t0: float
    mu0_points: np.ndarray  # (m, d)
    mu0_weights: np.ndarray  # (m,), sums to 1
    x0: np.ndarray  # (d,)

    @property
    def dim(self) -> int:
        return self.x0.size

    def measure(self, cap: int = DEFAULT_ATOM_CAP) -> "OccupationMeasure":
        """Fresh occupation measure carrying this initial condition's prior block."""
        return OccupationMeasure(self.t0, self.mu0_points, self.mu0_weights,
                                 cap=cap, dim=self.dim)

    def to_dict(self) -> dict:
        return {
            "t0": "inf" if math.isinf(self.t0) else self.t0,
            "mu0": [[list(p), float(w)] for p, w in zip(self.mu0_points, self.mu0_weights)],
            "x0": self.x0.tolist(),
        }


def make_init(t0, mu0_atoms, x0) -> ExtendedInit:
    """Validate and normalize an extended initial condition.

    ``mu0_atoms`` is a sequence of (point, weight) pairs with positive
    weights; they are normalized to total mass one.  An empty atom list is
    allowed only for ``t0 = 0`` (the prior then carries no mass).
    """
    t0 = float(t0)
    if t0 < 0:
        raise ValueError("t0 must be nonnegative")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    atoms = list(mu0_atoms or [])
    if not atoms:
        if t0 > 0:
            raise ValueError("empty prior atom list requires t0 = 0")
        return ExtendedInit(t0, np.empty((0, d)), np.empty(0), x0)
    pts = np.array([np.atleast_1d(np.asarray(p, dtype=float)) for p, _ in atoms])
    ws = np.array([float(w) for _, w in atoms])
    if pts.shape[1] != d:
        raise ValueError("prior atom dimension does not match x0")
    if np.any(ws <= 0):
        raise ValueError("prior weights must be positive")
    ws = ws / ws.sum()
    return ExtendedInit(t0, pts, ws, x0)


class OccupationMeasure:
    """Weighted atomic measure: prior block plus appended path samples.

    Owned by a single trajectory; pushes are O(1) amortized and the atom
    count is kept below ``cap`` by pairwise barycenter merging of
    time-adjacent samples (mass-exact, deterministic).
    """

    def __init__(self, prior_weight: float, prior_points, prior_weights,
                 cap: int = DEFAULT_ATOM_CAP, dim: int | None = None):
        if cap < 16:
            raise ValueError("cap must be >= 16")
        self.prior_weight = float(prior_weight)
        pts = np.asarray(prior_points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(len(prior_weights), -1) if pts.size else pts.reshape(0, dim or 1)
        self.prior_points = pts
        self.prior_weights = np.asarray(prior_weights, dtype=float)
        self.cap = int(cap)
        d = dim if dim is not None else (pts.shape[1] if pts.ndim == 2 and pts.shape[1] else 1)
        self._dim = d
        self._pts = np.empty((cap, d))
        self._dtw = np.empty(cap)
        self._n = 0
        self.elapsed = 0.0

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def n_path_atoms(self) -> int:
        return self._n

    def path_atoms(self):
        return self._pts[: self._n], self._dtw[: self._n]

    def copy(self) -> "OccupationMeasure":
        out = OccupationMeasure(self.prior_weight, self.prior_points.copy(),
                                self.prior_weights.copy(), cap=self.cap)
        out._pts = self._pts.copy()
        out._dtw = self._dtw.copy()
        out._n = self._n
        out.elapsed = self.elapsed
        return out

    def _total_mass(self) -> float:
        t0 = 0.0 if math.isinf(self.prior_weight) else self.prior_weight
        return t0 + self.elapsed

    def push_sample(self, x, dt: float):
        """Append a path sample of duration dt; thins in place at the cap."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self._pts.size and x.size != self._pts.shape[1]:
            raise ValueError("dimension mismatch")
        if self._n == self.cap:
            self._merge_adjacent()
        self._pts[self._n] = x
        self._dtw[self._n] = dt
        self._n += 1
        self.elapsed += dt
        return self

    def _merge_adjacent(self, n_pairs: int | None = None):
        """Merge the first ``n_pairs`` adjacent atom pairs (all, by default)."""
        n = self._n
        m = n // 2 if n_pairs is None else min(n_pairs, n // 2)
        if m == 0:
            return
        p, w = self._pts[:n], self._dtw[:n]
        wp = w[0:2 * m:2]
        wq = w[1:2 * m:2]
        ws = wp + wq
        merged = (p[0:2 * m:2] * wp[:, None] + p[1:2 * m:2] * wq[:, None]) / ws[:, None]
        tail = n - 2 * m
        if tail:
            tail_p = p[2 * m:n].copy()
            tail_w = w[2 * m:n].copy()
            self._pts[m:m + tail] = tail_p
            self._dtw[m:m + tail] = tail_w
        self._pts[:m] = merged
        self._dtw[:m] = ws
        self._n = m + tail

    def thin(self, cap: int) -> "OccupationMeasure":
        """Return a copy whose path block is merged down to at most ``cap`` atoms."""
        if cap < 16:
            raise ValueError("cap must be >= 16")
        out = self.copy()
        out.cap = max(cap, 16)
        while out._n > cap:
            # last round merges only as many pairs as needed to reach the cap
            out._merge_adjacent(n_pairs=min(out._n - cap, out._n // 2))
        # shrink storage to the new cap
        keep_p, keep_w = out._pts[: out._n].copy(), out._dtw[: out._n].copy()
        out._pts = np.empty((out.cap, out._dim))
        out._dtw = np.empty(out.cap)
        out._pts[: out._n] = keep_p
        out._dtw[: out._n] = keep_w
        return out

    def atoms(self):
        """Normalized atoms as (points (m, d), weights (m,)); weights sum to 1.

        With ``t0 = inf`` only the prior block carries mass.
        """
        if math.isinf(self.prior_weight):
            return self.prior_points, self.prior_weights.copy()
        total = self._total_mass()
        if total <= 0.0:
            return np.empty((0, self._dim)), np.empty(0)
        parts_p, parts_w = [], []
        if self.prior_weight > 0 and self.prior_points.size:
            parts_p.append(self.prior_points)
            parts_w.append(self.prior_weights * (self.prior_weight / total))
        if self._n:
            parts_p.append(self._pts[: self._n])
            parts_w.append(self._dtw[: self._n] / total)
        if not parts_p:
            return np.empty((0, self._dim)), np.empty(0)
        return np.concatenate(parts_p), np.concatenate(parts_w)

    def interaction_drift(self, landscape: Landscape, x) -> np.ndarray:
        """Convolution gradient sum_i w_i grad F(x - z_i) over the normalized atoms.

        An empty measure (t0 = 0 before the first push) returns zero, the
        t -> 0 limit of the time-averaged interaction.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        pts, ws = self.atoms()
        if pts.shape[0] == 0:
            return np.zeros_like(x)
        g = landscape.grad_f(x[None, :] - pts)
        return g.T @ ws

    def w2_to_dirac(self, a) -> float:
        """Exact W2 distance to the point mass at ``a`` (root second moment)."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        pts, ws = self.atoms()
        if pts.shape[0] == 0:
            return 0.0
        d2 = np.sum((pts - a) ** 2, axis=1)
        return float(math.sqrt(float(d2 @ ws)))

    def to_json(self) -> str:
        """Documented trace-dump shape: prior_weight, prior/path atom lists, elapsed."""
        return json.dumps({
            "dim": self._dim,
            "prior_weight": "inf" if math.isinf(self.prior_weight) else self.prior_weight,
            "prior_atoms": [[list(p), float(w)] for p, w in
                            zip(self.prior_points, self.prior_weights)],
            "path_atoms": [[list(p), float(w)] for p, w in
                           zip(self._pts[: self._n], self._dtw[: self._n])],
            "elapsed": self.elapsed,
        })

    @classmethod
    def from_json(cls, text: str, cap: int = DEFAULT_ATOM_CAP) -> "OccupationMeasure":
        doc = json.loads(text)
        pw = math.inf if doc["prior_weight"] == "inf" else float(doc["prior_weight"])
        d = int(doc.get("dim", 1))
        pp = [p for p, _ in doc["prior_atoms"]]
        ws = [w for _, w in doc["prior_atoms"]]
        out = cls(pw, np.array(pp).reshape(len(ws), d) if ws else np.empty((0, d)),
                  np.array(ws), cap=max(cap, len(doc["path_atoms"]) + 16), dim=d)
        for p, w in doc["path_atoms"]:
            out.push_sample(np.asarray(p), w)
        return out


def w2_discrete_1d(atoms_p, atoms_q) -> float:
    """Exact 1d Wasserstein-2 distance between two weighted atomic measures.

    Uses the sorted quantile coupling; both measures are normalized to unit
    mass and must have equal total mass beforehand.
    """
    def unpack(atoms):
        pts = np.array([float(np.asarray(p).reshape(())) for p, _ in atoms])
        ws = np.array([float(w) for _, w in atoms])
        if np.any(ws <= 0):
            raise ValueError("weights must be positive")
        return pts, ws

    xp, wp = unpack(atoms_p)
    xq, wq = unpack(atoms_q)
    if abs(wp.sum() - wq.sum()) > 1e-9 * max(wp.sum(), wq.sum()):
        raise ValueError("total masses differ")
    wp = wp / wp.sum()
    wq = wq / wq.sum()
    ip, iq = np.argsort(xp, kind="stable"), np.argsort(xq, kind="stable")
    xp, wp = xp[ip], wp[ip]
    xq, wq = xq[iq], wq[iq]

    total = 0.0
    i = j = 0
    rp, rq = wp[0], wq[0]
    while i < xp.size and j < xq.size:
        step = min(rp, rq)
        total += step * (xp[i] - xq[j]) ** 2
        rp -= step
        rq -= step
        if rp <= 1e-15:
            i += 1
            rp = wp[i] if i < xp.size else 0.0
        if rq <= 1e-15:
            j += 1
            rq = wq[j] if j < xq.size else 0.0
    return float(math.sqrt(max(total, 0.0)))
