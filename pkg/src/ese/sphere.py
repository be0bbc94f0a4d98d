"""Geometry of the unit hypersphere S^(D-1).

Points are plain 1-D float64 arrays of unit norm. Tangent vectors at a base
point are 1-D arrays orthogonal to that point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DOT_CLAMP = 1e-12
ANTIPODAL_GUARD = 1e-6
UNIT_TOL = 1e-4
TANGENT_TOL = 1e-6


class SphereError(ValueError):
    """Invalid input to a sphere operation."""


class AntipodalError(SphereError):
    """The tangent direction between two points is undefined."""


class KarcherDegeneracyError(SphereError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class KarcherConfig:
    tolerance: float = 1e-8
    max_iterations: int = 100

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass(frozen=True)
class KarcherResult:
    mean: np.ndarray
    iterations: int
    converged: bool
    tangent_norm: float


def as_unit_vector(u, name: str = "u") -> np.ndarray:
    """Validate ``u`` as a point on the sphere and return it as float64."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.shape[0] < 2:
        raise SphereError(f"{name} must be a 1-D vector with D >= 2, got shape {u.shape}")
    norm = np.linalg.norm(u)
    if not abs(norm - 1.0) <= UNIT_TOL:
        raise SphereError(f"{name} is not unit norm (|{name}| = {norm!r})")
    return u


def _pair(u, v):
    u = as_unit_vector(u, "u")
    v = as_unit_vector(v, "v")
    if u.shape != v.shape:
        raise SphereError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    return u, v


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def geodesic_distance(u, v) -> float:
    """Arc length between two unit vectors, in [0, pi]."""
    u, v = _pair(u, v)
    c = float(np.dot(u, v))
    if c >= 1.0 - DOT_CLAMP and np.array_equal(u, v):
        return 0.0
    if c <= -1.0 + DOT_CLAMP and np.array_equal(u, -v):
        return float(np.pi)
    return float(np.arccos(np.clip(c, -1.0 + DOT_CLAMP, 1.0 - DOT_CLAMP)))


def _log_map(base: np.ndarray, p: np.ndarray, guard: float) -> np.ndarray:
    c = float(np.dot(base, p))
    perp = p - c * base
    sin_theta = float(np.linalg.norm(perp))
    if sin_theta == 0.0 and c > 0:
        return np.zeros_like(base)
    # atan2 keeps precision near 0 and pi where arccos of the dot does not
    theta = float(np.arctan2(sin_theta, c))
    if theta >= np.pi - guard:
        raise AntipodalError(f"undefined tangent direction: points are antipodal (theta = {theta!r})")
    if sin_theta < 1e-300:
        return np.zeros_like(base)
    return perp * (theta / sin_theta)


def log_map(base, p, guard: float = ANTIPODAL_GUARD) -> np.ndarray:
    """Tangent vector at ``base`` pointing towards ``p`` with length equal to the arc length."""
    base, p = _pair(base, p)
    if np.array_equal(base, p):
        return np.zeros_like(base)
    return _log_map(base, p, guard)


def _exp_map(base: np.ndarray, t: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(t))
    if norm < 1e-12:
        return base.copy()
    out = np.cos(norm) * base + np.sin(norm) * (t / norm)
    return out / np.linalg.norm(out)


def exp_map(base, t) -> np.ndarray:
    """Walk from ``base`` along the great circle in direction ``t`` for arc length ``|t|``."""
    base = as_unit_vector(base, "base")
    t = np.asarray(t, dtype=np.float64)
    if t.shape != base.shape:
        raise SphereError(f"tangent shape {t.shape} does not match base {base.shape}")
    if abs(float(np.dot(base, t))) > TANGENT_TOL:
        raise SphereError(f"tangent vector is not orthogonal to base (dot = {np.dot(base, t)!r})")
    if np.linalg.norm(t) >= np.pi:
        raise SphereError("tangent vector norm must be < pi")
    return _exp_map(base, t)


def _canonical_order(points: np.ndarray) -> np.ndarray:
    # lexsort uses the last key as primary; reverse columns so column 0 leads
    return points[np.lexsort(points.T[::-1])]


def karcher_mean(points, cfg: KarcherConfig | None = None) -> KarcherResult:
    """Riemannian centre of mass of points on the sphere.

    Starts at the normalized arithmetic mean and repeats
    ``mu <- exp_mu(mean_n log_mu(x_n))`` until the tangent mean has norm below
    ``cfg.tolerance``. Inputs are put in lexicographic order first so the
    result does not depend on the order they were given in.
    """
    cfg = cfg or KarcherConfig()
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise SphereError("karcher_mean needs a nonempty (n, D) array of points")
    for i, p in enumerate(pts):
        as_unit_vector(p, f"points[{i}]")
    pts = _canonical_order(pts)

    if np.all(pts == pts[0]):
        return KarcherResult(pts[0].copy(), 0, True, 0.0)

    s = pts.sum(axis=0)
    s_norm = np.linalg.norm(s)
    if s_norm < 1e-9:
        raise KarcherDegeneracyError("arithmetic mean vanishes; no preferred starting point", 0)
    mu = s / s_norm

    tnorm = np.inf
    for it in range(1, cfg.max_iterations + 1):
        tangent = np.zeros_like(mu)
        for p in pts:
            try:
                tangent += _log_map(mu, p, ANTIPODAL_GUARD)
            except AntipodalError as exc:
                raise KarcherDegeneracyError(str(exc), it) from None
        tangent /= len(pts)
        # drift off the tangent plane is pure round-off
        tangent -= np.dot(tangent, mu) * mu
        tnorm = float(np.linalg.norm(tangent))
        if tnorm < cfg.tolerance:
            return KarcherResult(mu, it - 1, True, tnorm)
        mu = _exp_map(mu, tangent)
    return KarcherResult(mu, cfg.max_iterations, False, tnorm)


def karcher_mean_rows(stack, cfg: KarcherConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Karcher mean of every row of a stack shaped (N, M, D), vectorized over N.

    Returns ``(means, iterations)``. Rows whose arithmetic mean vanishes or
    that hit an antipodal configuration raise ``KarcherDegeneracyError`` with
    the iteration index; the row index is in ``exc.row``.
    """
    cfg = cfg or KarcherConfig()
    x = np.asarray(stack, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] == 0:
        raise SphereError(f"expected a (N, M, D) stack, got shape {x.shape}")
    n = x.shape[0]
    s = x.sum(axis=1)
    s_norm = np.linalg.norm(s, axis=1)
    bad = np.flatnonzero(s_norm < 1e-9)
    if bad.size:
        exc = KarcherDegeneracyError(f"arithmetic mean vanishes for row {bad[0]}", 0)
        exc.row = int(bad[0])
        raise exc
    mu = s / s_norm[:, None]
    iterations = np.zeros(n, dtype=np.int64)
    # rows whose members all coincide are their own mean
    same = np.all(x == x[:, :1, :], axis=(1, 2))
    mu[same] = x[same, 0]
    active = ~same
    for it in range(1, cfg.max_iterations + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        m = mu[idx]
        p = x[idx]
        c = np.einsum("nd,nkd->nk", m, p)
        perp = p - c[..., None] * m[:, None, :]
        sin_t = np.linalg.norm(perp, axis=2)
        theta = np.arctan2(sin_t, c)
        if np.any(theta >= np.pi - ANTIPODAL_GUARD):
            row = int(idx[np.argwhere(theta >= np.pi - ANTIPODAL_GUARD)[0, 0]])
            exc = KarcherDegeneracyError(f"antipodal point in row {row}", it)
            exc.row = row
            raise exc
        scale = np.where(sin_t > 1e-300, theta / np.where(sin_t > 1e-300, sin_t, 1.0), 0.0)
        tangent = (perp * scale[..., None]).mean(axis=1)
        tangent -= np.einsum("nd,nd->n", tangent, m)[:, None] * m
        tnorm = np.linalg.norm(tangent, axis=1)
        done = tnorm < cfg.tolerance
        iterations[idx[done]] = it - 1
        step = ~done
        if np.any(step):
            t = tangent[step]
            tn = tnorm[step][:, None]
            base = m[step]
            moved = np.cos(tn) * base + np.sin(tn) * (t / np.where(tn > 0, tn, 1.0))
            moved /= np.linalg.norm(moved, axis=1, keepdims=True)
            mu[idx[step]] = moved
            iterations[idx[step]] = it
        active[idx[done]] = False
    return mu, iterations
