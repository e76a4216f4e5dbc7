"""Closed-form signed distance fields used as oracles and shape generators.

Negative inside, positive outside.  Sphere, box and ellipsoid are exact; the
two-lobe smooth union is 1-Lipschitz with an exact sign for its own level set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ParameterError(ValueError):
    pass


def _positive(name: str, *vals) -> None:
    for v in np.ravel(vals):
        if not v > 0:
            raise ParameterError(f"{name} must be positive, got {v}")


class AnalyticSDF:
    """Callable ``(N, 3) -> (N,)``; ``gradient`` uses central differences unless overridden."""

    def __call__(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, p: np.ndarray, h: float = 1e-6) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        g = np.empty_like(p)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = (self(p + e) - self(p - e)) / (2 * h)
        return g


@dataclass(frozen=True)
class Sphere(AnalyticSDF):
    radius: float
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        _positive("radius", self.radius)

    def __call__(self, p):
        return np.linalg.norm(np.asarray(p) - self.center, axis=-1) - self.radius

    def gradient(self, p, h=None):
        d = np.asarray(p) - self.center
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.where(n > 0, n, 1.0)


@dataclass(frozen=True)
class Box(AnalyticSDF):
    half_extents: tuple
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        _positive("half extents", *self.half_extents)

    def __call__(self, p):
        q = np.abs(np.asarray(p) - self.center) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Ellipsoid(AnalyticSDF):
    """Exact Euclidean distance to an axis-aligned ellipsoid (bisection on the Lagrange root)."""

    axes: tuple
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        _positive("axes", *self.axes)

    def __call__(self, p):
        return ellipsoid_distance(np.asarray(p, dtype=np.float64) - self.center, np.asarray(self.axes, dtype=np.float64))


def ellipsoid_distance(p: np.ndarray, axes: np.ndarray, iters: int = 120) -> np.ndarray:
    p = np.atleast_2d(p)
    order = np.argsort(-axes)
    e = axes[order]  # e0 >= e1 >= e2
    y = np.abs(p[:, order])
    inside = ((y / e) ** 2).sum(axis=1) < 1.0
    e2 = e ** 2

    def F(t):
        return ((e * y / (t[:, None] + e2)) ** 2).sum(axis=1) - 1.0

    # root t > -e_min^2; F decreases monotonically there
    lo = np.full(len(y), -e2[2])
    hi = np.maximum(np.linalg.norm(e * y, axis=1), 1e-300)
    lo = np.where(inside, lo, 0.0)
    hi = np.where(inside, 0.0, hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f = F(mid)
        lo = np.where(f > 0, mid, lo)
        hi = np.where(f > 0, hi, mid)
    t = 0.5 * (lo + hi)
    x = e2 * y / (t[:, None] + e2)
    # interior points on the minor-axis symmetry plane: the root escapes to -e_min^2
    deg = inside & (y[:, 2] <= 1e-12 * e[2])
    if deg.any():
        yd = y[deg]
        denom = e2[:2] - e2[2]
        xd = np.zeros_like(yd)
        with np.errstate(divide="ignore", invalid="ignore"):
            xd[:, :2] = np.where(denom > 0, e2[:2] * yd[:, :2] / denom, 0.0)
        rem = 1.0 - ((xd[:, :2] / e[:2]) ** 2).sum(axis=1)
        ok = rem >= 0
        xd[ok, 2] = e[2] * np.sqrt(rem[ok])
        xd[~ok] = x[deg][~ok]
        x[deg] = xd
    d = np.linalg.norm(x - y, axis=1)
    return np.where(inside, -d, d)


@dataclass(frozen=True)
class SmoothUnion(AnalyticSDF):
    a: AnalyticSDF
    b: AnalyticSDF
    k: float = 0.1

    def __post_init__(self):
        _positive("blend radius", self.k)

    def __call__(self, p):
        da, db = self.a(p), self.b(p)
        h = np.clip(0.5 + 0.5 * (db - da) / self.k, 0.0, 1.0)
        return da * h + db * (1.0 - h) - self.k * h * (1.0 - h)


@dataclass(frozen=True)
class Difference(AnalyticSDF):
    """``a`` with ``b`` carved out."""

    a: AnalyticSDF
    b: AnalyticSDF

    def __call__(self, p):
        return np.maximum(self.a(p), -self.b(p))


@dataclass(frozen=True)
class Union(AnalyticSDF):
    parts: tuple

    def __call__(self, p):
        return np.min(np.stack([s(p) for s in self.parts]), axis=0)


def two_lobe(axes_a, center_a, axes_b, center_b, k: float = 0.1) -> SmoothUnion:
    return SmoothUnion(Ellipsoid(tuple(axes_a), tuple(center_a)), Ellipsoid(tuple(axes_b), tuple(center_b)), k)


def analytic_sdf(kind: str, **params) -> AnalyticSDF:
    """Build an oracle field: ``sphere(radius)``, ``ellipsoid(axes)``, ``box(half_extents)``, ``two-lobe(...)``."""
    if kind == "sphere":
        return Sphere(float(params["radius"]), tuple(params.get("center", (0.0, 0.0, 0.0))))
    if kind == "ellipsoid":
        return Ellipsoid(tuple(map(float, params["axes"])), tuple(params.get("center", (0.0, 0.0, 0.0))))
    if kind == "box":
        return Box(tuple(map(float, params["half_extents"])), tuple(params.get("center", (0.0, 0.0, 0.0))))
    if kind in ("two-lobe", "two_lobe"):
        return two_lobe(params["axes_a"], params["center_a"], params["axes_b"], params["center_b"],
                        params.get("k", 0.1))
    raise ParameterError(f"unknown analytic shape {kind!r}")
