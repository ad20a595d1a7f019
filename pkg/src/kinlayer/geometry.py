"""Convex boundary curves r(theta) and the boundary-fitted coordinates.

A point near the boundary is written x = x0(theta) - n * nrm(theta), with
x0 = r(theta)(cos theta, sin theta) and nrm the outward unit normal, so n is
the distance to the boundary.  Velocities are rotated into the pair
(va, vb) = (-w.nrm, w.tan): va > 0 points into the domain.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_SAMPLE = 4096


@dataclass(frozen=True)
class BoundaryCurve:
    """r(theta) = sum_k a_k cos(k theta) + b_k sin(k theta), k = 0..K."""

    cos: np.ndarray
    sin: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.cos, dtype=float))
        b = np.atleast_1d(np.asarray(self.sin, dtype=float))
        n = max(a.size, b.size)
        a = np.pad(a, (0, n - a.size))
        b = np.pad(b, (0, n - b.size))
        b[0] = 0.0
        object.__setattr__(self, "cos", a)
        object.__setattr__(self, "sin", b)
        th = np.linspace(0.0, 2.0 * np.pi, N_SAMPLE, endpoint=False)
        if np.min(self.r(th)) <= 0:
            raise ValueError("r(theta) must stay positive")
        kap = self._kappa(th)
        if np.min(kap) <= 0:
            raise ValueError(f"curve is not convex (min curvature {np.min(kap):.3g})")
        object.__setattr__(self, "kappa_min", float(np.min(kap)))
        object.__setattr__(self, "R_min", float(np.min(1.0 / kap)))

    def _deriv(self, theta, order: int):
        th = np.asarray(theta, dtype=float)
        k = np.arange(self.cos.size)
        ph = np.multiply.outer(th, k)
        # d^m/dth^m of cos(k th) = k^m cos(k th + m pi/2)
        c = np.cos(ph + 0.5 * np.pi * order) @ (self.cos * k ** order)
        s = np.sin(ph + 0.5 * np.pi * order) @ (self.sin * k ** order)
        return c + s

    def r(self, theta):
        return self._deriv(theta, 0)

    def dr(self, theta):
        return self._deriv(theta, 1)

    def d2r(self, theta):
        return self._deriv(theta, 2)

    def d3r(self, theta):
        return self._deriv(theta, 3)

    def _kappa(self, theta):
        r, r1, r2 = self.r(theta), self.dr(theta), self.d2r(theta)
        return (r * r + 2 * r1 * r1 - r * r2) / (r * r + r1 * r1) ** 1.5

    def speed(self, theta):
        """|dx0/dtheta| = (r^2 + r'^2)^{1/2}."""
        return np.hypot(self.r(theta), self.dr(theta))

    def point(self, theta):
        r = self.r(theta)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)

    def tangent(self, theta):
        """Unit tangent in the direction of increasing theta."""
        r, r1 = self.r(theta), self.dr(theta)
        c, s = np.cos(theta), np.sin(theta)
        p = np.hypot(r, r1)
        return np.stack([(r1 * c - r * s) / p, (r1 * s + r * c) / p], axis=-1)

    def normal(self, theta):
        """Outward unit normal."""
        t = self.tangent(theta)
        return np.stack([t[..., 1], -t[..., 0]], axis=-1)

    def radius_derivative(self, theta):
        """dR_kappa/dtheta from the analytic third derivative of r."""
        r, r1, r2, r3 = self.r(theta), self.dr(theta), self.d2r(theta), self.d3r(theta)
        q = r * r + r1 * r1
        num = q ** 1.5
        den = r * r + 2 * r1 * r1 - r * r2
        dnum = 3.0 * np.sqrt(q) * (r * r1 + r1 * r2)
        dden = 2 * r * r1 + 3 * r1 * r2 - r * r3
        return (dnum * den - num * dden) / den ** 2


def circle(radius: float = 1.0) -> BoundaryCurve:
    return BoundaryCurve(np.array([radius]))


def from_fourier(cos, sin=()) -> BoundaryCurve:
    return BoundaryCurve(np.asarray(cos, dtype=float),
                         np.asarray(sin if len(sin) else [0.0], dtype=float))


def curvature(curve: BoundaryCurve, theta):
    """(kappa, R_kappa) at theta."""
    kap = curve._kappa(theta)
    if np.any(kap <= 0):
        raise ValueError("non-convex point on curve")
    return kap, 1.0 / kap


def from_local(curve: BoundaryCurve, depth, theta):
    depth = np.asarray(depth, dtype=float)
    if np.any(depth < 0) or np.any(depth >= curve.R_min):
        raise ValueError(f"depth must lie in [0, R_min={curve.R_min:.4g})")
    return curve.point(theta) - depth[..., None] * curve.normal(theta)


def to_local(curve: BoundaryCurve, x, tol: float = 1e-13, max_iter: int = 50):
    """Invert from_local by Newton's method; returns (depth, theta)."""
    x = np.asarray(x, dtype=float)
    th = np.arctan2(x[..., 1], x[..., 0])
    dep = curve.r(th) - np.hypot(x[..., 0], x[..., 1])
    for _ in range(max_iter):
        res = curve.point(th) - dep[..., None] * curve.normal(th) - x
        kap = curve._kappa(th)
        jt = curve.tangent(th) * (curve.speed(th) * (1.0 - kap * dep))[..., None]
        jn = -curve.normal(th)
        det = jn[..., 0] * jt[..., 1] - jn[..., 1] * jt[..., 0]
        d_dep = (res[..., 0] * jt[..., 1] - res[..., 1] * jt[..., 0]) / det
        d_th = (jn[..., 0] * res[..., 1] - jn[..., 1] * res[..., 0]) / det
        dep, th = dep - d_dep, th - d_th
        if np.all(np.abs(d_dep) + np.abs(d_th) < tol):
            break
    else:
        raise ValueError("Newton inversion did not converge; point outside the collar?")
    if np.any(dep < -1e-12) or np.any(dep >= curve.R_min):
        raise ValueError("point outside the boundary collar")
    # rounding can leave boundary points a hair outside
    dep = np.maximum(dep, 0.0)
    return dep, np.mod(th, 2.0 * np.pi)


def rotate_velocity(curve: BoundaryCurve, theta, w):
    """(va, vb) = (-w.n, w.t); orthogonal, va > 0 is inflow."""
    w = np.asarray(w, dtype=float)
    n, t = curve.normal(theta), curve.tangent(theta)
    return -np.sum(w * n, axis=-1), np.sum(w * t, axis=-1)


def unrotate_velocity(curve: BoundaryCurve, theta, va, vb):
    n, t = curve.normal(theta), curve.tangent(theta)
    return -np.asarray(va)[..., None] * n + np.asarray(vb)[..., None] * t


def transport_coefficients(curve: BoundaryCurve, depth, theta, va, vb):
    """Coefficients of w.grad_x in the variables (depth, theta, va, vb).

    Returns (c_depth, c_theta, c_va, c_vb) with
    w.grad = va d_depth + vb R/((R - depth) P) d_theta
             - vb^2/(R - depth) d_va + va vb/(R - depth) d_vb,
    R the radius of curvature and P = (r^2 + r'^2)^{1/2}.
    """
    _, R = curvature(curve, theta)
    P = curve.speed(theta)
    h = R - np.asarray(depth)
    return (np.asarray(va) + 0 * h, vb * R / (h * P), -vb * vb / h, va * vb / h)
