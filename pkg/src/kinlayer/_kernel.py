"""Closed-form pieces of the truncated hard-sphere kernel.

Collisions are kept only when all four velocities (u, v, u*, v*) lie in the
disc |.| <= R.  That set is invariant under the collision symmetries, so the
truncated operator keeps the exact collision invariants on the disc.

Writing p = w - v and letting q run over the line through 0 orthogonal to p,
the gain part of K becomes a line integral of a Gaussian, clipped to the
chord inside the disc.  Both gain kernels only depend on
``a_v = v.n``, ``a_w = w.n`` (n = p/|p|) and ``c = v.t = w.t`` (t = n rotated).
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

SQRT2 = np.sqrt(2.0)
SQRTPI2 = np.sqrt(np.pi / 2.0)
INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _abs_cos_primitive(beta):
    # F' = |cos beta|, F(beta + 2pi) = F(beta) + 4
    k = np.floor((beta + 0.5 * np.pi) / np.pi)
    sign = 1.0 - 2.0 * np.mod(k, 2.0)
    return 2.0 * k + sign * np.sin(beta)


def loss_fraction(v1, v2, u1, u2, R):
    """A(v, u) = int_{S^1} |cos b| 1{u*, v* in disc} db  (equals 4 untruncated)."""
    m1, m2 = 0.5 * (u1 + v1), 0.5 * (u2 + v2)
    d1, d2 = v1 - u1, v2 - u2
    dm = np.hypot(m1, m2)
    dd = np.hypot(d1, d2)
    num = R * R - dm * dm - 0.25 * dd * dd
    with np.errstate(divide="ignore", invalid="ignore"):
        c = num / (dd * dm)
    full = ~(c < 1.0)  # also catches nan/inf from dm == 0 or dd == 0
    c = np.where(full, 0.5, np.clip(c, 0.0, 1.0))
    a = np.arccos(c)
    alpha = np.arctan2(d1 * m2 - d2 * m1, d1 * m1 + d2 * m2)
    length = 0.5 * (np.pi - 2.0 * a)
    total = np.zeros(np.broadcast(c, alpha).shape)
    for j in range(4):
        start = 0.5 * (a + alpha) + 0.5 * j * np.pi
        total = total + _abs_cos_primitive(start + length) - _abs_cos_primitive(start)
    return np.where(full, 4.0, total)


def _half_moments(c, D):
    """J = int_{-D}^{D} |t - c| exp(-t^2/2) dt."""
    cc = np.clip(c, -D, D)
    g0_lo = SQRTPI2 * (erf(cc / SQRT2) - erf(-D / SQRT2))
    g0_hi = SQRTPI2 * (erf(D / SQRT2) - erf(cc / SQRT2))
    e_d = np.exp(-0.5 * D * D)
    e_c = np.exp(-0.5 * cc * cc)
    g1_lo = e_d - e_c
    g1_hi = e_c - e_d
    return (c * g0_lo - g1_lo) + (g1_hi - c * g0_hi)


def kernel(v1, v2, w1, w2, R, q0=1.0):
    """Symmetric kernel k(v, w) of K = K2 - K1 for the truncated model.

    Diagonal entries (w == v) are returned as 0; callers handle the
    integrable 1/|w - v| singularity separately.
    """
    p1, p2 = w1 - v1, w2 - v2
    dist = np.hypot(p1, p2)
    safe = np.where(dist > 0, dist, 1.0)
    n1, n2 = p1 / safe, p2 / safe
    av = v1 * n1 + v2 * n2
    aw = w1 * n1 + w2 * n2
    c = -v1 * n2 + v2 * n1
    amax2 = np.maximum(av * av, aw * aw)
    D = np.sqrt(np.maximum(R * R - amax2, 0.0))
    base = np.exp(-0.25 * (av * av + aw * aw))
    kb = 2.0 * base * erf(D / SQRT2)
    ka = 2.0 / safe * INV_SQRT2PI * base * _half_moments(c, D)
    loss = dist * loss_fraction(v1, v2, w1, w2, R) * np.exp(
        -0.25 * (v1 * v1 + v2 * v2 + w1 * w1 + w2 * w2)) * INV_SQRT2PI
    k = q0 * (ka + kb - loss)
    return np.where(dist > 0, k, 0.0)


def kernel_parts(v1, v2, w1, w2, R):
    """(k_a, k_b, k_1) separately, for testing against the defining integrals."""
    p1, p2 = w1 - v1, w2 - v2
    dist = np.hypot(p1, p2)
    n1, n2 = p1 / dist, p2 / dist
    av = v1 * n1 + v2 * n2
    aw = w1 * n1 + w2 * n2
    c = -v1 * n2 + v2 * n1
    D = np.sqrt(np.maximum(R * R - np.maximum(av * av, aw * aw), 0.0))
    base = np.exp(-0.25 * (av * av + aw * aw))
    kb = 2.0 * base * erf(D / SQRT2)
    ka = 2.0 / dist * INV_SQRT2PI * base * _half_moments(c, D)
    k1 = dist * loss_fraction(v1, v2, w1, w2, R) * np.exp(
        -0.25 * (v1 * v1 + v2 * v2 + w1 * w1 + w2 * w2)) * INV_SQRT2PI
    return ka, kb, k1


def ray_quadrature(v1, v2, R, n_seg=32, n_ang=512):
    """Nodes/weights for integrals over |u| <= R in polar coordinates centred at v.

    Centring at v absorbs the 1/|u - v| singularity.  Each ray is split where
    the integrand loses smoothness: at r = -2 v.e (the gain chords switch
    which end point clips first) and at r = (R^2 - |v|^2)/(R + v.e) (loss
    fraction drops below 4 with a square-root onset, resolved by r ~ t^2).
    """
    alpha = (np.arange(n_ang) + 0.5) * 2.0 * np.pi / n_ang
    e1, e2 = np.cos(alpha), np.sin(alpha)
    b = v1 * e1 + v2 * e2
    vv = v1 * v1 + v2 * v2
    rmax = -b + np.sqrt(b * b - vv + R * R)
    r1 = np.clip(-2.0 * b, 0.0, rmax)
    r2 = np.clip((R * R - vv) / (R + b), 0.0, rmax)
    lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
    x, w = np.polynomial.legendre.leggauss(n_seg)
    t, wt = 0.5 * (x + 1.0), 0.5 * w

    def seg(a, d, clustered):
        lin_r = a[:, None] + d[:, None] * t[None]
        sq_r = a[:, None] + d[:, None] * t[None] ** 2
        lin_w = d[:, None] * wt[None]
        sq_w = d[:, None] * 2.0 * t[None] * wt[None]
        c = clustered[:, None]
        return np.where(c, sq_r, lin_r), np.where(c, sq_w, lin_w)

    parts = [seg(np.zeros_like(lo), lo, np.zeros_like(lo, dtype=bool)),
             seg(lo, hi - lo, r2 <= r1),
             seg(hi, rmax - hi, r2 >= r1)]
    r = np.concatenate([p[0] for p in parts], axis=1)
    wr = np.concatenate([p[1] for p in parts], axis=1)
    u1 = v1 + r * e1[:, None]
    u2 = v2 + r * e2[:, None]
    return u1.ravel(), u2.ravel(), (wr * r * (2.0 * np.pi / n_ang)).ravel()


def lagrange_basis(nodes, x):
    """Values of the Lagrange polynomials through ``nodes`` at ``x``: (len(nodes), len(x))."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    bw = 1.0 / np.prod(diff, axis=1)
    d = x[None, :] - nodes[:, None]
    hit = d == 0.0
    d[hit] = 1.0
    t = bw[:, None] / d
    out = t / t.sum(axis=0)[None, :]
    cols = hit.any(axis=0)
    out[:, cols] = hit[:, cols]
    return out


def trig_basis(n, phi):
    """Periodic interpolation basis on n equispaced (midpoint) angles: (n, len(phi))."""
    ang = (np.arange(n) + 0.5) * 2.0 * np.pi / n
    d = np.mod(np.asarray(phi)[None, :] - ang[:, None] + np.pi, 2.0 * np.pi) - np.pi
    small = np.abs(d) < 1e-13
    val = np.sin(0.5 * n * d) / (n * np.tan(0.5 * np.where(small, 1.0, d)))
    return np.where(small, 1.0, val)
