"""Linearized hard-sphere operator L = nu I - K on a polar velocity grid.

K is assembled row by row from the closed-form truncated kernel (see
``_kernel``): row i holds the integrals of k(v_i, u) against the
interpolation basis of the grid, so K acts exactly on any field the basis
reproduces.  Rotational invariance means only one angle per speed needs to be
integrated; the other rows are cyclic shifts.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import eigh, lu_factor, lu_solve
from scipy.sparse import csr_matrix
from scipy.special import ive

from . import _kernel
from .velocity import VelocityGrid, sqrt_maxwellian

log = logging.getLogger(__name__)

_MAGIC = b"KLOP"
_VERSION = 1
GRAM_COND_MAX = 1e8


class NullSpaceError(ValueError):
    """Raised when a field that must be orthogonal to ker L is not."""


def collision_frequency(v, q0: float = 1.0):
    """Untruncated nu(v) = 4 q0 int mu(u) |v - u| du, in closed form.

    ``v`` is a velocity pair (last axis of length 2) or a speed.  With
    x = |v|^2/4 the integral is pi e^{-x}[(1 + 2x) I0(x) + 2x I1(x)]; the
    scaled Bessel functions keep large speeds finite.
    """
    v = np.asarray(v, dtype=float)
    s2 = np.sum(v * v, axis=-1) if v.ndim and v.shape[-1] == 2 else v * v
    x = 0.25 * s2
    return 4.0 * np.pi * q0 * ((1.0 + 0.5 * s2) * ive(0, x) + 0.5 * s2 * ive(1, x))


def null_basis(grid: VelocityGrid) -> np.ndarray:
    """psi_0..psi_3 on the nodes, shape (4, N)."""
    m = sqrt_maxwellian(grid.v1, grid.v2)
    s2 = grid.s ** 2
    return np.vstack([m, m * grid.v1, m * grid.v2, m * (s2 - 2.0) * 0.5])


def default_quadrature(grid: VelocityGrid) -> tuple[int, int]:
    """(n_seg, n_ang) for the ray quadrature; angular count dominates accuracy."""
    return max(32, 2 * grid.n_r), 16 * grid.n_phi


def _assemble(grid: VelocityGrid, q0: float, n_seg: int, n_ang: int):
    R = grid.vmax
    nr, nphi = grid.n_r, grid.n_phi
    phi0 = grid.angles[0]
    nu = np.empty(nr)
    Kb = np.empty((nr, nr, nphi))
    for ir, s in enumerate(grid.speeds):
        v1, v2 = s * np.cos(phi0), s * np.sin(phi0)
        x1, x2, w = _kernel.ray_quadrature(v1, v2, R, n_seg, n_ang)
        kw = _kernel.kernel(v1, v2, x1, x2, R, q0) * w
        mu = np.exp(-0.5 * (x1 * x1 + x2 * x2)) * _kernel.INV_SQRT2PI
        nu[ir] = q0 * np.sum(w * mu * np.hypot(x1 - v1, x2 - v2)
                             * _kernel.loss_fraction(v1, v2, x1, x2, R))
        lag = _kernel.lagrange_basis(grid.speeds, np.hypot(x1, x2))
        trig = _kernel.trig_basis(nphi, np.arctan2(x2, x1))
        Kb[ir] = (lag * kw[None, :]) @ trig.T
    K = np.empty((grid.size, grid.size))
    for ir in range(nr):
        for ia in range(nphi):
            K[ir * nphi + ia] = np.roll(Kb[ir], ia, axis=1).ravel()
    return np.repeat(nu, nphi), K


def _null_preserving_symmetrize(K: np.ndarray, w: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Weighted-symmetric version of K that keeps K psi unchanged.

    Rows of K are accurate; the weighted adjoint is not, since it divides
    column errors by tiny weights near v = 0.  The least-squares symmetric
    neighbour S_ij = w_j (K_ij + K_ji) / (w_i + w_j) avoids that division.
    A symmetric correction built from D = K - S and the W-orthogonal
    projector P then restores S psi = K psi.
    """
    S = (K + K.T) * w[None, :] / (w[:, None] + w[None, :])
    D = K - S
    gram = (psi * w) @ psi.T
    P = psi.T @ np.linalg.solve(gram, psi * w)
    DP = D @ P
    A = DP - P @ DP
    adj = lambda M: (M.T * w[None, :]) / w[:, None]
    return S + A + adj(A) + 0.5 * P @ (DP + adj(D) @ P)


def _cache_name(grid: VelocityGrid, q0: float, n_seg: int, n_ang: int) -> str:
    return f"op_v{grid.vmax:g}_r{grid.n_r}_p{grid.n_phi}_q{q0:g}_s{n_seg}_a{n_ang}.bin"


def save_operator(path, op: "LinearizedOperator") -> None:
    g = op.grid
    head = struct.pack("<4sI6d", _MAGIC, _VERSION, g.vmax, g.n_r, g.n_phi,
                       op.q0, op.quad[0], op.quad[1])
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(op.nu, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(op.Kmat, dtype="<f8").tobytes())


def load_operator(path, grid: VelocityGrid) -> "LinearizedOperator":
    data = Path(path).read_bytes()
    size = struct.calcsize("<4sI6d")
    magic, ver, vmax, nr, nphi, q0, n_seg, n_ang = struct.unpack("<4sI6d", data[:size])
    if magic != _MAGIC or ver != _VERSION:
        raise ValueError(f"{path}: not an operator cache file")
    if (vmax, int(nr), int(nphi)) != (grid.vmax, grid.n_r, grid.n_phi):
        raise ValueError(f"{path}: cached grid does not match")
    n = grid.size
    arr = np.frombuffer(data[size:], dtype="<f8")
    if arr.size != n + n * n:
        raise ValueError(f"{path}: truncated cache file")
    return LinearizedOperator(grid, arr[:n].copy(), arr[n:].reshape(n, n).copy(),
                              q0, (int(n_seg), int(n_ang)))


def build_operator(grid: VelocityGrid, q0: float = 1.0, n_seg: int | None = None,
                   n_ang: int | None = None, cache_dir=None) -> "LinearizedOperator":
    """Assemble (or load from ``cache_dir``) the linearized operator on ``grid``."""
    if q0 <= 0:
        raise ValueError("q0 must be positive")
    ds, da = default_quadrature(grid)
    n_seg, n_ang = n_seg or ds, n_ang or da
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / _cache_name(grid, q0, n_seg, n_ang)
        if path.exists():
            return load_operator(path, grid)
    nu, K = assemble_K(grid, q0, n_seg, n_ang)
    op = LinearizedOperator(grid, nu, K, float(q0), (n_seg, n_ang))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_operator(path, op)
    return op


def assemble_K(grid: VelocityGrid, q0: float = 1.0, n_seg: int | None = None,
               n_ang: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Truncated collision frequency and symmetrized K matrix on ``grid``."""
    ds, da = default_quadrature(grid)
    nu, K = _assemble(grid, q0, n_seg or ds, n_ang or da)
    return nu, _null_preserving_symmetrize(K, grid.weights, null_basis(grid))


# --- bilinear evaluation of grid fields at off-grid velocities -------------

def bilinear(f, grid: VelocityGrid, x1, x2) -> np.ndarray:
    """Evaluate a node field at arbitrary velocities (bilinear in speed and angle)."""
    x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
    idx, wts = _stencil(grid, x1.ravel(), x2.ravel())
    vals = np.asarray(f, dtype=float)[idx]
    return np.sum(vals * wts, axis=1).reshape(x1.shape)


def _stencil(grid: VelocityGrid, x1, x2):
    """Bilinear stencil (indices, weights), each of shape (len(x), 4)."""
    nphi = grid.n_phi
    s = np.hypot(x1, x2)
    a = np.arctan2(x2, x1) / grid.dphi - 0.5
    a0 = np.floor(a)
    ta = a - a0
    b0 = a0.astype(int) % nphi
    b1 = (b0 + 1) % nphi
    j = np.clip(np.searchsorted(grid.speeds, s) - 1, 0, grid.n_r - 2)
    tr = (s - grid.speeds[j]) / (grid.speeds[j + 1] - grid.speeds[j])
    idx = np.stack([j * nphi + b0, j * nphi + b1, (j + 1) * nphi + b0, (j + 1) * nphi + b1], 1)
    wts = np.stack([(1 - tr) * (1 - ta), (1 - tr) * ta, tr * (1 - ta), tr * ta], 1)
    return idx, wts


def _gain_tables(grid: VelocityGrid, wmu, n_omega: int):
    """Per target speed: sparse interpolation at u* and v* plus collision weights.

    Targets at the first angle only; other angles follow by rotating the
    field, which for a uniform angular grid is an index shift.
    """
    R = grid.vmax
    u1, u2 = grid.v1, grid.v2
    beta = (np.arange(n_omega) + 0.5) * 2.0 * np.pi / n_omega
    cb, sb = np.cos(beta), np.sin(beta)
    tables = []
    for s in grid.speeds:
        v1, v2 = s * np.cos(grid.angles[0]), s * np.sin(grid.angles[0])
        d1, d2 = v1 - u1, v2 - u2
        dist = np.hypot(d1, d2)
        safe = np.where(dist > 0, dist, 1.0)
        e1, e2 = d1 / safe, d2 / safe
        o1 = cb[None, :] * e1[:, None] - sb[None, :] * e2[:, None]
        o2 = cb[None, :] * e2[:, None] + sb[None, :] * e1[:, None]
        p = dist[:, None] * cb[None, :]
        a1, a2 = u1[:, None] + o1 * p, u2[:, None] + o2 * p
        b1, b2 = v1 - o1 * p, v2 - o2 * p
        keep = (a1 ** 2 + a2 ** 2 <= R * R) & (b1 ** 2 + b2 ** 2 <= R * R) & (p != 0)
        coef = (wmu[:, None] * np.abs(p))[keep] * (2.0 * np.pi / n_omega)
        mats = []
        for x1, x2 in ((a1[keep], a2[keep]), (b1[keep], b2[keep])):
            idx, wts = _stencil(grid, x1, x2)
            rows = np.repeat(np.arange(x1.size), 4)
            mats.append(csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(x1.size, grid.size)))
        tables.append((coef, mats[0], mats[1]))
    return tables


def _gain_callable(ef, eg, grid: VelocityGrid, wmu, n_omega: int) -> np.ndarray:
    R = grid.vmax
    u1, u2 = grid.v1, grid.v2
    beta = (np.arange(n_omega) + 0.5) * 2.0 * np.pi / n_omega
    cb, sb = np.cos(beta), np.sin(beta)
    out = np.empty(grid.size)
    for i, (v1, v2) in enumerate(zip(u1, u2)):
        d1, d2 = v1 - u1, v2 - u2
        dist = np.hypot(d1, d2)
        safe = np.where(dist > 0, dist, 1.0)
        e1, e2 = d1 / safe, d2 / safe
        # omega at angle beta from (v - u), so omega.(v - u) = |v - u| cos(beta)
        o1 = cb[None, :] * e1[:, None] - sb[None, :] * e2[:, None]
        o2 = cb[None, :] * e2[:, None] + sb[None, :] * e1[:, None]
        p = dist[:, None] * cb[None, :]
        a1, a2 = u1[:, None] + o1 * p, u2[:, None] + o2 * p
        b1, b2 = v1 - o1 * p, v2 - o2 * p
        keep = (a1 ** 2 + a2 ** 2 <= R * R) & (b1 ** 2 + b2 ** 2 <= R * R)
        gain = 0.5 * (ef(a1, a2) * eg(b1, b2) + eg(a1, a2) * ef(b1, b2))
        out[i] = wmu @ np.sum(np.where(keep, gain, 0.0) * np.abs(p), axis=1)
    return out * (2.0 * np.pi / n_omega)


@dataclass(frozen=True)
class LinearizedOperator:
    grid: VelocityGrid
    nu: np.ndarray = field(repr=False)
    Kmat: np.ndarray = field(repr=False)
    q0: float = 1.0
    quad: tuple = (0, 0)
    n_omega: int = 64

    @cached_property
    def psi(self) -> np.ndarray:
        return null_basis(self.grid)

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense L = diag(nu) - K."""
        return np.diag(self.nu) - self.Kmat

    def apply(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return self.nu * f - f @ self.Kmat.T

    def apply_K(self, f) -> np.ndarray:
        return np.asarray(f, dtype=float) @ self.Kmat.T

    # --- null space ---------------------------------------------------
    @cached_property
    def _gram(self) -> np.ndarray:
        w = self.grid.weights
        gram = (self.psi * w) @ self.psi.T
        cond = np.linalg.cond(gram)
        if cond > GRAM_COND_MAX:
            raise NullSpaceError(f"Gram matrix of psi has condition {cond:.3g}; grid too coarse")
        return gram

    @cached_property
    def projector(self) -> np.ndarray:
        """Dense W-orthogonal projector onto span psi."""
        return self.psi.T @ np.linalg.solve(self._gram, self.psi * self.grid.weights)

    def null_coefficients(self, f) -> np.ndarray:
        """Coefficients (a, b1, b2, c) of P f; works on stacked fields (..., N)."""
        rhs = (np.asarray(f, dtype=float) * self.grid.weights) @ self.psi.T
        return np.linalg.solve(self._gram, rhs.T).T

    def project_null(self, f):
        c = self.null_coefficients(f)
        return c, c @ self.psi

    def project_perp(self, f) -> np.ndarray:
        return np.asarray(f, dtype=float) - self.project_null(f)[1]

    # --- diagnostics --------------------------------------------------
    def null_residuals(self) -> np.ndarray:
        w = self.grid.weights
        r = self.apply(self.psi)
        return np.sqrt((r * r) @ w)

    def asymmetry(self) -> float:
        """max |W L - (W L)^T| relative to max |W L|."""
        WL = self.matrix * self.grid.weights[:, None]
        return float(np.abs(WL - WL.T).max() / np.abs(WL).max())

    def eigenvalues(self) -> np.ndarray:
        """Spectrum of L in the weighted inner product, ascending."""
        sw = np.sqrt(self.grid.weights)
        A = self.matrix * sw[:, None] / sw[None, :]
        return eigh(0.5 * (A + A.T), eigvals_only=True)

    # --- pseudo-inverse -----------------------------------------------
    @cached_property
    def _perp_lu(self):
        P = self.projector
        Q = np.eye(self.grid.size) - P
        return lu_factor(Q @ self.matrix @ Q + P)

    def pseudo_inverse(self, f, tol_null: float = 1e-6) -> np.ndarray:
        """Solve L g = f with P g = 0; f must be orthogonal to ker L.

        ``tol_null`` bounds the null-space part of f relative to max(1, |f|).
        """
        f = np.asarray(f, dtype=float)
        _, pf = self.project_null(f)
        w = self.grid.weights
        pn = np.sqrt((pf * pf) @ w)
        scale = np.maximum(1.0, np.sqrt((f * f) @ w))
        if np.any(pn > tol_null * scale):
            raise NullSpaceError(f"right-hand side has null-space component {np.max(pn):.3g}")
        g = lu_solve(self._perp_lu, (f - pf).T).T
        return self.project_perp(g)

    # --- nonlinear term -----------------------------------------------
    @cached_property
    def _wmu(self) -> np.ndarray:
        g = self.grid
        return g.weights * np.exp(-0.5 * g.s ** 2) * _kernel.INV_SQRT2PI

    @cached_property
    def _loss_matrix(self) -> np.ndarray:
        g = self.grid
        v1, v2 = g.v1, g.v2
        d = np.hypot(v1[:, None] - v1[None, :], v2[:, None] - v2[None, :])
        A = _kernel.loss_fraction(v1[:, None], v2[:, None], v1[None, :], v2[None, :], g.vmax)
        return d * A * self._wmu[None, :]

    def _phi(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self.grid.size,):
            raise ValueError(f"field has shape {f.shape}, grid has {self.grid.size} nodes")
        return f / sqrt_maxwellian(self.grid.v1, self.grid.v2)

    def _ratio(self, f):
        """x1, x2 -> f / mu^{1/2} for a callable or a node field."""
        if callable(f):
            return lambda x1, x2: f(x1, x2) / sqrt_maxwellian(x1, x2)
        phi = self._phi(f)
        return lambda x1, x2: bilinear(phi, self.grid, x1, x2)

    @cached_property
    def _tables(self):
        return _gain_tables(self.grid, self._wmu, self.n_omega)

    def _gain_rotated(self, pf, pg) -> np.ndarray:
        grid = self.grid
        nphi = grid.n_phi
        shift = (np.arange(nphi)[None, :] + np.arange(nphi)[:, None]) % nphi  # [b, ia]

        def rolled(phi):
            P = grid.as_polar(phi)
            return P[:, shift].reshape(grid.size, nphi)

        Ff, Fg = rolled(pf), rolled(pg)
        out = np.empty((grid.n_r, nphi))
        for ir, (coef, A, B) in enumerate(self._tables):
            fa, ga, fb, gb = A @ Ff, A @ Fg, B @ Ff, B @ Fg
            out[ir] = coef @ (0.5 * (fa * gb + ga * fb))
        return out.ravel()

    def gamma_raw(self, f, g) -> np.ndarray:
        """Symmetrized Gamma[f, g] before the conservation correction.

        With phi = f / mu^{1/2}, chi = g / mu^{1/2},
        Gamma(v) = q0 mu^{1/2}(v) int int |omega.(v-u)| mu(u)
                   [phi(u*) chi(v*) - phi(u) chi(v)] domega du,
        restricted to collisions with u, u*, v* in the disc.  ``f`` and ``g``
        are node values or callables of (v1, v2); node values are
        interpolated bilinearly in (speed, angle).
        """
        grid = self.grid
        if callable(f) or callable(g):
            ef, eg = self._ratio(f), self._ratio(g)
            pf, pg = ef(grid.v1, grid.v2), eg(grid.v1, grid.v2)
            gain = _gain_callable(ef, eg, grid, self._wmu, self.n_omega)
        else:
            pf, pg = self._phi(f), self._phi(g)
            gain = self._gain_rotated(pf, pg)
        M = self._loss_matrix
        loss = 0.5 * (pg * (M @ pf) + pf * (M @ pg))
        return self.q0 * sqrt_maxwellian(grid.v1, grid.v2) * (gain - loss)

    def gamma_matrix(self, f) -> np.ndarray:
        """Dense matrix G with G @ g == gamma(f, g) for node fields g."""
        grid = self.grid
        nphi, N = grid.n_phi, grid.size
        shift = (np.arange(nphi)[None, :] + np.arange(nphi)[:, None]) % nphi
        pf = self._phi(f)
        Ff = grid.as_polar(pf)[:, shift].reshape(N, nphi)
        # column node (ir2, b) of the rotated field is node (ir2, (b + ia) % nphi)
        cols = (np.arange(grid.n_r)[:, None, None] * nphi + shift[None, :, :]).reshape(N, nphi)
        G = np.zeros((N, N))
        for ir, (coef, A, B) in enumerate(self._tables):
            R = 0.5 * (B.T @ (coef[:, None] * (A @ Ff)) + A.T @ (coef[:, None] * (B @ Ff)))
            for ia in range(nphi):
                np.add.at(G[ir * nphi + ia], cols[:, ia], R[:, ia])
        M = self._loss_matrix
        G -= 0.5 * (np.diag(M @ pf) + pf[:, None] * M)
        smu = sqrt_maxwellian(grid.v1, grid.v2)
        G = self.q0 * smu[:, None] * G / smu[None, :]
        return G - self.projector @ G

    def gamma(self, f, g, return_defect: bool = False):
        """Gamma[f, g] with its null-space component removed.

        The quadrature leaves a small component along psi; removing it is the
        least-squares correction that restores the collision invariants.
        With ``return_defect`` the removed coefficients are returned too.
        """
        raw = self.gamma_raw(f, g)
        coef, pr = self.project_null(raw)
        out = raw - pr
        if return_defect:
            return out, coef
        return out
