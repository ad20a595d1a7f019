"""Leading-order fluid fields, the boundary Maxwellian expansion and the
epsilon scan of the kinetic residual of the constructed approximation.

Fields are evaluated on the unit disk.  Kinetic quantities at a spatial
point are node arrays on the velocity grid written in a local orthonormal
frame (e1, e2): the Cartesian frame in the interior and (-n, t) near the
boundary, so grid coordinates (v1, v2) are (va, vb) there.  L and Gamma are
rotation and reflection invariant, so only the macroscopic coefficients
(rho, u . e1, u . e2, theta) and their derivatives change with the frame.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import milne
from .characteristics import MilneGeometry
from .collision import LinearizedOperator, NullSpaceError
from .regularity import velocity_weight
from .velocity import VelocityGrid, maxwellian, sqrt_maxwellian

log = logging.getLogger(__name__)

SCHEMA = "kinlayer.expansion/1"
HALF_VMAX = 12.0


# --- boundary Maxwellian ------------------------------------------------

@lru_cache(maxsize=4)
def half_space_rule(n_normal: int = 80, n_tangent: int = 160):
    """Tensor Gauss-Legendre nodes on the outgoing half plane va < 0.

    Returns (va, vb, w) with the weight |va| folded into w.
    """
    x, wx = np.polynomial.legendre.leggauss(n_normal)
    y, wy = np.polynomial.legendre.leggauss(n_tangent)
    t = 0.5 * HALF_VMAX * (x + 1.0)
    wt = 0.5 * HALF_VMAX * wx
    vb = HALF_VMAX * y
    wb = HALF_VMAX * wy
    va = -np.repeat(t, vb.size)
    w = np.repeat(wt * t, vb.size) * np.tile(wb, t.size)
    return va, np.tile(vb, t.size), w


def _outgoing_flux(f):
    """int_{va<0} f(va, vb) |va| dv for a callable f(va, vb) -> (..., K)."""
    va, vb, w = half_space_rule()
    return f(va, vb) @ w


def _as_local_u(u):
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != 2:
        raise ValueError("u must have a trailing axis of length 2 (ua, ub)")
    return u


def renormalized_density(u, theta):
    """First-order density making the outgoing flux of mu_1 vanish.

    ``u`` is (ua, ub) in the local frame, ua = -u.n; the outgoing flux of
    mu va is sqrt(pi/2) and that of mu (|v|^2 - 2)/2 is 1/2.
    """
    u = _as_local_u(u)
    return -0.5 * np.asarray(theta, dtype=float) + np.sqrt(0.5 * np.pi) * u[..., 0]


def _lambda1(a1, u, theta, va, vb):
    a1, th = np.asarray(a1)[..., None], np.asarray(theta)[..., None]
    ua, ub = u[..., 0:1], u[..., 1:2]
    return a1 + ua * va + ub * vb + th * 0.5 * (va * va + vb * vb - 2.0)


def _lambda2_free(u, theta, va, vb):
    """Second-order log-density term without its constant."""
    th = np.asarray(theta)[..., None]
    ua, ub = u[..., 0:1], u[..., 1:2]
    s2 = va * va + vb * vb
    return 0.5 * th * th * (1.0 - s2) - th * (ua * va + ub * vb) - 0.5 * (ua * ua + ub * ub)


def second_order_density(u, theta):
    """Constant of the second-order term fixed by the outgoing-flux condition."""
    u = _as_local_u(u)
    th = np.asarray(theta, dtype=float)
    a1 = renormalized_density(u, th)

    def integrand(va, vb):
        l1 = _lambda1(a1, u, th, va, vb)
        return maxwellian(va, vb) * (_lambda2_free(u, th, va, vb) + 0.5 * l1 * l1)

    return -_outgoing_flux(integrand)


def boundary_expansion_fields(u, theta):
    """Callables (va, vb) -> mu_1, mu_2 for local (u, theta) at boundary points."""
    u = _as_local_u(u)
    th = np.asarray(theta, dtype=float)
    a1 = renormalized_density(u, th)
    a2 = second_order_density(u, th)

    def mu1(va, vb):
        return sqrt_maxwellian(va, vb) * _lambda1(a1, u, th, va, vb)

    def mu2(va, vb):
        l1 = _lambda1(a1, u, th, va, vb)
        l2 = np.asarray(a2)[..., None] + _lambda2_free(u, th, va, vb)
        return sqrt_maxwellian(va, vb) * (l2 + 0.5 * l1 * l1)

    return mu1, mu2


def expand_boundary_maxwellian(rho_b1, u_b1, theta_b1, grid: VelocityGrid):
    """(mu_1, mu_2) on the grid nodes, with (M_b - mu) mu^{-1/2} = eps mu_1 + eps^2 mu_2 + ...

    ``u_b1`` is in the local frame (ua, ub).  The boundary Maxwellian is
    renormalized to unit outgoing flux at every order, so the density
    coefficients follow from (u_b1, theta_b1) and ``rho_b1`` drops out.
    """
    del rho_b1
    mu1, mu2 = boundary_expansion_fields(u_b1, theta_b1)
    return mu1(grid.v1, grid.v2), mu2(grid.v1, grid.v2)


def flux_compatibility(u, theta):
    """Outgoing flux int_{va<0} mu^{1/2} mu_k |va| for k = 1, 2."""
    mu1, mu2 = boundary_expansion_fields(u, theta)
    return (_outgoing_flux(lambda a, b: sqrt_maxwellian(a, b) * mu1(a, b)),
            _outgoing_flux(lambda a, b: sqrt_maxwellian(a, b) * mu2(a, b)))


def boundary_maxwellian(eps, u, theta, va, vb):
    """Exact M_b with temperature 1 + eps theta, velocity eps u, unit outgoing flux."""
    u = _as_local_u(u)
    T = 1.0 + eps * np.asarray(theta, dtype=float)[..., None]
    ua, ub = eps * u[..., 0:1], eps * u[..., 1:2]

    def shape(a, b):
        return np.exp(-((a - ua) ** 2 + (b - ub) ** 2) / (2.0 * T))

    return shape(va, vb) / _outgoing_flux(shape)[..., None]


@dataclass
class BoundaryData:
    """First-order boundary coefficients as functions of the boundary angle.

    ``u_b1`` returns Cartesian components with a trailing axis of length 2.
    """

    theta_b1: Callable
    u_b1: Callable | None = None
    rho_b1: Callable | None = None

    def values(self, theta):
        th = np.asarray(theta, dtype=float)
        T = np.broadcast_to(np.asarray(self.theta_b1(th), dtype=float), th.shape)
        U = np.zeros(th.shape + (2,)) if self.u_b1 is None else np.asarray(self.u_b1(th), float)
        R = np.zeros(th.shape) if self.rho_b1 is None else np.asarray(self.rho_b1(th), float)
        return R, U, T

    def local_u(self, theta):
        """(ua, ub) = (-u.n, u.t) on the unit circle."""
        th = np.asarray(theta, dtype=float)
        _, U, _ = self.values(th)
        n = np.stack([np.cos(th), np.sin(th)], -1)
        t = np.stack([-np.sin(th), np.cos(th)], -1)
        return np.stack([-np.sum(U * n, -1), np.sum(U * t, -1)], -1)


# --- fluid fields ------------------------------------------------------

class HydroFields:
    """rho, u, theta_T on the unit disk with derivatives.

    Coefficient arrays are ordered (rho, u1, u2, theta): ``coefficients`` is
    (n, 4), ``gradient`` (n, 2, 4) and ``hessian`` (n, 2, 2, 4).
    """

    branch = "abstract"
    M = 0.0
    P2 = 0.0

    def coefficients(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError

    def boussinesq_defect(self, x) -> float:
        c = self.coefficients(x)
        return float(np.max(np.abs(c[:, 0] + c[:, 3] - self.M)))

    def divergence(self, x):
        d = self.gradient(x)
        return d[:, 0, 1] + d[:, 1, 2]

    def normalization(self, grid: VelocityGrid, n_quad: int = 24) -> float:
        """int_disk int_v F_1 mu^{1/2} by Gauss quadrature in r and the grid in v."""
        x, w = disk_rule(n_quad)
        F = self.coefficients(x) @ _psi(grid)
        return float(w @ (F @ (grid.weights * sqrt_maxwellian(grid.v1, grid.v2))))


@lru_cache(maxsize=8)
def disk_rule(n: int = 24):
    """Gauss-Legendre in r times the trapezoid rule in angle on the unit disk."""
    y, wy = np.polynomial.legendre.leggauss(n)
    r, wr = 0.5 * (y + 1.0), 0.5 * wy * 0.5 * (y + 1.0)
    na = 2 * n
    a = 2.0 * np.pi * np.arange(na) / na
    x = np.stack([np.outer(r, np.cos(a)).ravel(), np.outer(r, np.sin(a)).ravel()], -1)
    return x, np.repeat(wr, na) * (2.0 * np.pi / na)


def _psi(grid: VelocityGrid):
    m = sqrt_maxwellian(grid.v1, grid.v2)
    return np.stack([m, m * grid.v1, m * grid.v2, m * 0.5 * (grid.v1 ** 2 + grid.v2 ** 2 - 2.0)])


class HarmonicFields(HydroFields):
    """u = 0 and theta_T the harmonic extension of boundary Fourier data.

    theta_T = c_0 + 2 Re sum_{k>=1} c_k z^k and rho = M - theta_T with M the
    disk mean of theta_T, which is c_0.
    """

    branch = "non-isothermal"

    def __init__(self, coeffs):
        self.c = np.asarray(coeffs, dtype=complex)
        self.M = float(self.c[0].real)
        self.P2 = 0.0

    def _series(self, x, order):
        z = np.asarray(x, dtype=float) @ np.array([1.0, 1j])
        k = np.arange(1, self.c.size)
        fac = np.ones_like(k, dtype=float)
        for j in range(order):
            fac = fac * (k - j)
        p = np.power.outer(z, np.maximum(k - order, 0)) * (k >= order)
        return 2.0 * p @ (self.c[1:] * fac)

    def theta_T(self, x):
        return self.c[0].real + self._series(x, 0).real

    def coefficients(self, x):
        th = self.theta_T(x)
        z = np.zeros_like(th)
        return np.stack([self.M - th, z, z, th], -1)

    def gradient(self, x):
        f1 = self._series(x, 1)
        g = np.stack([f1.real, -f1.imag], -1)
        out = np.zeros(g.shape[:-1] + (2, 4))
        out[..., 3] = g
        out[..., 0] = -g
        return out

    def hessian(self, x):
        f2 = self._series(x, 2)
        h = np.empty(f2.shape + (2, 2))
        h[..., 0, 0], h[..., 1, 1] = f2.real, -f2.real
        h[..., 0, 1] = h[..., 1, 0] = -f2.imag
        out = np.zeros(h.shape + (4,))
        out[..., 3] = h
        out[..., 0] = -h
        return out


class ManufacturedFields(HydroFields):
    """Caller-supplied closed-form fields; derivatives by central differences."""

    branch = "manufactured"

    def __init__(self, rho, u, theta, M=None, P2=0.0, step=1e-4):
        self._rho, self._u, self._theta = rho, u, theta
        self.step = step
        self.P2 = P2
        x, w = disk_rule(24)
        c = self.coefficients(x)
        self.M = float(w @ (c[:, 0] + c[:, 3]) / np.pi) if M is None else float(M)

    def coefficients(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.asarray(self._u(x), dtype=float)
        return np.stack([self._rho(x), u[:, 0], u[:, 1], self._theta(x)], -1)

    def gradient(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = self.step
        cols = []
        for e in np.eye(2):
            cols.append((self.coefficients(x + h * e) - self.coefficients(x - h * e)) / (2 * h))
        return np.stack(cols, 1)

    def hessian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = self.step
        rows = []
        for e in np.eye(2):
            rows.append((self.gradient(x + h * e) - self.gradient(x - h * e)) / (2 * h))
        H = np.stack(rows, 1)
        return 0.5 * (H + np.swapaxes(H, 1, 2))


def fourier_coefficients(func, n: int = 64, tol: float = 1e-13):
    """c_k, k >= 0, of a real 2pi-periodic function, trailing zeros trimmed."""
    th = 2.0 * np.pi * np.arange(n) / n
    c = np.fft.rfft(np.asarray(func(th), dtype=float)) / n
    keep = np.nonzero(np.abs(c) > tol * max(1.0, np.abs(c).max()))[0]
    return c[: (keep.max() + 1 if keep.size else 1)]


def solve_nsf_leading(boundary: BoundaryData, branch: str = "non-isothermal",
                      manufactured: dict | None = None, n_fourier: int = 64,
                      tol_u: float = 1e-12) -> HydroFields:
    """Leading-order fields on the unit disk."""
    if branch == "non-isothermal":
        th = 2.0 * np.pi * np.arange(n_fourier) / n_fourier
        _, U, _ = boundary.values(th)
        if np.max(np.abs(U)) > tol_u:
            raise ValueError("the non-isothermal branch needs u_b1 = 0")
        return HarmonicFields(fourier_coefficients(boundary.theta_b1, n_fourier))
    if branch == "manufactured":
        if not manufactured:
            raise ValueError("the manufactured branch needs rho, u and theta callables")
        return ManufacturedFields(**manufactured)
    raise ValueError(f"unknown branch {branch!r}")


def interior_f1(fields: HydroFields, grid: VelocityGrid, x):
    """F_1 at spatial points x (n, 2) in the Cartesian frame: (n, N)."""
    return fields.coefficients(np.atleast_2d(x)) @ _psi(grid)


def to_frame(c, dc, hc, e1, e2):
    """Express coefficients and derivatives in the orthonormal frame (e1, e2)."""
    E = np.stack([e1, e2], 1)                        # (n, j, i): e_j[i]

    def rot_u(a):
        out = a.copy()
        u = a[..., 1:3]
        out[..., 1:3] = np.einsum("nji,n...i->n...j", E, u)
        return out

    c2 = rot_u(c)
    dc2 = rot_u(np.einsum("nji,nia->nja", E, dc))
    hc2 = rot_u(np.einsum("nji,nkl,nila->njka", E, E, hc))
    return c2, dc2, hc2


# --- second-order kinetic terms ----------------------------------------

class SecondOrder:
    """B_2, C_2 and the bilinear pieces needed for residuals.

    Gamma[psi_0, .] is taken as -L/2, the exact identity for a Maxwellian
    first argument, so the constant state is an exact equilibrium.
    """

    def __init__(self, op: LinearizedOperator, tol_null: float = 1e-5):
        self.op = op
        self.tol_null = tol_null
        g = op.grid
        self.psi = op.psi
        G = [-0.5 * op.matrix] + [op.gamma_matrix(self.psi[a]) for a in (1, 2, 3)]
        self.G = np.array(G)
        Gab = np.einsum("aij,bj->abi", self.G, self.psi)
        self.Gab = 0.5 * (Gab + Gab.transpose(1, 0, 2))
        self.Y = np.array([[op.pseudo_inverse(self.Gab[a, b], tol_null=1e-3)
                            for b in range(4)] for a in range(4)])
        v = np.stack([g.v1, g.v2])
        self.VK = v[:, None, :] * self.psi[None, :, :]   # (k, a, N)
        self.Z = np.array([[op.pseudo_inverse(op.project_perp(self.VK[k, a]))
                            for a in range(4)] for k in range(2)])

    # first order
    def F1(self, c):
        return c @ self.psi

    def vgrad_F1(self, dc):
        return np.einsum("nka,kaN->nN", dc, self.VK)

    def gamma11(self, c):
        return np.einsum("na,nb,abN->nN", c, c, self.Gab)

    def gamma_F1(self, c, g):
        """Gamma[F_1, g] for per-point node fields g (n, N)."""
        return np.einsum("na,aij,nj->ni", c, self.G, g)

    def solvability(self, dc) -> float:
        """Largest null-space coefficient of the second-order right-hand side,
        relative to max(1, |grad A_1|).  Velocity truncation alone leaves about
        1e-5 at vmax = 6."""
        r = self.vgrad_F1(dc)
        coef = np.array([self.op.null_coefficients(x) for x in r])
        if not coef.size:
            return 0.0
        return float(np.max(np.abs(coef)) / max(1.0, np.max(np.abs(dc))))

    def check_solvability(self, dc):
        d = self.solvability(dc)
        if d > self.tol_null:
            raise NullSpaceError(f"second-order right-hand side has null component {d:.3g}")
        return d

    # second order
    @staticmethod
    def b2_coefficients(c):
        rho, u1, u2, th = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
        return np.stack([0.0 * rho, rho * u1, rho * u2, rho * th + u1 * u1 + u2 * u2], -1)

    @staticmethod
    def b2_gradient(c, dc):
        rho, u1, u2, th = (c[:, None, i] for i in range(4))
        dr, du1, du2, dth = (dc[..., i] for i in range(4))
        return np.stack([0.0 * dr, dr * u1 + rho * du1, dr * u2 + rho * du2,
                         dr * th + rho * dth + 2 * u1 * du1 + 2 * u2 * du2], -1)

    def B2(self, c):
        return self.b2_coefficients(c) @ self.psi

    def C2(self, c, dc):
        return (-np.einsum("nka,kaN->nN", dc, self.Z)
                + np.einsum("na,nb,abN->nN", c, c, self.Y))

    def F2(self, c, dc):
        return self.B2(c) + self.C2(c, dc)

    def vgrad_F2(self, c, dc, hc):
        db = self.b2_gradient(c, dc)                          # (n, j, 4)
        dC = (-np.einsum("njka,kaN->njN", hc, self.Z)
              + 2.0 * np.einsum("nja,nb,abN->njN", dc, c, self.Y))
        dF = db @ self.psi + dC
        v = np.stack([self.op.grid.v1, self.op.grid.v2])
        return np.einsum("jN,njN->nN", v, dF)

    def first_order_residual(self, c, dc):
        """v.grad F_1 - Gamma[F_1, F_1] (the eps^2 coefficient for eps F_1)."""
        return self.vgrad_F1(dc) - self.gamma11(c)

    def second_order_defect(self, c, dc):
        """v.grad F_1 + L C_2 - Gamma[F_1, F_1]: zero up to the solvability defect."""
        return self.vgrad_F1(dc) + self.C2(c, dc) @ self.op.matrix.T - self.gamma11(c)


# --- epsilon scan -------------------------------------------------------

@dataclass
class ScanConfig:
    eps: tuple = (0.1, 0.05, 0.025)
    n_theta: int = 16
    theta_stride: int = 2
    eta_fractions: tuple = (0.0, 0.05, 0.1, 0.2, 0.4, 0.7)
    interior_radii: tuple = (0.0, 0.2, 0.4, 0.6)
    interior_angles: int = 12
    svd_tol: float = 1e-10
    vartheta: float = 0.0
    varrho: float = 0.0
    n_eta: int = 200
    milne_tol: float = 1e-6


@dataclass
class ExpansionReport:
    rows: list
    orders: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"schema": SCHEMA, "meta": self.meta, "rows": self.rows, "orders": self.orders}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = list(self.rows[0].keys())
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in keys])
        return buf.getvalue()


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def empirical_orders(eps, values):
    e, v = np.asarray(eps, dtype=float), np.asarray(values, dtype=float)
    return [float(np.log(v[i] / v[i + 1]) / np.log(e[i] / e[i + 1])) for i in range(e.size - 1)]


def _norms(R, grid: VelocityGrid, wv):
    l2 = np.sqrt(np.mean((R * R) @ grid.weights))
    return float(l2), float(np.max(np.abs(R) * wv))


def _boundary_frames(theta):
    n = np.stack([np.cos(theta), np.sin(theta)], -1)
    t = np.stack([-np.sin(theta), np.cos(theta)], -1)
    return -n, t


def _half_flux(grid: VelocityGrid):
    """Normalized grid rule for J[f] = int_{va<0} mu^{1/2} f |va|."""
    w = np.where(grid.v1 < 0, grid.weights * np.abs(grid.v1), 0.0) * sqrt_maxwellian(grid.v1, grid.v2)
    return w / (w @ sqrt_maxwellian(grid.v1, grid.v2))


@dataclass
class BoundaryLayer:
    """fb_2(theta_i, eta, v) on a uniform theta grid, from a low-rank data basis."""

    geom: MilneGeometry
    theta: np.ndarray
    alpha: np.ndarray          # (n_theta, r)
    fields: np.ndarray         # (r, n_eta, N) corrected Milne solutions
    data: np.ndarray           # (n_theta, N) inflow data h
    corrector: np.ndarray      # (n_theta, 4) coefficients of h~
    residual: float
    mass_flux: float

    def values(self, i_theta, i_eta):
        return self.alpha[i_theta] @ self.fields[:, i_eta]

    def theta_derivative(self, i_theta, i_eta):
        n = self.theta.size
        k = np.fft.rfftfreq(n, 1.0 / n)
        da = np.fft.irfft(1j * k[:, None] * np.fft.rfft(self.alpha, axis=0), n=n, axis=0)
        return da[i_theta] @ self.fields[:, i_eta]


def matching_data(so: SecondOrder, fields: HydroFields, boundary: BoundaryData, theta):
    """Inflow data h for fb_2 at boundary angles ``theta``: (n, N)."""
    grid = so.op.grid
    e1, e2 = _boundary_frames(theta)
    x = np.stack([np.cos(theta), np.sin(theta)], -1)
    c, dc, hc = to_frame(fields.coefficients(x), fields.gradient(x), fields.hessian(x), e1, e2)
    J = _half_flux(grid)
    smu = sqrt_maxwellian(grid.v1, grid.v2)
    _, _, T = boundary.values(theta)
    mu1, mu2 = boundary_expansion_fields(boundary.local_u(theta), T)
    F1 = so.F1(c)
    F2 = so.F2(c, dc)
    h = mu1(grid.v1, grid.v2) * (F1 @ J)[:, None] + mu2(grid.v1, grid.v2) \
        - (F2 - (F2 @ J)[:, None] * smu)
    return np.where(grid.v1 > 0, h, 0.0)


def build_boundary_layer(so: SecondOrder, fields: HydroFields, boundary: BoundaryData,
                         eps: float, cfg: ScanConfig) -> BoundaryLayer:
    op = so.op
    theta = 2.0 * np.pi * np.arange(cfg.n_theta) / cfg.n_theta
    geom = MilneGeometry(eps, n_eta=cfg.n_eta)
    H = matching_data(so, fields, boundary, theta)
    U, s, Vt = np.linalg.svd(H, full_matrices=False)
    r = max(1, int(np.sum(s > cfg.svd_tol * max(s[0], 1e-300))))
    alpha, basis = U[:, :r] * s[:r], Vt[:r]
    kw = dict(tol=cfg.milne_tol)
    slots = [0, 2, 3]
    sols = [milne.solve(milne.MilneProblem(geom, op, op.psi[i]), **kw) for i in slots]
    T = np.array([s_.qL[slots] for s_ in sols]).T
    out, resid, D = [], [], []
    for phi in basis:
        sol = milne.solve(milne.MilneProblem(geom, op, phi), **kw)
        d = np.linalg.solve(T, sol.qL[slots])
        g = sol.g - sum(di * si.g for di, si in zip(d, sols))
        out.append(g)
        resid.append(sol.residual)
        D.append(d)
    fieldsb = np.array(out)
    Dm = np.zeros((r, 4))
    Dm[:, slots] = np.array(D)
    w = op.grid.weights * op.grid.v1 * op.psi[0]
    mass = float(np.max(np.abs(np.einsum("tr,rkN,N->tk", alpha, fieldsb, w))))
    res = float(max(resid + [s_.residual for s_ in sols]))
    return BoundaryLayer(geom, theta, alpha, fieldsb, H, alpha @ Dm, res, mass)


def boundary_mismatch(f, eps, u_loc, T, grid: VelocityGrid):
    """f - P^eps[f] - (M_b - mu) mu^{-1/2} on incoming nodes, (n, N)."""
    smu = sqrt_maxwellian(grid.v1, grid.v2)
    Mb = boundary_maxwellian(eps, u_loc, T, grid.v1, grid.v2)
    J = f @ _half_flux(grid)
    B = f - Mb / smu * J[:, None] - (Mb - smu * smu) / smu
    return np.where(grid.v1 > 0, B, 0.0)


def residual_scan(op: LinearizedOperator, boundary: BoundaryData, cfg: ScanConfig | None = None,
                  fields: HydroFields | None = None) -> ExpansionReport:
    """Kinetic residual eps v.grad f + L f - Gamma[f, f] of two approximations.

    ``first``: f = eps F_1.  ``full``: f = eps F_1 + eps^2 (B_2 + C_2 + fb_2),
    with fb_2 cut off outside the collar [0, eps^{1/2}].  The Milne part of
    fb_2 enters through the discrete solve, whose residual is reported.
    """
    cfg = cfg or ScanConfig()
    fields = fields or solve_nsf_leading(boundary)
    grid = op.grid
    so = SecondOrder(op)
    wv = velocity_weight(grid, cfg.vartheta, cfg.varrho)

    # interior samples, Cartesian frame
    pts = [np.zeros(2)] if 0.0 in cfg.interior_radii else []
    ang = 2.0 * np.pi * np.arange(cfg.interior_angles) / cfg.interior_angles
    for r in cfg.interior_radii:
        if r > 0:
            pts.extend(r * np.stack([np.cos(ang), np.sin(ang)], -1))
    xi = np.array(pts)
    ci, dci, hci = fields.coefficients(xi), fields.gradient(xi), fields.hessian(xi)
    solv = so.check_solvability(dci)
    R1i = so.first_order_residual(ci, dci)
    D2i = so.second_order_defect(ci, dci)
    F2i = so.F2(ci, dci)
    R3i = so.vgrad_F2(ci, dci, hci) - 2.0 * so.gamma_F1(ci, F2i)
    R4i = np.array([op.gamma(f, f) for f in F2i])

    rows = []
    ith = np.arange(0, cfg.n_theta, cfg.theta_stride)
    for eps in cfg.eps:
        bl = build_boundary_layer(so, fields, boundary, eps, cfg)
        geom = bl.geom
        ieta = sorted({int(np.argmin(np.abs(geom.eta - f * geom.L))) for f in cfg.eta_fractions})
        th = bl.theta[ith]
        TT, EE = np.meshgrid(ith, ieta, indexing="ij")
        TT, EE = TT.ravel(), EE.ravel()
        thp = bl.theta[TT]
        eta = geom.eta[EE]
        depth = eps * eta
        e1, e2 = _boundary_frames(thp)
        x = (1.0 - depth)[:, None] * np.stack([np.cos(thp), np.sin(thp)], -1)
        c, dc, hc = to_frame(fields.coefficients(x), fields.gradient(x), fields.hessian(x), e1, e2)
        fb = np.array([bl.values(i, k) for i, k in zip(TT, EE)])
        dfb = np.array([bl.theta_derivative(i, k) for i, k in zip(TT, EE)])
        F2 = so.F2(c, dc)
        Q = F2 + fb
        R1c = so.first_order_residual(c, dc)
        D2c = so.second_order_defect(c, dc)
        R3c = (so.vgrad_F2(c, dc, hc) - 2.0 * so.gamma_F1(c, Q)
               + (grid.v2[None, :] / (1.0 - depth)[:, None]) * dfb)
        R4c = np.array([op.gamma(f, f) for f in Q])

        # boundary mismatch at eta = 0
        e1b, e2b = _boundary_frames(th)
        xb = np.stack([np.cos(th), np.sin(th)], -1)
        cb, dcb, _ = to_frame(fields.coefficients(xb), fields.gradient(xb), fields.hessian(xb), e1b, e2b)
        _, _, Tb = boundary.values(th)
        ub = boundary.local_u(th)
        f_first = eps * so.F1(cb)
        f_full = f_first + eps ** 2 * (so.F2(cb, dcb) + np.array([bl.values(i, 0) for i in ith]))

        def rec(region, variant, R):
            l2, sup = _norms(R, grid, wv)
            return {"eps": float(eps), "region": region, "variant": variant, "l2": l2, "sup": sup}

        rows += [
            rec("interior", "first", eps ** 2 * R1i),
            rec("interior", "full", eps ** 2 * D2i + eps ** 3 * R3i - eps ** 4 * R4i),
            rec("collar", "first", eps ** 2 * R1c),
            rec("collar", "full", eps ** 2 * D2c + eps ** 3 * R3c - eps ** 4 * R4c),
            rec("boundary", "first", boundary_mismatch(f_first, eps, ub, Tb, grid)),
            rec("boundary", "full", boundary_mismatch(f_full, eps, ub, Tb, grid)),
        ]
        for r_ in rows[-6:]:
            r_["milne_residual"] = bl.residual
            r_["milne_mass_flux"] = bl.mass_flux
            r_["rank"] = int(bl.alpha.shape[1])
        log.info("eps=%g rank=%d milne residual %.2e", eps, bl.alpha.shape[1], bl.residual)

    orders = {}
    for region in ("interior", "collar", "boundary"):
        for variant in ("first", "full"):
            vals = [r["l2"] for r in rows if r["region"] == region and r["variant"] == variant]
            orders[f"{region}_{variant}_l2"] = empirical_orders(cfg.eps, vals)
    meta = {"grid": [grid.n_r, grid.n_phi], "vmax": float(grid.vmax), "branch": fields.branch,
            "M": float(fields.M), "solvability_defect": solv,
            "n_interior": int(xi.shape[0]), "n_collar": int(len(ith) * len(cfg.eta_fractions))}
    return ExpansionReport(rows, orders, meta)
