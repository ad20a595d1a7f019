"""Weighted derivatives of Milne solutions, the tangential problem and grazing scans.

Derivatives are taken by finite differences on the solved field: second-order
np.gradient in eta and speed, centred periodic differences in angle, and the
polar chain rule for (va, vb).  The kinetic weight zeta is invariant along
characteristics, so zeta-weighted fields stay finite where the raw
derivatives blow up at grazing incidence.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import milne
from .characteristics import MilneGeometry, weight_zeta
from .collision import LinearizedOperator, bilinear
from .geometry import BoundaryCurve, curvature
from .velocity import VelocityGrid

log = logging.getLogger(__name__)

GROWTH_S = 0.1


def velocity_weight(grid: VelocityGrid, vartheta: float = 0.0, varrho: float = 0.0):
    """<v>^vartheta exp(varrho |v|^2) on the grid nodes."""
    s2 = grid.v1 ** 2 + grid.v2 ** 2
    return (1.0 + s2) ** (0.5 * vartheta) * np.exp(varrho * s2)


def velocity_gradient(f, grid: VelocityGrid):
    """(d f/d va, d f/d vb) for node fields of shape (..., N)."""
    f = np.asarray(f, dtype=float)
    if grid.n_r < 3 or grid.n_phi < 3:
        raise ValueError("grid too coarse for finite differences")
    F = f.reshape(f.shape[:-1] + (grid.n_r, grid.n_phi))
    ds = np.gradient(F, grid.speeds, axis=-2, edge_order=2)
    dp = (np.roll(F, -1, axis=-1) - np.roll(F, 1, axis=-1)) / (2.0 * grid.dphi)
    s = grid.speeds[:, None]
    ang = (np.arange(grid.n_phi) + 0.5) * grid.dphi
    c, sn = np.cos(ang)[None, :], np.sin(ang)[None, :]
    da = c * ds - sn / s * dp
    db = sn * ds + c / s * dp
    return da.reshape(f.shape), db.reshape(f.shape)


def eta_derivative(g, eta):
    if np.asarray(eta).size < 3:
        raise ValueError("grid too coarse for finite differences")
    return np.gradient(np.asarray(g, dtype=float), eta, axis=0, edge_order=2)


@dataclass
class DerivativeFields:
    """A = zeta dg/deta, B = zeta dg/dva, C = zeta dg/dvb on (eta, velocity) nodes."""

    eta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    zeta: np.ndarray

    def sup(self, grid: VelocityGrid, vartheta: float = 0.0, varrho: float = 0.0) -> dict:
        """Weighted sup norms, ignoring nodes where zeta vanishes."""
        w = velocity_weight(grid, vartheta, varrho)[None, :]
        mask = self.zeta > 0
        out = {}
        for name in ("A", "B", "C"):
            val = np.abs(getattr(self, name)) * w
            out[name] = float(np.max(np.where(mask, val, 0.0)))
        return out


def derivative_fields(geom: MilneGeometry, grid: VelocityGrid, g) -> DerivativeFields:
    g = np.asarray(g, dtype=float)
    eta = geom.eta
    if g.shape != (eta.size, grid.size):
        raise ValueError("field shape does not match the eta and velocity grids")
    zeta = weight_zeta(geom, eta[:, None], grid.v1[None, :], grid.v2[None, :])
    a = eta_derivative(g, eta)
    b, c = velocity_gradient(g, grid)
    return DerivativeFields(eta, zeta * a, zeta * b, zeta * c, zeta)


def weighted_derivatives(solution: milne.MilneSolution) -> DerivativeFields:
    p = solution.problem
    return derivative_fields(p.geom, p.op.grid, solution.g)


def _drift(G, grid, f_va, f_vb):
    """G (vb^2 d_va - va vb d_vb) f."""
    va, vb = grid.v1, grid.v2
    return G * (vb * vb * f_va - va * vb * f_vb)


def coupling_residuals(geom: MilneGeometry, grid: VelocityGrid, g, apply_L, S=None) -> dict:
    """Residuals of the differentiated Milne equation, weighted by zeta.

    With a = g_eta, b = g_va, c = g_vb and T f = va f_eta + G (vb^2 f_va -
    va vb f_vb), differentiating T g + L g = S gives

        T a + d_eta(L g) = S_eta + S_A,   S_A = -G'(eta) (vb^2 b - va vb c)
        T b + d_va(L g)  = S_va  + S_B,   S_B = -a + G vb c
        T c + d_vb(L g)  = S_vb  + S_C,   S_C = -G (2 vb b - va c)

    (sources written on the right-hand side).  ``apply_L`` maps node fields
    (..., N) to L applied along the last axis.  Returns the zeta-weighted
    residual arrays RA, RB, RC and the sources SA, SB, SC (also weighted).
    """
    eta = geom.eta
    g = np.asarray(g, dtype=float)
    va, vb = grid.v1[None, :], grid.v2[None, :]
    G = geom.G(eta)[:, None]
    dG = (-geom.G_scale ** 2 / (geom.Rk - geom.G_scale * eta) ** 2)[:, None]
    zeta = weight_zeta(geom, eta[:, None], va, vb)
    a = eta_derivative(g, eta)
    b, c = velocity_gradient(g, grid)
    Lg = apply_L(g)
    S = np.zeros_like(g) if S is None else np.asarray(S, dtype=float)
    S_eta = eta_derivative(S, eta)
    S_va, S_vb = velocity_gradient(S, grid)
    Lg_va, Lg_vb = velocity_gradient(Lg, grid)

    def transport(f):
        f_va, f_vb = velocity_gradient(f, grid)
        return va * eta_derivative(f, eta) + _drift(G, grid, f_va, f_vb)

    SA = -dG * (vb * vb * b - va * vb * c)
    SB = -a + G * vb * c
    SC = -G * (2.0 * vb * b - va * c)
    RA = transport(a) + eta_derivative(Lg, eta) - S_eta - SA
    RB = transport(b) + Lg_va - S_va - SB
    RC = transport(c) + Lg_vb - S_vb - SC
    return {"RA": zeta * RA, "RB": zeta * RB, "RC": zeta * RC,
            "SA": zeta * SA, "SB": zeta * SB, "SC": zeta * SC}


def growth_normalized(sup_value: float, eps: float, s: float = GROWTH_S) -> float:
    """sup / (|ln eps| eps^{-s})."""
    return sup_value / (abs(np.log(eps)) * eps ** (-s))


# ---------------------------------------------------------------- tangential


@dataclass
class TangentialSolution:
    theta: float
    W: np.ndarray                  # (n_eta, N) field dg/dtheta
    solution: milne.MilneSolution  # the Milne solve that produced W
    K0: float

    def weighted_sup(self) -> float:
        """sup over eta of e^{K0 eta} |W(eta)|_inf."""
        eta = self.solution.eta
        return float(np.max(np.exp(self.K0 * eta) * np.abs(self.W).max(axis=1)))


def slice_geometry(curve: BoundaryCurve, theta: float, eps: float, **kw) -> MilneGeometry:
    _, R = curvature(curve, np.asarray(theta, dtype=float))
    return MilneGeometry(eps, Rk=float(R), **kw)


def tangential_source(base: milne.MilneSolution, dRk: float) -> np.ndarray:
    """(R'/(R - eps eta)) G(eta) (vb^2 dg/dva - va vb dg/dvb) on the eta nodes."""
    geom = base.problem.geom
    grid = base.problem.op.grid
    eta = geom.eta
    g_va, g_vb = velocity_gradient(base.g, grid)
    fac = (dRk / (geom.Rk - geom.G_scale * eta) * geom.G(eta))[:, None]
    return fac * (grid.v2 ** 2 * g_va - grid.v1 * grid.v2 * g_vb)


def tangential_solve(slices, thetas, curve: BoundaryCurve, dh=None, K0: float = 0.0,
                     **solve_kw) -> list:
    """Solve for W = dg/dtheta on each slice.

    ``slices`` are solved Milne problems at the angles ``thetas`` of ``curve``.
    ``dh`` gives the in-flow data dh/dtheta: a callable (theta, va, vb), an
    array of node values per slice, or None to difference the slices' data
    spectrally in theta (the angles must then be uniform over the period).
    """
    thetas = np.asarray(thetas, dtype=float)
    if len(slices) != thetas.size:
        raise ValueError("need one solved slice per angle")
    grid = slices[0].problem.op.grid
    if dh is None:
        dh_nodes = _spectral_theta_derivative(
            np.array([s.problem.h_nodes for s in slices]), thetas)
    elif callable(dh):
        dh_nodes = np.array([dh(t, grid.v1, grid.v2) for t in thetas])
    else:
        dh_nodes = np.asarray(dh, dtype=float)
    dR = curve.radius_derivative(thetas)
    out = []
    for sl, th, dRk, data in zip(slices, thetas, np.atleast_1d(dR), dh_nodes):
        src = tangential_source(sl, float(dRk))
        prob = milne.MilneProblem(sl.problem.geom, sl.problem.op, data, src)
        sol = milne.solve(prob, **solve_kw)
        out.append(TangentialSolution(float(th), sol.g, sol, K0))
    return out


def _spectral_theta_derivative(values, thetas):
    n = thetas.size
    step = 2.0 * np.pi / n
    if not np.allclose(np.diff(thetas), step) or n < 3:
        raise ValueError("spectral theta derivative needs a uniform periodic angle grid")
    k = np.fft.fftfreq(n, d=1.0 / n)
    if n % 2 == 0:
        k[n // 2] = 0.0
    spec = np.fft.fft(values, axis=0)
    return np.real(np.fft.ifft(1j * k[:, None] * spec, axis=0))


# ------------------------------------------------------------ grazing scan


@dataclass
class GrazingRow:
    level: int
    h_grazing: float
    sup_unweighted: float
    sup_weighted: float


def _derivative_of_callable(h, va, vb, step=1e-6):
    ha = (h(va + step, vb) - h(va - step, vb)) / (2 * step)
    hb = (h(va, vb + step) - h(va, vb - step)) / (2 * step)
    return ha, hb


def boundary_normal_derivative(solution: milne.MilneSolution, h, va, vb) -> np.ndarray:
    """dg/deta at eta = 0 for in-flow velocities, read off the equation.

    va dg/deta = -nu h + K g(0) - G(0) (vb^2 h_va - va vb h_vb) (+ S(0)),
    with K g(0) from the solved boundary trace and h the exact data.  The
    supremum over depth of |dg/deta| near grazing is attained here.
    """
    prob = solution.problem
    op, geom = prob.op, prob.geom
    grid = op.grid
    va, vb = np.broadcast_arrays(np.asarray(va, dtype=float), np.asarray(vb, dtype=float))
    if np.any(va <= 0):
        raise ValueError("probes must be in-flow velocities (va > 0)")
    Kg0 = bilinear(op.apply_K(solution.g[0]), grid, va, vb)
    nu = np.interp(np.hypot(va, vb), grid.speeds, op.nu[:: grid.n_phi])
    hv = h(va, vb)
    ha, hb = _derivative_of_callable(h, va, vb)
    num = -nu * hv + Kg0 - float(geom.G(0.0)) * (vb * vb * ha - va * vb * hb)
    if prob.S_nodes is not None:
        num = num + bilinear(prob.S_nodes[0], grid, va, vb)
    return num / va


def grazing_scan(op: LinearizedOperator, h, eps: float, mode: str = "geometric",
                 levels: int = 3, delta_w: float | None = None, n_probe: int = 16,
                 vb_probe=None, solution: milne.MilneSolution | None = None,
                 n_eta: int = 200, **solve_kw) -> list:
    """Sup of |dg/deta| and zeta |dg/deta| over {0 < va < delta} as delta halves.

    Level l uses the window delta_l = delta_w 2^-l with probes
    va = j delta_l / n_probe (j = 1..n_probe) and vb from ``vb_probe``
    (default: 41 values on [-4, 4]).  ``h`` must be a callable (va, vb).
    """
    if mode not in ("flat", "geometric"):
        raise ValueError("mode must be 'flat' or 'geometric'")
    if levels < 3:
        raise ValueError("need at least 3 refinement levels")
    if not callable(h):
        raise ValueError("grazing scan needs the boundary data as a callable")
    grid = op.grid
    if delta_w is None:
        delta_w = 0.1 * grid.vmax / grid.n_r
    if solution is None:
        geom = MilneGeometry(eps, n_eta=n_eta, flat=(mode == "flat"))
        solution = milne.solve(milne.MilneProblem(geom, op, h), **solve_kw)
    geom = solution.problem.geom
    vb = np.linspace(-4.0, 4.0, 41) if vb_probe is None else np.asarray(vb_probe, dtype=float)
    rows = []
    for lev in range(levels):
        d = delta_w * 0.5 ** lev
        va = d * np.arange(1, n_probe + 1) / n_probe
        VA, VB = np.meshgrid(va, vb, indexing="ij")
        dg = boundary_normal_derivative(solution, h, VA, VB)
        zeta = weight_zeta(geom, 0.0, VA, VB)
        rows.append(GrazingRow(lev, d / n_probe, float(np.abs(dg).max()),
                               float(np.abs(zeta * dg).max())))
    return rows
