"""Characteristics of the Milne transport operator with geometric correction.

The transport part is va d_eta + G(eta)(vb^2 d_va - va vb d_vb) with
G = -eps/(R - eps eta).  Along a characteristic the energy E1 = va^2 + vb^2
and E2 = vb e^{-W} (W the potential, W' = -G) are conserved; in the physical
picture these are straight lines in the annulus R - eps eta.

Since nu depends on |v| only it is constant along a characteristic, and the
travel time int dy / va' has the closed form used by ``travel_sigma``.
The damping integral H is still computed by quadrature in ``damping_H``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp


@dataclass(frozen=True)
class MilneGeometry:
    """Layer [0, L] for one boundary slice.

    ``flat=True`` switches the geometric term off (G = 0), which gives the
    classical half-space problem on the same interval.
    """

    eps: float
    Rk: float = 1.0
    L: float | None = None
    n_eta: int = 200
    grading: float = 30.0
    flat: bool = False
    eta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.eps <= 0.25:
            raise ValueError("eps must lie in (0, 0.25]")
        L = self.eps ** -0.5 if self.L is None else float(self.L)
        if self.eps * L >= self.Rk:
            raise ValueError("layer reaches the centre of curvature (eps L >= R_kappa)")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "eta", graded_grid(L, self.n_eta, self.grading))

    @property
    def G_scale(self) -> float:
        return 0.0 if self.flat else self.eps

    def rho(self, eta):
        """Distance to the centre of curvature, R - eps eta."""
        return self.Rk - self.eps * np.asarray(eta, dtype=float)

    def G(self, eta):
        return -self.G_scale / (self.Rk - self.G_scale * np.asarray(eta, dtype=float))


def graded_grid(L: float, n: int, ratio: float = 30.0) -> np.ndarray:
    """n nodes on [0, L], geometrically graded so the last cell is ``ratio`` x the first."""
    if n < 3:
        raise ValueError("need at least 3 eta nodes")
    if ratio == 1.0:
        return np.linspace(0.0, L, n)
    q = ratio ** (1.0 / (n - 2))
    h = q ** np.arange(n - 1)
    x = np.concatenate([[0.0], np.cumsum(h)])
    return L * x / x[-1]


def _check_eta(geom: MilneGeometry, eta):
    e = np.asarray(eta, dtype=float)
    if np.any(e < -1e-12) or np.any(e > geom.L * (1 + 1e-12)):
        raise ValueError(f"eta outside [0, L={geom.L:.6g}]")
    return np.clip(e, 0.0, geom.L)


def potential_W(geom: MilneGeometry, eta):
    e = _check_eta(geom, eta)
    return np.log(geom.Rk / (geom.Rk - geom.G_scale * e))


def conserved(geom: MilneGeometry, eta, va, vb):
    """(E1, E2) with E2 = vb exp(-W(eta))."""
    va, vb = np.asarray(va, dtype=float), np.asarray(vb, dtype=float)
    return va * va + vb * vb, vb * np.exp(-potential_W(geom, eta))


def transport_velocity(geom: MilneGeometry, eta, va, vb, eta2, tol: float = 1e-12):
    """(va', vb') on the characteristic through (eta, va, vb) at depth eta2, va' >= 0."""
    e1 = np.asarray(va, dtype=float) ** 2 + np.asarray(vb, dtype=float) ** 2
    vb2 = np.asarray(vb) * np.exp(potential_W(geom, eta2) - potential_W(geom, eta))
    d = e1 - vb2 ** 2
    if np.any(d < -tol * np.maximum(1.0, e1)):
        raise ValueError("eta2 is beyond the turning point of this characteristic")
    # differences at rounding level are a turning point, not a tiny va'
    d = np.where(np.abs(d) <= 16 * np.finfo(float).eps * e1, 0.0, d)
    return np.sqrt(np.maximum(d, 0.0)), vb2


def eta_plus(geom: MilneGeometry, eta, va, vb):
    """Turning depth where va' = 0, clamped to [0, L]; NaN when vb = 0 or flat."""
    va, vb = np.asarray(va, dtype=float), np.asarray(vb, dtype=float)
    e1 = va * va + vb * vb
    if geom.flat:
        return np.full(np.broadcast(va, vb).shape, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        ep = (geom.Rk - np.abs(vb) * geom.rho(eta) / np.sqrt(e1)) / geom.eps
    ep = np.where(vb == 0, np.nan, ep)
    return np.clip(ep, 0.0, geom.L)


def weight_zeta(geom: MilneGeometry, eta, va, vb):
    """zeta = (E1 - (rho/R)^2 vb^2)^{1/2}; vanishes on the grazing set at eta = 0."""
    va, vb = np.asarray(va, dtype=float), np.asarray(vb, dtype=float)
    sc = 1.0 if geom.flat else geom.rho(eta) / geom.Rk
    return np.sqrt(np.maximum(va * va + vb * vb * (1.0 - sc * sc), 0.0))


REGION_I, REGION_II, REGION_III = 1, 2, 3


def classify_region(geom: MilneGeometry, eta, va, vb):
    """1, 2 or 3 for the Cases I, II, III of the mild formulation (ties go to II)."""
    va, vb = np.asarray(va, dtype=float), np.asarray(vb, dtype=float)
    e1 = va * va + vb * vb
    vbL = vb * np.exp(potential_W(geom, geom.L) - potential_W(geom, eta))
    out = np.where(va > 0, REGION_I, np.where(e1 >= vbL * vbL, REGION_II, REGION_III))
    return out.astype(int)


def travel_sigma(geom: MilneGeometry, eta, va, vb, y):
    """sigma(y) with int_b^a dy / va'(y) = sigma(b) - sigma(a) on one branch."""
    va, vb = np.asarray(va, dtype=float), np.asarray(vb, dtype=float)
    if geom.flat:
        return -np.asarray(y, dtype=float) / np.abs(va)
    e1 = va * va + vb * vb
    c = vb * geom.rho(eta)
    rho_y = geom.rho(y)
    return np.sqrt(np.maximum(e1 * rho_y ** 2 - c * c, 0.0)) / (geom.eps * e1)


def depth_from_sigma(geom: MilneGeometry, eta, va, vb, sigma):
    """Inverse of ``travel_sigma``."""
    va, vb = np.asarray(va, dtype=float), np.asarray(vb, dtype=float)
    if geom.flat:
        return -np.asarray(sigma) * np.abs(va)
    e1 = va * va + vb * vb
    c = vb * geom.rho(eta)
    rho = np.sqrt((c * c + (geom.eps * e1 * np.asarray(sigma)) ** 2) / e1)
    return (geom.Rk - rho) / geom.eps


def _nu_of(nu):
    if callable(nu):
        return nu
    return lambda s: np.full(np.shape(s), float(nu))


def damping_H(geom: MilneGeometry, eta, eta2, va, vb, nu, tol: float = 1e-12) -> float:
    """H = int_{eta2}^{eta} nu(v'(y)) / va'(y) dy on the branch through (eta, va, vb).

    ``nu`` is a callable of speed or a constant.  Near a turning point the
    substitution y = eta_+ - t^2 removes the inverse square-root singularity.
    """
    if eta2 > eta:
        raise ValueError("damping_H needs eta2 <= eta")
    if eta2 == eta:
        return 0.0
    nuf = _nu_of(nu)

    def integrand(y):
        a, b = transport_velocity(geom, eta, va, vb, y)
        return float(nuf(np.hypot(a, b))) / a

    ep = eta_plus(geom, eta, va, vb)
    if geom.flat or vb == 0 or not np.isfinite(ep):
        val, err = quad(integrand, eta2, eta, epsabs=tol, epsrel=tol, limit=200)
    else:
        ep = float((geom.Rk - abs(vb) * geom.rho(eta) / np.hypot(va, vb)) / geom.eps)
        t_lo = np.sqrt(max(ep - eta, 0.0))
        t_hi = np.sqrt(max(ep - eta2, 0.0))

        def sub(t):
            y = ep - t * t
            a, b = transport_velocity(geom, eta, va, vb, y, tol=1e-9)
            if a == 0.0:
                # limit of 2t / va' at the turning point
                drho = geom.eps
                return 2.0 * float(nuf(np.hypot(va, vb))) / np.sqrt(
                    2.0 * b * b * drho / geom.rho(ep))
            return 2.0 * t * float(nuf(np.hypot(a, b))) / a

        val, err = quad(sub, t_lo, t_hi, epsabs=tol, epsrel=tol, limit=200)
    if not np.isfinite(val) or err > 1e3 * tol * max(1.0, abs(val)):
        raise RuntimeError(f"damping quadrature did not converge (value {val}, error {err})")
    return val


def _branch_integral(geom, eta, va, vb, nu_v, Q, y_lo, y_hi, sign, s_end, n_quad):
    """int_{y_lo}^{y_hi} Q(y, sign va'(y), vb'(y)) / va' exp(-nu |sigma(y) - s_end|) dy,
    integrated in the travel-time variable sigma (smooth through turning points)."""
    s_a = travel_sigma(geom, eta, va, vb, y_lo)
    s_b = travel_sigma(geom, eta, va, vb, y_hi)
    x, w = np.polynomial.legendre.leggauss(n_quad)
    sig = 0.5 * (s_a + s_b) + 0.5 * (s_b - s_a) * x
    y = np.clip(depth_from_sigma(geom, eta, va, vb, sig), 0.0, geom.L)
    a, b = transport_velocity(geom, eta, va, vb, y, tol=1e-8)
    vals = Q(y, sign * a, b) * np.exp(-nu_v * np.abs(sig - s_end))
    return 0.5 * abs(s_a - s_b) * np.dot(w, vals)


def _mild_point(geom, eta, va, vb, h, Q, nuf, n_quad):
    """(K[h], T[Q]) at a single point, by Cases I-III."""
    nu_v = float(nuf(np.hypot(va, vb)))
    sig = lambda y: travel_sigma(geom, eta, va, vb, y)
    region = int(classify_region(geom, eta, va, vb))
    a0, b0 = transport_velocity(geom, eta, va, vb, 0.0)
    kpart = 0.0
    tpart = 0.0
    if region == REGION_I:
        top = eta
    elif region == REGION_II:
        top = geom.L
    else:
        top = float((geom.Rk - abs(vb) * geom.rho(eta) / np.hypot(va, vb)) / geom.eps)
        top = min(max(top, eta), geom.L)
    # outgoing leg 0 -> top (va' > 0), then for II/III the return leg top -> eta
    s_top = sig(top)
    path = abs(sig(0.0) - s_top)
    if region != REGION_I:
        path += abs(s_top - sig(eta))
    if h is not None:
        kpart = h(a0, b0) * np.exp(-nu_v * path)
    if Q is not None:
        back = 0.0 if region == REGION_I else abs(s_top - sig(eta))
        # leg 0 -> top: damping from y to top plus the return leg
        if top > 0:
            tpart += np.exp(-nu_v * back) * _branch_integral(
                geom, eta, va, vb, nu_v, Q, 0.0, top, 1.0, s_top, n_quad)
        if region != REGION_I and top > eta:
            tpart += _branch_integral(geom, eta, va, vb, nu_v, Q, eta, top, -1.0,
                                      sig(eta), n_quad)
    return kpart, tpart


def mild_K(geom: MilneGeometry, h, nu, eta, va, vb, n_quad: int = 96):
    """Boundary part of the mild solution at the points (eta, va, vb).

    ``h`` is a callable (va, vb) -> value for va > 0; ``nu`` a callable of
    speed or a constant.
    """
    nuf = _nu_of(nu)
    e, a, b = np.broadcast_arrays(*(np.asarray(z, dtype=float) for z in (eta, va, vb)))
    out = np.empty(e.shape)
    for idx in np.ndindex(e.shape):
        out[idx] = _mild_point(geom, e[idx], a[idx], b[idx], h, None, nuf, n_quad)[0]
    return out


def mild_T(geom: MilneGeometry, Q, nu, eta, va, vb, n_quad: int = 96):
    """Source part of the mild solution; ``Q`` is a vectorized callable (eta, va, vb)."""
    nuf = _nu_of(nu)
    e, a, b = np.broadcast_arrays(*(np.asarray(z, dtype=float) for z in (eta, va, vb)))
    out = np.empty(e.shape)
    for idx in np.ndindex(e.shape):
        out[idx] = _mild_point(geom, e[idx], a[idx], b[idx], None, Q, nuf, n_quad)[1]
    return out


def trace_characteristic(geom: MilneGeometry, eta, va, vb, s_max: float, n_out: int = 50):
    """Integrate d eta/ds = va, d va/ds = G vb^2, d vb/ds = -G va vb with tight tolerances.

    Stops when eta leaves [0, L].  Returns (s, eta, va, vb) arrays.
    """
    def rhs(_, y):
        g = geom.G(y[0])
        return [y[1], g * y[2] ** 2, -g * y[1] * y[2]]

    def leave_lo(_, y):
        return y[0]

    def leave_hi(_, y):
        return geom.L - y[0]

    leave_lo.terminal = leave_hi.terminal = True
    sol = solve_ivp(rhs, (0.0, s_max), [eta, va, vb], method="DOP853", rtol=1e-12,
                    atol=1e-13, dense_output=True, events=(leave_lo, leave_hi))
    s = np.linspace(0.0, sol.t[-1], n_out)
    y = sol.sol(s)
    return s, y[0], y[1], y[2]
