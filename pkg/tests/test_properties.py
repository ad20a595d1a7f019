"""Property-based checks of the structural invariants."""
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from kinlayer import characteristics as ch
from kinlayer import hydro
from kinlayer import mc_transport as mc
from kinlayer.geometry import from_fourier, from_local, rotate_velocity, to_local
from kinlayer.velocity import build_grid, integrate, sqrt_maxwellian

GRID = build_grid(6, 12, 16)
GEOM = ch.MilneGeometry(0.1)
CURVE = from_fourier([1.0, 0.2])
SET = settings(max_examples=40, deadline=None)

real = st.floats(-3, 3, allow_nan=False)
speed_comp = st.floats(-2.5, 2.5, allow_nan=False)
depth = st.floats(0, float(GEOM.L), allow_nan=False)
seeds = st.integers(0, 2 ** 32 - 1)


@SET
@given(a=real, b=real, seed=seeds)
def test_integrate_linear(a, b, seed):
    f, g = np.random.default_rng(seed).standard_normal((2, GRID.size))
    lhs = integrate(a * f + b * g, GRID)
    rhs = a * integrate(f, GRID) + b * integrate(g, GRID)
    assert abs(lhs - rhs) <= 1e-12 * (1 + abs(a) + abs(b)) * np.abs(f).sum() * GRID.weights.max()


@SET
@given(seed=seeds)
def test_projection_idempotent_and_linear(op, seed):
    rng = np.random.default_rng(seed)
    f, g = rng.standard_normal((2, op.grid.size))
    cf, pf = op.project_null(f)
    np.testing.assert_allclose(op.project_null(pf)[1], pf, atol=1e-10)
    cg, _ = op.project_null(g)
    np.testing.assert_allclose(op.null_coefficients(2 * f - g), 2 * cf - cg, atol=1e-9)


@SET
@given(seed=seeds)
def test_gamma_symmetric_and_conservative(op, seed):
    rng = np.random.default_rng(seed)
    m = sqrt_maxwellian(op.grid.v1, op.grid.v2)
    v1, v2 = op.grid.v1, op.grid.v2
    basis = np.array([m, m * v1, m * v2, m * v1 * v2, m * v1 ** 2, m * v2 ** 3])
    f, g = rng.standard_normal((2, basis.shape[0])) @ basis
    a, b = op.gamma(f, g), op.gamma(g, f)
    np.testing.assert_allclose(a, b, atol=1e-13 * np.abs(a).max() + 1e-15)
    w = op.grid.weights
    nfg = np.sqrt(f * f @ w) * np.sqrt(g * g @ w)
    assert np.abs(op.psi @ (a * w)).max() <= 1e-3 * nfg


@SET
@given(th=st.floats(0, 2 * np.pi), w1=real, w2=real)
def test_rotation_preserves_speed(th, w1, w2):
    va, vb = rotate_velocity(CURVE, th, np.array([w1, w2]))
    assert abs(np.hypot(va, vb) - np.hypot(w1, w2)) <= 1e-12 * (1 + abs(w1) + abs(w2))


@SET
@given(d=st.floats(0, 0.4), th=st.floats(0, 2 * np.pi))
def test_local_coordinates_round_trip(d, th):
    x = from_local(CURVE, np.array([d]), np.array([th]))
    d2, t2 = to_local(CURVE, x)
    np.testing.assert_allclose(from_local(CURVE, d2, t2), x, atol=1e-10)


@SET
@given(eta=depth, eta2=depth, va=speed_comp, vb=speed_comp)
def test_invariants_along_characteristic(eta, eta2, va, vb):
    e1 = va * va + vb * vb
    vb2 = vb * np.exp(ch.potential_W(GEOM, eta2) - ch.potential_W(GEOM, eta))
    assume(e1 - vb2 * vb2 > 1e-6)
    a2, b2 = ch.transport_velocity(GEOM, eta, va, vb, eta2)
    E = ch.conserved(GEOM, eta, va, vb)
    E2 = ch.conserved(GEOM, eta2, a2, b2)
    np.testing.assert_allclose(E2, E, atol=1e-12 * (1 + e1))
    z1, z2 = ch.weight_zeta(GEOM, eta, va, vb), ch.weight_zeta(GEOM, eta2, a2, b2)
    assert abs(z1 - z2) <= 1e-7 * (1 + e1)


@SET
@given(eta=depth, va=st.floats(0.05, 2), vb=st.floats(0.1, 2), dv=st.floats(0.01, 1))
def test_eta_plus_monotone_in_normal_speed(eta, va, vb, dv):
    lo, hi = ch.eta_plus(GEOM, eta, va, vb), ch.eta_plus(GEOM, eta, va + dv, vb)
    assert hi >= lo


@settings(max_examples=20, deadline=None)
@given(va=st.floats(0.2, 2), vb=st.floats(-2, 2), f=st.tuples(st.floats(0.05, 0.95),
                                                              st.floats(0.05, 0.95)))
def test_damping_additive(va, vb, f):
    eta = GEOM.L * 0.9
    y1 = eta * min(f)
    y2 = eta * max(f)
    nu = lambda s: 1.0 + s
    a1, b1 = ch.transport_velocity(GEOM, eta, va, vb, y2)
    whole = ch.damping_H(GEOM, eta, y1, va, vb, nu)
    parts = ch.damping_H(GEOM, eta, y2, va, vb, nu) + ch.damping_H(GEOM, y2, y1, a1, b1, nu)
    assert abs(whole - parts) <= 1e-8 * max(1.0, whole)


@SET
@given(eta=depth, va=speed_comp, vb=speed_comp)
def test_region_trichotomy(eta, va, vb):
    r = int(ch.classify_region(GEOM, eta, va, vb))
    assert r in (1, 2, 3)
    assert (r == 1) == (va > 0)


@SET
@given(x1=st.floats(-0.6, 0.6), x2=st.floats(-0.6, 0.6), a=st.floats(0, 2 * np.pi),
       s=st.floats(0.1, 5), eps=st.floats(0.05, 1))
def test_exit_point_on_boundary(x1, x2, a, s, eps):
    v = s * np.array([np.cos(a), np.sin(a)])
    t, xb = mc.exit_time([x1, x2], v, CURVE, eps)
    th = np.arctan2(xb[0, 1], xb[0, 0])
    assert abs(np.hypot(*xb[0]) - CURVE.r(th)) <= 1e-10
    assert t[0] > 0


@SET
@given(p=st.floats(0.5, 4), c=st.floats(0.1, 10))
def test_empirical_order_of_power_law(p, c):
    eps = [0.1, 0.05, 0.025]
    np.testing.assert_allclose(hydro.empirical_orders(eps, [c * e ** p for e in eps]), p,
                               rtol=1e-10)


@SET
@given(u1=st.floats(-2, 2), u2=st.floats(-2, 2), th=st.floats(-1, 1))
def test_boundary_expansion_compatible(u1, u2, th):
    c1, c2 = hydro.flux_compatibility(np.array([u1, u2]), th)
    assert abs(c1) <= 1e-8 and abs(c2) <= 1e-8
