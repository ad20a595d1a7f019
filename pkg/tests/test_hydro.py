import numpy as np
import pytest
from scipy.integrate import dblquad

from kinlayer import hydro
from kinlayer.velocity import build_grid, maxwellian, sqrt_maxwellian

COS = hydro.BoundaryData(theta_b1=np.cos)


def outgoing(f):
    """Independent oracle: int_{va<0} f |va| dv by adaptive quadrature."""
    val, _ = dblquad(lambda vb, va: f(va, vb) * abs(va), -12, 0, -12, 12, epsabs=1e-12)
    return val


def test_renormalized_density_for_pure_temperature():
    assert hydro.renormalized_density(np.zeros(2), 1.0) == pytest.approx(-0.5, abs=1e-15)
    flux = outgoing(lambda a, b: maxwellian(a, b) * 0.5 * (a * a + b * b - 2))
    assert abs(flux - 0.5) < 1e-9
    flux_u = outgoing(lambda a, b: maxwellian(a, b) * a)
    assert abs(flux_u + np.sqrt(np.pi / 2)) < 1e-9
    assert abs(outgoing(maxwellian) - 1) < 1e-9


def test_zero_coefficients_give_zero_fields():
    grid = build_grid(6, 8, 8)
    mu1, mu2 = hydro.expand_boundary_maxwellian(0.0, np.zeros(2), 0.0, grid)
    assert np.all(mu1 == 0) and np.all(mu2 == 0)


@pytest.mark.parametrize("u,theta", [((0.0, 0.0), 1.0), ((0.3, -0.7), 0.4), ((-1.1, 0.2), -0.8)])
def test_flux_compatibility(u, theta):
    u = np.array(u)
    c1, c2 = hydro.flux_compatibility(u, theta)
    assert abs(c1) <= 1e-8 and abs(c2) <= 1e-8
    mu1, mu2 = hydro.boundary_expansion_fields(u, theta)
    sq = lambda a, b, f: sqrt_maxwellian(a, b) * f(np.array([a]), np.array([b]))[0]
    assert abs(outgoing(lambda a, b: sq(a, b, mu1))) <= 1e-8
    assert abs(outgoing(lambda a, b: sq(a, b, mu2))) <= 1e-8


def test_expansion_matches_exact_boundary_maxwellian():
    u, theta = np.array([0.4, -0.3]), 0.7
    va, vb = np.array([1.0, 0.3, 2.0]), np.array([0.5, -1.0, 0.0])
    mu1, mu2 = hydro.boundary_expansion_fields(u, theta)
    rem = []
    for eps in (0.02, 0.01):
        Mb = hydro.boundary_maxwellian(eps, u, theta, va, vb)
        m = sqrt_maxwellian(va, vb)
        exact = (Mb - m * m) / m
        rem.append(np.abs(exact - eps * mu1(va, vb) - eps ** 2 * mu2(va, vb)).max())
    assert 6 < rem[0] / rem[1] < 10


def test_boundary_maxwellian_unit_flux():
    u = np.array([0.2, 0.5])
    f = lambda a, b: hydro.boundary_maxwellian(0.1, u, 0.3, np.array([a]), np.array([b]))[0]
    assert abs(outgoing(f) - 1) < 1e-9


def test_cos_boundary_gives_linear_temperature():
    f = hydro.solve_nsf_leading(COS)
    x, _ = hydro.disk_rule(24)
    np.testing.assert_allclose(f.theta_T(x), x[:, 0], atol=1e-12)
    assert abs(f.M) < 1e-14
    np.testing.assert_allclose(f.coefficients(x)[:, 0], -x[:, 0], atol=1e-12)
    assert f.boussinesq_defect(x) <= 1e-10
    assert abs(f.normalization(build_grid(6, 24, 32))) <= 1e-8


def test_constant_boundary_temperature():
    f = hydro.solve_nsf_leading(hydro.BoundaryData(theta_b1=lambda t: 0 * t + 0.7))
    x, _ = hydro.disk_rule(8)
    np.testing.assert_allclose(f.theta_T(x), 0.7, atol=1e-14)
    np.testing.assert_allclose(f.coefficients(x)[:, 0], 0.0, atol=1e-14)


def multi_mode(t):
    return 0.3 + np.cos(t) - 0.5 * np.sin(2 * t) + 0.2 * np.cos(3 * t)


def test_harmonic_extension_properties(rng):
    f = hydro.solve_nsf_leading(hydro.BoundaryData(theta_b1=multi_mode))
    tb = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    xb = np.stack([np.cos(tb), np.sin(tb)], -1)
    np.testing.assert_allclose(f.theta_T(xb), multi_mode(tb), atol=1e-12)
    x = rng.uniform(-0.6, 0.6, (20, 2))
    H = f.hessian(x)
    assert np.abs(H[:, 0, 0, 3] + H[:, 1, 1, 3]).max() < 1e-12
    d = 1e-5
    for j, e in enumerate(np.eye(2)):
        fd = (f.coefficients(x + d * e) - f.coefficients(x - d * e)) / (2 * d)
        np.testing.assert_allclose(f.gradient(x)[:, j], fd, atol=1e-8)
        fd2 = (f.gradient(x + d * e) - f.gradient(x - d * e)) / (2 * d)
        np.testing.assert_allclose(H[:, j], fd2, atol=1e-7)
    xi, _ = hydro.disk_rule(16)
    th = f.theta_T(xi)
    tt = np.linspace(0, 2 * np.pi, 2000)
    assert multi_mode(tt).min() - 1e-12 <= th.min() and th.max() <= multi_mode(tt).max() + 1e-12


def test_nonisothermal_rejects_velocity():
    bd = hydro.BoundaryData(theta_b1=np.cos, u_b1=lambda t: np.stack([0 * t + 0.1, 0 * t], -1))
    with pytest.raises(ValueError):
        hydro.solve_nsf_leading(bd)
    with pytest.raises(ValueError):
        hydro.solve_nsf_leading(COS, branch="turbulent")


def test_manufactured_divergence_free():
    chi = lambda x: (1 - x[:, 0] ** 2 - x[:, 1] ** 2) ** 2
    man = dict(rho=lambda x: -0.1 * x[:, 0], theta=lambda x: 0.1 * x[:, 0],
               u=lambda x: np.stack([-x[:, 1] * chi(x), x[:, 0] * chi(x)], -1))
    f = hydro.solve_nsf_leading(COS, branch="manufactured", manufactured=man)
    x, _ = hydro.disk_rule(12)
    assert np.abs(f.divergence(x)).max() <= 1e-8
    assert f.boussinesq_defect(x) <= 1e-10


def test_interior_f1(op):
    grid = op.grid
    const = hydro.ManufacturedFields(lambda x: 1 + 0 * x[:, 0], lambda x: 0 * x,
                                     lambda x: 0 * x[:, 0])
    F = hydro.interior_f1(const, grid, np.zeros(2))
    np.testing.assert_allclose(F[0], op.psi[0], atol=1e-15)
    flow = hydro.ManufacturedFields(lambda x: 0 * x[:, 0],
                                    lambda x: np.stack([0.2 + 0 * x[:, 0], x[:, 0]], -1),
                                    lambda x: 0.5 * x[:, 1])
    x = np.array([[0.3, -0.2], [0.1, 0.5]])
    F = hydro.interior_f1(flow, grid, x)
    c = op.null_coefficients(F)
    np.testing.assert_allclose(c[:, 2], x[:, 0], atol=1e-10)
    r = op.apply(F)
    assert np.sqrt((r * r) @ grid.weights).max() <= 1e-3


@pytest.fixture(scope="module")
def so(op):
    return hydro.SecondOrder(op)


def test_constant_state_second_order(so):
    c = np.array([[1.0, 0, 0, 0]])
    dc = np.zeros((1, 2, 4))
    assert np.all(so.b2_coefficients(c) == 0)
    assert np.abs(so.C2(c, dc)).max() <= 1e-3
    R = so.first_order_residual(c, dc)
    assert np.sqrt((R * R) @ so.op.grid.weights).max() <= 1e-3


def test_b2_density_slot_always_zero(rng):
    c = rng.standard_normal((5, 4))
    assert np.all(hydro.SecondOrder.b2_coefficients(c)[:, 0] == 0)


def test_b2_gradient_matches_difference(rng):
    c, dc = rng.standard_normal((3, 4)), rng.standard_normal((3, 2, 4))
    d = 1e-6
    for j in range(2):
        fd = (hydro.SecondOrder.b2_coefficients(c + d * dc[:, j])
              - hydro.SecondOrder.b2_coefficients(c - d * dc[:, j])) / (2 * d)
        np.testing.assert_allclose(hydro.SecondOrder.b2_gradient(c, dc)[:, j], fd, atol=1e-8)


def test_cos_case_solvability_and_c2(so):
    f = hydro.solve_nsf_leading(COS)
    x = np.array([[0.0, 0.0], [0.3, 0.4], [-0.5, 0.1]])
    c, dc = f.coefficients(x), f.gradient(x)
    assert so.check_solvability(dc) <= 1e-5
    C2 = so.C2(c, dc)
    np.testing.assert_allclose(so.op.null_coefficients(C2), 0, atol=1e-10)
    D = so.second_order_defect(c, dc)
    R = so.first_order_residual(c, dc)
    w = so.op.grid.weights
    assert np.sqrt((D * D) @ w).max() <= 1e-3 * np.sqrt((R * R) @ w).max()


def test_gamma_f1_matches_gamma(so, rng):
    op = so.op
    c = np.array([[0.0, 0.3, -0.2, 0.5]])
    g = op.project_perp(sqrt_maxwellian(op.grid.v1, op.grid.v2) * op.grid.v1 ** 2)
    np.testing.assert_allclose(so.gamma_F1(c, g[None])[0], op.gamma(so.F1(c)[0], g), atol=1e-10)


def test_empirical_orders():
    assert hydro.empirical_orders([0.1, 0.05], [4.0, 1.0]) == pytest.approx([2.0])


def test_constant_state_scan(op):
    const = hydro.ManufacturedFields(lambda x: 1 + 0 * x[:, 0], lambda x: 0 * x,
                                     lambda x: 0 * x[:, 0])
    cfg = hydro.ScanConfig(eps=(0.1, 0.05), n_theta=4, interior_radii=(0.0, 0.5),
                           interior_angles=4)
    rep = hydro.residual_scan(op, hydro.BoundaryData(theta_b1=lambda t: 0 * t), cfg, const)
    for r in rep.rows:
        if r["region"] != "boundary":
            assert r["l2"] <= r["eps"] ** 2 * 1e-3
        assert r["rank"] >= 1
    d = rep.to_dict()
    assert d["schema"] == hydro.SCHEMA
    assert rep.to_csv().splitlines()[0].startswith("eps,region,variant,l2,sup")


def test_boundary_layer_zero_mass_flux(op, so):
    f = hydro.solve_nsf_leading(COS)
    bl = hydro.build_boundary_layer(so, f, COS, 0.1, hydro.ScanConfig(n_theta=8))
    assert bl.mass_flux <= 1e-5
    assert bl.residual <= 1e-6
    # corrected layers decay: the far end is far smaller than the boundary trace
    w = op.grid.weights
    n0 = np.sqrt((bl.values(1, 0) ** 2) @ w)
    nL = np.sqrt((bl.values(1, -1) ** 2) @ w)
    assert nL < 0.1 * n0
