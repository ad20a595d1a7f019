import numpy as np
import pytest

from kinlayer.geometry import (circle, curvature, from_fourier, from_local, rotate_velocity,
                               to_local, transport_coefficients, unrotate_velocity)

PERTURBED = from_fourier([1.0, 0.2])


def test_circle_curvature():
    k, R = curvature(circle(2.0), np.linspace(0, 6, 7))
    np.testing.assert_allclose(k, 0.5, rtol=1e-14)
    np.testing.assert_allclose(R, 2.0, rtol=1e-14)


def test_perturbed_curvature_value():
    k, _ = curvature(from_fourier([2.0, 0.5]), 0.0)
    assert abs(k - 7.5 / 6.25 ** 1.5) < 1e-14
    assert abs(k - 0.48) < 1e-14


def test_curvature_periodic():
    th = np.linspace(0, 2 * np.pi, 11)
    np.testing.assert_allclose(curvature(PERTURBED, th)[0], curvature(PERTURBED, th + 2 * np.pi)[0],
                               rtol=1e-12)


def test_curvature_against_finite_difference_of_tangent():
    # kappa = |d tangent / d arclength|
    th, d = 0.9, 1e-5
    t = PERTURBED.tangent(np.array([th - d, th + d]))
    dt = np.linalg.norm(t[1] - t[0]) / (2 * d) / PERTURBED.speed(th)
    assert abs(curvature(PERTURBED, th)[0] - dt) < 1e-7


def test_radius_derivative_matches_finite_difference():
    th, d = np.array([0.3, 1.7, 4.0]), 1e-5
    fd = (curvature(PERTURBED, th + d)[1] - curvature(PERTURBED, th - d)[1]) / (2 * d)
    np.testing.assert_allclose(PERTURBED.radius_derivative(th), fd, atol=1e-8)
    np.testing.assert_allclose(circle().radius_derivative(th), 0.0, atol=1e-14)


def test_nonconvex_and_negative_curves_rejected():
    with pytest.raises(ValueError):
        from_fourier([1.0, 0.0, 0.0, 0.5])
    with pytest.raises(ValueError):
        from_fourier([0.5, 1.0])


def test_from_local_examples():
    c = circle(2.0)
    np.testing.assert_allclose(from_local(c, 0.5, 0.0), [1.5, 0.0], atol=1e-15)
    th = np.linspace(0, 6, 5)
    np.testing.assert_allclose(from_local(PERTURBED, np.zeros(5), th), PERTURBED.point(th),
                               atol=1e-15)
    with pytest.raises(ValueError):
        from_local(c, 2.5, 0.0)


def test_local_round_trip(rng):
    dep = rng.uniform(0, 0.5 * PERTURBED.R_min, 50)
    th = rng.uniform(0, 2 * np.pi, 50)
    d2, t2 = to_local(PERTURBED, from_local(PERTURBED, dep, th))
    np.testing.assert_allclose(d2, dep, atol=1e-10)
    np.testing.assert_allclose(np.angle(np.exp(1j * (t2 - th))), 0, atol=1e-10)


def test_velocity_rotation(rng):
    w = rng.standard_normal((20, 2))
    th = rng.uniform(0, 2 * np.pi, 20)
    va, vb = rotate_velocity(PERTURBED, th, w)
    np.testing.assert_allclose(np.hypot(va, vb), np.linalg.norm(w, axis=1), rtol=1e-14)
    np.testing.assert_allclose(unrotate_velocity(PERTURBED, th, va, vb), w, atol=1e-14)
    va, vb = rotate_velocity(circle(), 0.0, np.array([-1.0, 0.0]))
    assert abs(va - 1) < 1e-15 and abs(vb) < 1e-15


def _F(x, w):
    return np.sin(1.3 * x[..., 0] + 0.4 * w[..., 1]) * np.exp(0.5 * x[..., 1] - 0.2 * w[..., 0] ** 2)


def test_transport_in_local_coordinates(rng):
    n = 50
    dep = rng.uniform(0, 0.5, n)
    th = rng.uniform(0, 2 * np.pi, n)
    va, vb = rng.standard_normal((2, n))
    d = 1e-5

    def G(dp, t, a, b):
        return _F(from_local(PERTURBED, dp, t), unrotate_velocity(PERTURBED, t, a, b))

    x = from_local(PERTURBED, dep, th)
    w = unrotate_velocity(PERTURBED, th, va, vb)
    e = np.eye(2)
    cart = sum(w[:, i] * (_F(x + d * e[i], w) - _F(x - d * e[i], w)) / (2 * d) for i in range(2))
    c = transport_coefficients(PERTURBED, dep, th, va, vb)
    parts = [(G(dep + d, th, va, vb) - G(dep - d, th, va, vb)) / (2 * d),
             (G(dep, th + d, va, vb) - G(dep, th - d, va, vb)) / (2 * d),
             (G(dep, th, va + d, vb) - G(dep, th, va - d, vb)) / (2 * d),
             (G(dep, th, va, vb + d) - G(dep, th, va, vb - d)) / (2 * d)]
    local = sum(ci * p for ci, p in zip(c, parts))
    np.testing.assert_allclose(local, cart, atol=1e-6)
