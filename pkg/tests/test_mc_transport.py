import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from kinlayer import mc_transport as mc
from kinlayer.collision import collision_frequency
from kinlayer.geometry import circle, from_fourier
from kinlayer.velocity import sqrt_maxwellian

DISK = circle()
PERTURBED = from_fourier([1.0, 0.2])


def test_exit_time_radial():
    t, xb = mc.exit_time([0.0, 0.0], [1.0, 0.0], DISK)
    assert abs(t[0] - 1) < 1e-12
    np.testing.assert_allclose(xb[0], [-1, 0], atol=1e-12)


def test_exit_time_scales_inversely_with_eps(rng):
    x, v = rng.uniform(-0.5, 0.5, 2), rng.standard_normal(2)
    t1, _ = mc.exit_time(x, v, PERTURBED, 1.0)
    t2, _ = mc.exit_time(x, v, PERTURBED, 0.1)
    assert abs(t2[0] - 10 * t1[0]) < 1e-10 * t2[0]


def test_exit_point_on_curve(rng):
    x = rng.uniform(-0.5, 0.5, (50, 2))
    v = rng.standard_normal((50, 2))
    t, xb = mc.exit_time(x, v, PERTURBED)
    th = np.arctan2(xb[:, 1], xb[:, 0])
    np.testing.assert_allclose(np.hypot(xb[:, 0], xb[:, 1]), PERTURBED.r(th), atol=1e-10)
    # the exit point lies on the backward ray
    d = x - xb
    cross = d[:, 0] * v[:, 1] - d[:, 1] * v[:, 0]
    assert np.abs(cross).max() < 1e-8
    assert np.all(t > 0)


def test_grazing_sentinel():
    x = np.array([[1.0, 0.0]])
    t, xb = mc.exit_time(x, [[0.0, 1.0]], DISK)
    assert t[0] == 0.0 and np.array_equal(xb, x)
    with pytest.raises(mc.GrazingError):
        mc.exit_time(x, [[0.0, 1.0]], DISK, strict=True)
    with pytest.raises(ValueError):
        mc.exit_time(x, [[0.0, 0.0]], DISK)


def test_diffuse_sampling_moments():
    rng = np.random.default_rng(1)
    th = np.full(10 ** 6, 0.7)
    xb = PERTURBED.point(th)
    v = mc.sample_diffuse(xb, PERTURBED, rng)
    n, t = PERTURBED.normal(th), PERTURBED.tangent(th)
    vn = np.sum(v * n, 1)
    vt = np.sum(v * t, 1)
    assert np.all(vn > 0)
    num, _ = quad(lambda s: s * s * np.exp(-s * s / 2), 0, np.inf)
    den, _ = quad(lambda s: s * np.exp(-s * s / 2), 0, np.inf)
    se = vn.std() / np.sqrt(vn.size)
    assert abs(vn.mean() - num / den) < 3 * se
    assert abs(vt.mean()) < 3 * vt.std() / np.sqrt(vt.size)


def test_trace_cycle_invariants(rng):
    cyc = mc.trace_cycle(np.array([0.2, -0.1]), np.array([0.5, 1.0]), PERTURBED, 0.5, 8, rng)
    assert np.all(np.diff(cyc.t) > 0)
    for xk, vk in zip(cyc.x[1:], cyc.v[1:]):
        th = np.arctan2(xk[1], xk[0])
        assert np.dot(vk, PERTURBED.normal(th)) > 0


def _zero(x, v):
    return np.zeros(len(x))


def test_constant_solution():
    c = 0.8
    v = np.array([0.6, -0.9])
    S = lambda x, w: c * collision_frequency(np.hypot(w[:, 0], w[:, 1])) * sqrt_maxwellian(
        w[:, 0], w[:, 1])
    est = mc.mc_estimate([0.1, 0.3], v, S, _zero, 10_000, 40, PERTURBED, eps=1.0)
    exact = c * sqrt_maxwellian(*v)
    assert abs(est.value - exact) <= 3 * est.stderr + 1e-12


def test_zero_data_gives_zero():
    est = mc.mc_estimate([0.0, 0.2], [1.0, 0.0], _zero, _zero, 2000, 10, DISK)
    assert est.value == 0.0 and est.stderr == 0.0


def test_manufactured_small_run():
    rows = mc.verify_manufactured(PERTURBED, n_samples=2000, n_probes=5)
    assert sum(r.within_3sigma for r in rows) >= 4
    assert mc.probes_csv(rows).splitlines()[0] == "x1,x2,v1,v2,exact,estimate,stderr,n,within_3sigma"


def test_reproducible_and_thread_independent():
    m = mc.Manufactured(DISK, 1.0)
    kw = dict(n_samples=3000, k_max=30, curve=DISK, seed=5, key=(2,))
    a = mc.mc_estimate([0.1, 0.1], [0.4, 0.7], m.S, m.h, threads=1, **kw)
    b = mc.mc_estimate([0.1, 0.1], [0.4, 0.7], m.S, m.h, threads=3, **kw)
    c = mc.mc_estimate([0.1, 0.1], [0.4, 0.7], m.S, m.h, threads=1, **{**kw, "seed": 6})
    assert (a.value, a.stderr) == (b.value, b.stderr)
    assert a.value != c.value


def test_bias_warning_when_truncated():
    m = mc.Manufactured(DISK, 1.0)
    with pytest.warns(mc.BiasWarning):
        est = mc.mc_estimate([0.0, 0.0], [3.0, 0.0], m.S, m.h, 500, 0, DISK)
    assert est.weight_bound > 0
    with warnings.catch_warnings():
        warnings.simplefilter("error", mc.BiasWarning)
        mc.mc_estimate([0.0, 0.0], [1.0, 0.1], m.S, m.h, 500, 60, DISK)


def test_survival_statistics():
    s = mc.cycle_survival_stats(2.0, 0.1, [0, 5, 10, 20, 40], 4000, DISK, seed=3)
    assert s[0] == 1.0
    fr = [s[k] for k in (0, 5, 10, 20, 40)]
    assert all(a >= b for a, b in zip(fr, fr[1:]))
    assert s[40] < 0.5
    with pytest.raises(ValueError):
        mc.cycle_survival_stats(0.5, 0.1, [1], 10, DISK)
