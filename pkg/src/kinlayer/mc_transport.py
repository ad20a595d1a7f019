"""Monte Carlo evaluation of damped transport with diffuse reflection.

Solves eps v.grad f + nu(|v|) f = S in a convex domain with
f = P[f] + h on the incoming boundary, where
P[f](x, v) = mu^{1/2}(v) int_{u.n>0} f(x, u) mu^{1/2}(u) |u.n| du.
Writing phi = f / mu^{1/2}, backward characteristics give

    phi(x, v) = int_0^{t_b} e^{-nu s} S/mu^{1/2}(x - eps s v, v) ds
                + e^{-nu t_b} [h/mu^{1/2}(x_b, v) + E_sigma phi(x_b, u)],

with sigma = mu(u)|u.n| du, a probability measure on {u.n > 0}.  Iterating
along stochastic cycles gives an estimator with weights e^{-nu t_b}.
"""
from __future__ import annotations

import csv
import io
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .collision import collision_frequency
from .geometry import BoundaryCurve
from .velocity import sqrt_maxwellian

WEIGHT_FLOOR = 1e-12
CHUNK = 1000


class BiasWarning(UserWarning):
    """Cycles hit k_max with weight above the floor."""


class GrazingError(ValueError):
    pass


def _inside(curve: BoundaryCurve, y):
    return np.hypot(y[..., 0], y[..., 1]) < curve.r(np.arctan2(y[..., 1], y[..., 0]))


def exit_time(x, v, curve: BoundaryCurve, eps: float = 1.0, tol: float = 1e-13,
              strict: bool = False):
    """Backward exit time t_b = inf{t > 0 : x - eps t v outside} and x_b.

    Vectorized bisection on the inside predicate; convexity makes the set of
    inside times an interval.  Starting points may lie on the boundary
    provided v points into the domain along the backward ray; rays that
    leave at once get the grazing sentinel t_b = 0, x_b = x (or raise with
    ``strict``).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    x, v = np.broadcast_arrays(x, v)
    sp = np.hypot(v[:, 0], v[:, 1])
    if np.any(sp == 0):
        raise ValueError("v must be nonzero")
    rmax = float(np.abs(curve.cos).sum() + np.abs(curve.sin).sum())
    lo = np.zeros(sp.size)
    hi = (np.hypot(x[:, 0], x[:, 1]) + rmax) / (eps * sp) * 1.01
    step = np.minimum(hi, 1e-9 / (eps * sp))
    graze = ~_inside(curve, x - eps * step[:, None] * v)
    if strict and np.any(graze):
        raise GrazingError("backward ray leaves the domain immediately (grazing or outward)")
    hi = np.where(graze, 0.0, hi)
    while True:
        mid = 0.5 * (lo + hi)
        ins = _inside(curve, x - eps * mid[:, None] * v)
        lo = np.where(ins, mid, lo)
        hi = np.where(ins, hi, mid)
        if np.all(hi - lo <= tol * np.maximum(1.0, hi)):
            break
    t = 0.5 * (lo + hi)
    xb = x - eps * t[:, None] * v
    # snap radially onto the curve; the move is below the bisection tolerance
    xb = np.where(graze[:, None], x, curve.point(np.arctan2(xb[:, 1], xb[:, 0])))
    return t, xb


def sample_diffuse(xb, curve: BoundaryCurve, rng: np.random.Generator):
    """v ~ mu(v)|v.n| on {v.n > 0} at boundary points xb (n, 2)."""
    xb = np.atleast_2d(xb)
    th = np.arctan2(xb[:, 1], xb[:, 0])
    n, t = curve.normal(th), curve.tangent(th)
    vn = np.sqrt(-2.0 * np.log1p(-rng.random(th.size)))
    vt = rng.standard_normal(th.size)
    return vn[:, None] * n + vt[:, None] * t


@dataclass
class StochasticCycle:
    t: np.ndarray          # cumulative backward times at each bounce
    x: np.ndarray          # boundary points
    v: np.ndarray          # post-reflection velocities
    reason: str


def trace_cycle(x, v, curve: BoundaryCurve, eps: float, k_max: int,
                rng: np.random.Generator) -> StochasticCycle:
    """One cycle, for inspection; the estimators trace cycles in bulk."""
    ts, xs, vs = [0.0], [np.asarray(x, float)], [np.asarray(v, float)]
    for _ in range(k_max):
        tb, xb = exit_time(xs[-1], vs[-1], curve, eps)
        ts.append(ts[-1] + float(tb[0]))
        xs.append(xb[0])
        vs.append(sample_diffuse(xb, curve, rng)[0])
    return StochasticCycle(np.array(ts), np.array(xs), np.array(vs), "max bounces")


def _estimate_chunk(x, v, n, S, h, nu, curve, eps, k_max, rng):
    """Per-sample estimates of phi(x, v) and final weights."""
    X = np.repeat(np.atleast_2d(x), n, 0)
    V = np.repeat(np.atleast_2d(v), n, 0)
    W = np.ones(n)
    acc = np.zeros(n)
    live = np.ones(n, dtype=bool)
    for _ in range(k_max + 1):
        idx = np.nonzero(live)[0]
        if idx.size == 0:
            break
        Xi, Vi = X[idx], V[idx]
        tb, xb = exit_time(Xi, Vi, curve, eps)
        nv = nu(np.hypot(Vi[:, 0], Vi[:, 1]))
        smu = sqrt_maxwellian(Vi[:, 0], Vi[:, 1])
        # one uniform point per flight: unbiased for the source integral
        ts = tb * rng.random(idx.size)
        seg = tb * np.exp(-nv * ts) * S(Xi - eps * ts[:, None] * Vi, Vi)
        damp = np.exp(-nv * tb)
        acc[idx] += W[idx] * (seg + damp * h(xb, Vi)) / smu
        W[idx] *= damp
        X[idx] = xb
        V[idx] = sample_diffuse(xb, curve, rng)
        live[idx] = W[idx] >= WEIGHT_FLOOR
    return acc, np.where(live, W, 0.0)


def _streams(seed, key, n_chunks):
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return [np.random.default_rng(s) for s in ss.spawn(n_chunks)]


@dataclass
class Estimate:
    value: float
    stderr: float
    n: int
    weight_bound: float


def mc_estimate(x, v, S, h, n_samples: int, k_max: int, curve: BoundaryCurve, eps: float = 1.0,
                nu=None, q0: float = 1.0, seed: int = 0, key=(0,), threads: int = 1) -> Estimate:
    """Estimate f(x, v); S(x, v) and h(x_b, v) act on (n, 2) arrays row-wise.

    Samples are split into fixed chunks with their own streams, so the result
    does not depend on ``threads``.
    """
    nu = nu or (lambda s: collision_frequency(s, q0))
    n_chunks = -(-n_samples // CHUNK)
    sizes = [min(CHUNK, n_samples - i * CHUNK) for i in range(n_chunks)]
    rngs = _streams(seed, key, n_chunks)

    def run(i):
        return _estimate_chunk(x, v, sizes[i], S, h, nu, curve, eps, k_max, rngs[i])

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, range(n_chunks)))
    else:
        parts = [run(i) for i in range(n_chunks)]
    phi = np.concatenate([p[0] for p in parts])
    wend = np.concatenate([p[1] for p in parts])
    smu = float(sqrt_maxwellian(*np.asarray(v, float)))
    bound = float(wend.max()) if wend.size else 0.0
    if bound > 0:
        warnings.warn(f"k_max={k_max} reached with residual weight up to {bound:.3g}", BiasWarning)
    return Estimate(smu * float(phi.mean()), smu * float(phi.std(ddof=1) / np.sqrt(phi.size)),
                    int(phi.size), bound)


# --- manufactured solution ---------------------------------------------------

@dataclass
class Manufactured:
    """f = mu^{1/2}(v) (1 + a x1 + b x2 v1 + c |x|^2 v2) with matching S and h."""

    curve: BoundaryCurve
    eps: float
    q0: float = 1.0
    a: float = 0.5
    b: float = 0.3
    c: float = 0.2

    def poly(self, x, v):
        return 1 + self.a * x[:, 0] + self.b * x[:, 1] * v[:, 0] + self.c * (x * x).sum(1) * v[:, 1]

    def exact(self, x, v):
        x, v = np.atleast_2d(x), np.atleast_2d(v)
        return sqrt_maxwellian(v[:, 0], v[:, 1]) * self.poly(x, v)

    def S(self, x, v):
        g1 = self.a + 2 * self.c * x[:, 0] * v[:, 1]
        g2 = self.b * v[:, 0] + 2 * self.c * x[:, 1] * v[:, 1]
        nu = collision_frequency(np.hypot(v[:, 0], v[:, 1]), self.q0)
        return sqrt_maxwellian(v[:, 0], v[:, 1]) * (
            self.eps * (v[:, 0] * g1 + v[:, 1] * g2) + nu * self.poly(x, v))

    def h(self, xb, v):
        """f - P[f] on the boundary; E_sigma[u] = sqrt(pi/2) n."""
        th = np.arctan2(xb[:, 1], xb[:, 0])
        n = self.curve.normal(th) * np.sqrt(0.5 * np.pi)
        mean = 1 + self.a * xb[:, 0] + self.b * xb[:, 1] * n[:, 0] + self.c * (xb * xb).sum(1) * n[:, 1]
        return self.exact(xb, v) - sqrt_maxwellian(v[:, 0], v[:, 1]) * mean


def probe_points(n: int = 20, seed: int = 12345, r_max: float = 0.8):
    rng = np.random.default_rng(seed)
    r = r_max * np.sqrt(rng.random(n))
    a = 2 * np.pi * rng.random(n)
    x = np.stack([r * np.cos(a), r * np.sin(a)], 1)
    s = 0.3 + 2.2 * rng.random(n)
    b = 2 * np.pi * rng.random(n)
    v = np.stack([s * np.cos(b), s * np.sin(b)], 1)
    return x, v


@dataclass
class ProbeRow:
    x1: float
    x2: float
    v1: float
    v2: float
    exact: float
    estimate: float
    stderr: float
    n: int
    within_3sigma: bool


def verify_manufactured(curve: BoundaryCurve, eps: float = 1.0, n_samples: int = 10_000,
                        k_max: int = 50, n_probes: int = 20, seed: int = 0, threads: int = 1,
                        q0: float = 1.0):
    m = Manufactured(curve, eps, q0)
    xs, vs = probe_points(n_probes)
    rows = []
    for i, (x, v) in enumerate(zip(xs, vs)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BiasWarning)
            est = mc_estimate(x, v, m.S, m.h, n_samples, k_max, curve, eps, q0=q0,
                              seed=seed, key=(i,), threads=threads)
        ex = float(m.exact(x, v)[0])
        rows.append(ProbeRow(*map(float, x), *map(float, v), ex, est.value, est.stderr, est.n,
                             bool(abs(est.value - ex) <= 3 * est.stderr)))
    return rows


def cycle_survival_stats(T0: float, eps: float, ks, n_samples: int, curve: BoundaryCurve,
                         seed: int = 0, x0=None):
    """Fraction of cycles with t_k < T0/eps, for each k in ``ks``.

    Cycles start at a boundary point with a diffuse velocity; t_k sums the
    first k backward flight times, and every k uses the same cycles.
    """
    if T0 < 1:
        raise ValueError("T0 must be at least 1")
    ks = [int(k) for k in ks]
    kmax = max(ks + [0])
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    X = np.repeat(np.atleast_2d(curve.point(0.0) if x0 is None else x0), n_samples, 0)
    V = sample_diffuse(X, curve, rng)
    t = np.zeros((kmax + 1, n_samples))
    for k in range(1, kmax + 1):
        tb, X = exit_time(X, V, curve, eps)
        t[k] = t[k - 1] + tb
        V = sample_diffuse(X, curve, rng)
    return {k: float(np.mean(t[k] < T0 / eps)) for k in ks}


def probes_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x1", "x2", "v1", "v2", "exact", "estimate", "stderr", "n", "within_3sigma"])
    for r in rows:
        w.writerow([repr(r.x1), repr(r.x2), repr(r.v1), repr(r.v2), repr(r.exact),
                    repr(r.estimate), repr(r.stderr), r.n, int(r.within_3sigma)])
    return buf.getvalue()
