"""The eps-Milne problem with geometric correction on one boundary slice.

    va dg/deta + G(eta)(vb^2 dg/dva - va vb dg/dvb) + L g = S,
    g(0, v) = h(v) for va > 0,   g(L, va, vb) = g(L, -va, vb).

At fixed speed s the transport part is s cos(phi) d_eta + (eps/rho) s sin(phi)
d_phi with rho = R - eps eta, which we write in the conservative form
d_eta(rho cos(phi) g) + eps d_phi(sin(phi) g) + (rho/s)(L g - S) = 0 and
discretize by finite volumes on cells [eta_k, eta_k+1] x [phi faces].  Cells
are solved by upwind sweeps (inward rows first, then the reflection at L,
then outward rows), which makes the transport solve an explicit linear map
T.  The collision coupling is handled by GMRES on the cell states x:

    (I - T K) x = T S + T_h h.

Radial fields are reproduced exactly by the sweep, so psi_0 and psi_3 are
discrete solutions up to the operator's own null-space residual.
"""
from __future__ import annotations

import functools
import json
import logging
import struct
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.linalg import lu_factor, lu_solve, null_space
from scipy.sparse.linalg import LinearOperator, gmres

from .characteristics import MilneGeometry
from .collision import LinearizedOperator

log = logging.getLogger(__name__)

_MAGIC = b"KLMS"


class MilneConvergenceError(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@functools.lru_cache(maxsize=None)
def phi_flux_weights(nphi: int) -> np.ndarray:
    """Face-flux stencil along one half-circle chain of angular cells.

    Cells j = 0..M-1 (M = nphi/2) run from phi = 0 to pi, faces f = 0..M.  The
    flux through face f is sum_d W[f, d] g[f - d] for d = 1..3 (upwind cells)
    plus W[f, 0] g[f] (downwind, only used on face M-1).  The weights are the
    ones closest to first-order upwinding that satisfy
      sum_d W[f, d] = sin(phi_f)                      (radial fields exact),
      sum_f cos(phi_f) W[f, f-j] = sin(phi_j)cos(phi_j) (vb-moment identity).
    The second condition makes the discrete <va psi_2, g> obey the same
    rho^2-conservation law as the continuum problem.
    """
    if nphi < 8 or nphi % 4:
        raise ValueError("n_phi must be a multiple of 4 and at least 8")
    M = nphi // 2
    dphi = 2.0 * np.pi / nphi
    sf = np.sin(np.arange(M + 1) * dphi)
    cf = np.cos(np.arange(M + 1) * dphi)
    pc = (np.arange(M) + 0.5) * dphi
    var = [(f, f - d) for f in range(1, M) for d in (1, 2, 3) if f - d >= 0]
    var.append((M - 1, M - 1))
    A = np.zeros((2 * M - 1, len(var)))
    rhs = np.concatenate([sf[1:M], np.sin(pc) * np.cos(pc)])
    for i, (f, j) in enumerate(var):
        A[f - 1, i] = 1.0
        A[M - 1 + j, i] = cf[f]
    x0 = np.array([sf[f] if j == f - 1 else 0.0 for f, j in var])
    xp = np.linalg.lstsq(A, rhs, rcond=None)[0]
    Z = null_space(A)
    x = xp + Z @ (Z.T @ (x0 - xp))
    if np.abs(A @ x - rhs).max() > 1e-10:
        raise RuntimeError("angular flux constraints are inconsistent")
    W = np.zeros((M + 1, 4))
    for (f, j), v in zip(var, x):
        W[f, f - j] = v
    return W


@numba.njit(cache=True)
def _cell(j, lower, nphi):
    return nphi - 1 - j if lower else j


@numba.njit(cache=True)
def _face_flux(W, f, Gn, k, ir, tp, tm, lower, nphi):
    """Flux through chain face f from the eta-averaged node values."""
    out = 0.0
    for d in range(4):
        w = W[f, d]
        if w != 0.0:
            b = _cell(f - d, lower, nphi)
            out += w * (tp * Gn[k + 1, ir, b] + tm * Gn[k, ir, b])
    return out


@numba.njit(cache=True)
def _sweep(eta, rho, eps_g, speeds, nphi, sig, Q, h, W):
    """One transport solve.  Q: cell sources (N, nr, nphi); h: inflow (nr, nphi).

    Returns cell states X (N, nr, nphi) and node values Gn (N+1, nr, nphi).
    ``sig`` is nu + lambda per speed.  Unknown node values are zero in Gn
    until they are solved for, so face fluxes evaluated beforehand hold only
    the known part.
    """
    N = eta.size - 1
    nr = speeds.size
    dphi = 2.0 * np.pi / nphi
    q4 = nphi // 4
    M = 2 * q4
    C = np.empty(M)
    for j in range(M):
        C[j] = np.sin((j + 1) * dphi) - np.sin(j * dphi)
    X = np.zeros((N, nr, nphi))
    Gn = np.zeros((N + 1, nr, nphi))
    for ir in range(nr):
        for b in range(nphi):
            if b < q4 or b >= 3 * q4:
                Gn[0, ir, b] = h[ir, b]
    # inward rows
    for k in range(N):
        de = eta[k + 1] - eta[k]
        rm = 0.5 * (rho[k] + rho[k + 1])
        tp = rho[k + 1] / (rho[k] + rho[k + 1])
        tm = 1.0 - tp
        ed = eps_g * de
        for ir in range(nr):
            s = speeds[ir]
            dmp = de * dphi * rm * sig[ir] / s
            src = de * dphi * rm / s
            for lower in (False, True):
                for j in range(q4):
                    b = _cell(j, lower, nphi)
                    fin = _face_flux(W, j, Gn, k, ir, tp, tm, lower, nphi)
                    fout = _face_flux(W, j + 1, Gn, k, ir, tp, tm, lower, nphi)
                    a = rho[k + 1] * C[j] + dmp + ed * W[j + 1, 1] * tp
                    r = rho[k] * C[j] * Gn[k, ir, b] + src * Q[k, ir, b] - ed * (fout - fin)
                    x = r / a
                    X[k, ir, b] = x
                    Gn[k + 1, ir, b] = x
    # reflection at L: outward node (phi) takes the inward value at (pi - phi)
    for ir in range(nr):
        for b in range(q4, 3 * q4):
            Gn[N, ir, b] = Gn[N, ir, (2 * q4 - 1 - b) % nphi]
    # outward rows
    for k in range(N - 1, -1, -1):
        de = eta[k + 1] - eta[k]
        rm = 0.5 * (rho[k] + rho[k + 1])
        tp = rho[k + 1] / (rho[k] + rho[k + 1])
        tm = 1.0 - tp
        ed = eps_g * de
        for ir in range(nr):
            s = speeds[ir]
            dmp = de * dphi * rm * sig[ir] / s
            src = de * dphi * rm / s
            for lower in (False, True):
                for j in range(q4, M - 2):
                    b = _cell(j, lower, nphi)
                    fin = _face_flux(W, j, Gn, k, ir, tp, tm, lower, nphi)
                    fout = _face_flux(W, j + 1, Gn, k, ir, tp, tm, lower, nphi)
                    a = -rho[k] * C[j] + dmp + ed * W[j + 1, 1] * tm
                    r = src * Q[k, ir, b] - rho[k + 1] * C[j] * Gn[k + 1, ir, b] - ed * (fout - fin)
                    x = r / a
                    X[k, ir, b] = x
                    Gn[k, ir, b] = x
                # last two cells share face M-1, whose flux looks one cell downwind
                j1 = M - 2
                b1 = _cell(j1, lower, nphi)
                b2 = _cell(j1 + 1, lower, nphi)
                fin = _face_flux(W, j1, Gn, k, ir, tp, tm, lower, nphi)
                fmid = _face_flux(W, j1 + 1, Gn, k, ir, tp, tm, lower, nphi)
                a11 = -rho[k] * C[j1] + dmp + ed * W[j1 + 1, 1] * tm
                a12 = ed * W[j1 + 1, 0] * tm
                a21 = -ed * W[j1 + 1, 1] * tm
                a22 = -rho[k] * C[j1 + 1] + dmp - ed * W[j1 + 1, 0] * tm
                r1 = src * Q[k, ir, b1] - rho[k + 1] * C[j1] * Gn[k + 1, ir, b1] - ed * (fmid - fin)
                r2 = src * Q[k, ir, b2] - rho[k + 1] * C[j1 + 1] * Gn[k + 1, ir, b2] + ed * fmid
                det = a11 * a22 - a12 * a21
                x1 = (r1 * a22 - a12 * r2) / det
                x2 = (a11 * r2 - a21 * r1) / det
                X[k, ir, b1] = x1
                Gn[k, ir, b1] = x1
                X[k, ir, b2] = x2
                Gn[k, ir, b2] = x2
    return X, Gn


@dataclass
class MilneProblem:
    """Inflow data ``h`` (callable of (va, vb) or node values) and optional source.

    ``S`` is None, a callable eta -> node values, or an array (n_eta, N) of
    node values on ``geom.eta``.
    """

    geom: MilneGeometry
    op: LinearizedOperator
    h: object
    S: object = None

    def __post_init__(self):
        grid = self.op.grid
        if grid.n_phi % 4:
            raise ValueError("the Milne solver needs n_phi divisible by 4")
        h = self.h(grid.v1, grid.v2) if callable(self.h) else np.asarray(self.h, dtype=float)
        if h.shape != (grid.size,):
            raise ValueError("boundary data must have one value per velocity node")
        h = np.where(grid.v1 > 0, h, 0.0)
        self.h_nodes = h
        self.S_nodes = self._source_nodes()

    def _source_nodes(self):
        eta = self.geom.eta
        n = self.op.grid.size
        if self.S is None:
            return None
        if callable(self.S):
            return np.array([self.S(e) for e in eta], dtype=float)
        S = np.asarray(self.S, dtype=float)
        if S.shape != (eta.size, n):
            raise ValueError(f"source must have shape {(eta.size, n)}")
        return S


@dataclass
class MilneSolution:
    problem: MilneProblem
    g: np.ndarray = field(repr=False)          # (n_eta, N) node values
    cells: np.ndarray = field(repr=False)      # (n_eta - 1, N) cell states
    q: np.ndarray = field(repr=False)          # (n_eta, 4) null-space coefficients
    qL: np.ndarray = None
    iterations: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    residual: float = np.nan
    K0_fit: float | None = None

    @property
    def eta(self) -> np.ndarray:
        return self.problem.geom.eta

    @property
    def w(self) -> np.ndarray:
        return self.g - self.q @ self.problem.op.psi

    def norms(self) -> np.ndarray:
        wts = self.problem.op.grid.weights
        return np.sqrt((self.g ** 2) @ wts)

    def flux_moments(self) -> np.ndarray:
        """<va psi_i, g>(eta) for i = 0..3, shape (n_eta, 4)."""
        op = self.problem.op
        va = op.grid.v1
        return (self.g * op.grid.weights) @ (op.psi * va).T

    def orthogonality(self) -> np.ndarray:
        """<va psi_i, w>(eta), shape (n_eta, 4)."""
        op = self.problem.op
        return (self.w * op.grid.weights) @ (op.psi * op.grid.v1).T


class _Transport:
    """Sweep bookkeeping shared by the GMRES matvec and the final reconstruction."""

    def __init__(self, problem: MilneProblem, lam: float):
        geom, op = problem.geom, problem.op
        grid = op.grid
        self.grid = grid
        self.op = op
        self.eta = geom.eta
        self.N = geom.eta.size - 1
        self.rho = geom.Rk - geom.G_scale * geom.eta
        self.eps_g = geom.G_scale
        self.sig = op.nu[:: grid.n_phi] + lam
        if np.ptp(op.nu.reshape(grid.n_r, grid.n_phi), axis=1).max() > 1e-8 * op.nu.max():
            raise ValueError("collision frequency must be radial for the sweep")
        self.shape = (self.N, grid.n_r, grid.n_phi)
        self.zero_h = np.zeros((grid.n_r, grid.n_phi))
        self.zero_q = np.zeros(self.shape)
        self.lam = lam
        self.W = phi_flux_weights(grid.n_phi)

    def sweep(self, Q, h=None):
        h = self.zero_h if h is None else h
        return _sweep(self.eta, self.rho, self.eps_g, self.grid.speeds, self.grid.n_phi,
                      self.sig, Q.reshape(self.shape), h.reshape(self.grid.n_r, self.grid.n_phi),
                      self.W)

    def collide(self, x):
        """Cell source K x (+ lambda x for the penalized problem is already in sig)."""
        return self.op.apply_K(x.reshape(self.N, -1))


def _cell_source(problem: MilneProblem):
    S = problem.S_nodes
    if S is None:
        return None
    return 0.5 * (S[1:] + S[:-1])


class _CoarseCorrection:
    """Two-level right preconditioner for I - T K.

    The slow modes of the fixed-point map are null-space fields varying over
    the whole slab, so the coarse space is psi_i times piecewise-linear hats
    on every ``stride``-th eta node.  M^{-1} y = Z c + (y - A Z c) with
    c = (Z^T A Z)^{-1} Z^T y.
    """

    def __init__(self, matvec, eta, psi, n_coarse: int):
        em = 0.5 * (eta[1:] + eta[:-1])
        idx = np.unique(np.linspace(0, eta.size - 1, max(2, n_coarse)).round().astype(int))
        nodes = eta[idx]
        cols = []
        for m in range(nodes.size):
            hat = np.interp(em, nodes, np.eye(nodes.size)[m])
            for p in psi:
                cols.append(np.outer(hat, p).ravel())
        self.Z = np.array(cols).T
        self.AZ = np.column_stack([matvec(z) for z in self.Z.T])
        self.lu = lu_factor(self.Z.T @ self.AZ)

    def __call__(self, y):
        c = lu_solve(self.lu, self.Z.T @ y)
        return self.Z @ c + (y - self.AZ @ c)


def solve(problem: MilneProblem, lam_schedule=(0.0,), tol: float = 1e-6,
          max_iter: int = 500, restart: int = 150, x0=None,
          n_coarse: int = 20) -> MilneSolution:
    """Solve by preconditioned GMRES on cell states, optionally with penalty continuation.

    Each entry of ``lam_schedule`` adds lambda to the damping for one stage and
    warm-starts the next; the last entry should be 0.  With GMRES a single
    lambda = 0 stage is usually cheapest.  ``max_iter`` bounds the GMRES
    iterations per stage; ``tol`` is the target sup norm of the fixed-point
    residual x - T(Kx + S) - T_h h.  ``n_coarse`` eta nodes carry the
    coarse correction (0 disables it).
    """
    grid = problem.op.grid
    Sc = _cell_source(problem)
    h = problem.h_nodes
    iters, hist = [], []
    x = x0
    for lam in lam_schedule:
        tr = _Transport(problem, lam)
        # the penalized problem keeps lambda g on the collision side
        base_q = np.zeros((tr.N, grid.size)) if Sc is None else Sc.copy()
        X_rhs, _ = tr.sweep(base_q, h)
        b = X_rhs.reshape(tr.N, -1).ravel()

        def matvec(v, tr=tr):
            Xv, _ = tr.sweep(tr.collide(v))
            return v - Xv.reshape(-1)

        if n_coarse:
            M = _CoarseCorrection(matvec, problem.geom.eta, problem.op.psi, n_coarse)
        else:
            M = lambda y: y  # noqa: E731
        A = LinearOperator((b.size, b.size), matvec=lambda y, M=M, mv=matvec: mv(M(y)),
                           dtype=float)
        count = [0]

        def cb(_r, count=count):
            count[0] += 1

        last = lam == lam_schedule[-1]
        # The fixed point is ill-conditioned (solution error is about 100x the
        # residual), so GMRES runs well past the requested residual.
        # a previous stage's x is a fair starting guess for y as well
        y, info = gmres(A, b, x0=x, rtol=0.0, atol=(1e-2 if last else 10.0) * tol,
                        restart=restart, maxiter=max(1, -(-max_iter // restart)),
                        callback=cb, callback_type="pr_norm")
        x = M(y)
        res = float(np.abs(b - matvec(x)).max())
        iters.append(count[0])
        hist.append(res)
        log.info("milne stage lambda=%g: %d iterations, residual %.3g", lam, count[0], res)
    if not hist[-1] <= tol:
        raise MilneConvergenceError(
            f"Milne solve stalled at residual {hist[-1]:.3g} (tol {tol:g})", hist)
    tr = _Transport(problem, lam_schedule[-1])
    Q = tr.collide(x)
    if Sc is not None:
        Q = Q + Sc
    X, Gn = tr.sweep(Q, h)
    g = Gn.reshape(tr.N + 1, -1)
    q = problem.op.null_coefficients(g)
    sol = MilneSolution(problem, g, X.reshape(tr.N, -1), q, iterations=iters,
                        residual_history=hist, residual=hist[-1])
    sol.qL = limit_state(sol)
    return sol


def limit_state(solution: MilneSolution, tol: float = 1e-6) -> np.ndarray:
    """Null-space coefficients of g(L) with the psi_1 slot set to zero."""
    q = solution.q[-1].copy()
    if abs(q[1]) > 10 * tol:
        log.warning("psi_1 component of g(L) is %.3g; solver quality is poor", q[1])
    q[1] = 0.0
    return q


def mass_flux(solution: MilneSolution, eta_index=None):
    """<va psi_0, g> at the given node index (all nodes when None)."""
    f = solution.flux_moments()[:, 0]
    return f if eta_index is None else f[eta_index]


def energy_dissipation(solution: MilneSolution) -> np.ndarray:
    """alpha(eta) = <va g, g>/2."""
    op = solution.problem.op
    return 0.5 * (solution.g ** 2 * op.grid.v1) @ op.grid.weights


@dataclass
class Corrector:
    D: np.ndarray            # coefficients on psi_0..psi_3, D[1] = 0
    T: np.ndarray            # 3 x 3 matrix on (psi_0, psi_2, psi_3)
    qL: np.ndarray           # limit state of the base problem
    columns: dict = field(default_factory=dict)

    def field(self, op: LinearizedOperator) -> np.ndarray:
        return self.D @ op.psi

    def off_identity(self) -> float:
        return float(np.abs(self.T - np.eye(3)).max())


def build_corrector(problem: MilneProblem, base: MilneSolution | None = None,
                    **solve_kw) -> Corrector:
    """h~ in span(psi_0, psi_2, psi_3) so that data h - h~ has zero limit state."""
    base = solve(problem, **solve_kw) if base is None else base
    op = problem.op
    cols = {}
    T = np.empty((3, 3))
    slots = (0, 2, 3)
    for j, i in enumerate(slots):
        sub = MilneProblem(problem.geom, op, op.psi[i])
        qL = solve(sub, **solve_kw).qL
        cols[i] = qL
        T[:, j] = qL[list(slots)]
    if np.linalg.cond(T) > 1e10:
        raise np.linalg.LinAlgError("corrector matrix is singular; use a smaller eps")
    d = np.linalg.solve(T, base.qL[list(slots)])
    D = np.zeros(4)
    D[list(slots)] = d
    return Corrector(D, T, base.qL, cols)


def decay_rate(solution: MilneSolution, window=(0.25, 0.75), floor: float = 1e-14,
               subtract_limit: bool = True) -> float:
    """Least-squares slope of -log ||g - q_L psi|| over ``window`` (fractions of L)."""
    eta = solution.eta
    op = solution.problem.op
    g = solution.g
    if subtract_limit:
        g = g - solution.qL @ op.psi
    nrm = np.sqrt((g ** 2) @ op.grid.weights)
    L = solution.problem.geom.L
    sel = (eta >= window[0] * L) & (eta <= window[1] * L) & (nrm > floor)
    if sel.sum() < 2:
        solution.K0_fit = np.nan
        return np.nan
    slope = np.polyfit(eta[sel], np.log(nrm[sel]), 1)[0]
    solution.K0_fit = float(-slope)
    return solution.K0_fit


def synthetic_decay(eta, rate) -> float:
    """Slope fit of exp(-rate eta) on [L/4, 3L/4]; used as a check of the fitter."""
    eta = np.asarray(eta, dtype=float)
    L = eta[-1]
    sel = (eta >= 0.25 * L) & (eta <= 0.75 * L)
    return float(-np.polyfit(eta[sel], -rate * eta[sel], 1)[0])


def dump(solution: MilneSolution, path, json_path=None) -> None:
    """Binary field file (header + eta-major float64 block) and optional JSON summary."""
    geom = solution.problem.geom
    grid = solution.problem.op.grid
    head = struct.pack("<4sI5d2I", _MAGIC, 1, geom.eps, geom.Rk, geom.L, grid.vmax,
                       float(geom.flat), grid.n_r, grid.n_phi)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(struct.pack("<I", geom.eta.size))
        fh.write(np.ascontiguousarray(geom.eta, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(solution.g, dtype="<f8").tobytes())
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(summary(solution), fh, indent=2)


def load_field(path):
    """Read a field file written by ``dump``; returns (header dict, eta, g)."""
    data = open(path, "rb").read()
    fmt = "<4sI5d2I"
    n0 = struct.calcsize(fmt)
    magic, ver, eps, Rk, L, vmax, flat, nr, nphi = struct.unpack(fmt, data[:n0])
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a Milne field file")
    (ne,) = struct.unpack("<I", data[n0:n0 + 4])
    arr = np.frombuffer(data[n0 + 4:], dtype="<f8")
    eta = arr[:ne].copy()
    g = arr[ne:].reshape(ne, nr * nphi).copy()
    head = dict(eps=eps, Rk=Rk, L=L, vmax=vmax, flat=bool(flat), n_r=nr, n_phi=nphi)
    return head, eta, g


def summary(solution: MilneSolution) -> dict:
    fl = solution.flux_moments()
    return {
        "eps": solution.problem.geom.eps,
        "L": solution.problem.geom.L,
        "qL": [float(v) for v in solution.qL],
        "K0_fit": None if solution.K0_fit is None else float(solution.K0_fit),
        "residual": float(solution.residual),
        "iterations": [int(i) for i in solution.iterations],
        "max_mass_flux": float(np.abs(fl[:, 0]).max()),
        "max_q1": float(np.abs(solution.q[:, 1]).max()),
    }
