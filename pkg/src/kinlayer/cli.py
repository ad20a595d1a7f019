"""Command-line runner: one subcommand per study, INI configuration.

Every subcommand writes ``<out>/<subcommand>.json`` (top-level "schema",
stable key order) plus CSV tables, and exits 0 only if all of its checked
invariants pass.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("kinlayer")

EXIT_FAIL = 1
EXIT_CONFIG = 2

DEFAULTS = {
    "velocity": {"vmax": "6.0", "n_r": "24", "n_phi": "32", "q0": "1.0", "cache_dir": ""},
    "curve": {"cos": "1.0", "sin": "0.0"},
    "milne": {"eps": "0.1, 0.05, 0.025", "lam_schedule": "0.0", "tol": "1e-6",
              "max_iter": "500", "n_eta": "200", "data": "generic"},
    "regularity": {"mode": "geometric", "eps": "0.05", "levels": "3", "data": "generic"},
    "tangential": {"eps": "0.05", "n_theta": "4", "data": "generic"},
    "hydro": {"theta_b1_cos": "0.0, 1.0", "theta_b1_sin": "0.0", "branch": "non-isothermal",
              "eps": "0.1, 0.05, 0.025", "n_theta": "16", "theta_stride": "2", "n_eta": "200"},
    "mc": {"seed": "0", "samples": "10000", "k_max": "50", "eps": "1.0", "probes": "20",
           "T0": "2.0", "survival_eps": "0.1", "survival_k": "0, 5, 10, 20, 40",
           "survival_samples": "10000"},
}

NEEDS = {
    "operator-check": ("velocity",),
    "milne-solve": ("velocity", "milne"),
    "milne-corrector": ("velocity", "milne"),
    "decay-scan": ("velocity", "milne"),
    "regularity-scan": ("velocity", "milne", "regularity"),
    "tangential": ("velocity", "curve", "milne", "tangential"),
    "hydro-solve": ("velocity", "hydro"),
    "expansion-scan": ("velocity", "hydro"),
    "mc-verify": ("curve", "mc"),
}

EPILOG = "config blocks and defaults:\n" + "\n".join(
    f"  [{sec}] " + ", ".join(f"{k}={v or '(none)'}" for k, v in keys.items())
    for sec, keys in DEFAULTS.items())


class ConfigError(ValueError):
    pass


class Config:
    """Typed access to an INI file; every error names the block and key."""

    def __init__(self, path):
        self.path = str(path)
        self.cp = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                self.cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def require(self, *sections):
        for sec in sections:
            if not self.cp.has_section(sec):
                raise ConfigError(f"{self.path}: missing [{sec}] block")

    def raw(self, sec, key):
        return self.cp.get(sec, key, fallback=DEFAULTS[sec][key]).strip()

    def _conv(self, sec, key, fn, kind):
        val = self.raw(sec, key)
        try:
            return fn(val)
        except ValueError:
            raise ConfigError(f"{self.path}: [{sec}] {key} = {val!r} is not {kind}") from None

    def float(self, sec, key):
        return self._conv(sec, key, float, "a number")

    def int(self, sec, key):
        return self._conv(sec, key, int, "an integer")

    def floats(self, sec, key):
        return self._conv(sec, key, lambda s: [float(x) for x in s.split(",") if x.strip()],
                          "a comma-separated list of numbers")

    def ints(self, sec, key):
        return self._conv(sec, key, lambda s: [int(x) for x in s.split(",") if x.strip()],
                          "a comma-separated list of integers")

    def eps_list(self, sec, key="eps"):
        eps = self.floats(sec, key)
        if not eps or any(not 0 < e <= 0.25 for e in eps):
            raise ConfigError(f"{self.path}: [{sec}] {key} values must lie in (0, 0.25]")
        return eps

    def as_dict(self, sections):
        return {sec: {k: self.raw(sec, k) for k in DEFAULTS[sec]} for sec in sections}


# --- report plumbing -------------------------------------------------------

def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


class Report:
    def __init__(self, command, cfg: Config):
        self.command = command
        self.config = cfg.as_dict(NEEDS[command])
        self.results = {}
        self.invariants = {}
        self.tables = {}

    def check(self, name, value, ok, threshold=None):
        self.invariants[name] = {"value": value, "threshold": threshold, "pass": bool(ok)}

    @property
    def passed(self):
        return all(v["pass"] for v in self.invariants.values())

    def to_json(self):
        doc = {"schema": f"kinlayer.{self.command}/1", "command": self.command,
               "config": self.config, "results": self.results,
               "invariants": self.invariants, "pass": self.passed}
        return json.dumps(_clean(doc), indent=2, ensure_ascii=False, allow_nan=False) + "\n"

    def write(self, out: Path):
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{self.command}.json").write_text(self.to_json(), encoding="utf-8")
        for name, (header, rows) in self.tables.items():
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
            (out / f"{self.command}_{name}.csv").write_text(buf.getvalue(), encoding="utf-8")

    def summary(self):
        lines = [f"{self.command}: {'PASS' if self.passed else 'FAIL'}"]
        for k, v in self.invariants.items():
            lines.append(f"  {'ok  ' if v['pass'] else 'FAIL'} {k} = {_short(v['value'])}"
                         + ("" if v["threshold"] is None else f" (threshold {v['threshold']})"))
        return "\n".join(lines)


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_short(x) for x in v) + "]"
    return str(v)


# --- shared builders ---------------------------------------------------------

def _operator(cfg: Config):
    from .collision import build_operator
    from .velocity import build_grid
    grid = build_grid(cfg.float("velocity", "vmax"), cfg.int("velocity", "n_r"),
                      cfg.int("velocity", "n_phi"))
    cache = cfg.raw("velocity", "cache_dir") or None
    return build_operator(grid, cfg.float("velocity", "q0"), cache_dir=cache)


def _curve(cfg: Config):
    from .geometry import from_fourier
    try:
        return from_fourier(cfg.floats("curve", "cos"), cfg.floats("curve", "sin"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{cfg.path}: [curve] {exc}") from None


def boundary_data(name: str):
    """Named in-flow data for the Milne studies."""
    from .velocity import sqrt_maxwellian as m
    table = {
        "psi0": lambda a, b: m(a, b),
        "psi2": lambda a, b: m(a, b) * b,
        "psi3": lambda a, b: m(a, b) * 0.5 * (a * a + b * b - 2.0),
        "generic": lambda a, b: m(a, b) * (1.0 + a ** 3 + 0.5 * a * b),
        "vanishing": lambda a, b: m(a, b) * a * a,
    }
    if name not in table:
        raise ConfigError(f"unknown boundary data {name!r}; choose from {', '.join(table)}")
    return table[name]


def _solve_kw(cfg: Config):
    return {"lam_schedule": tuple(cfg.floats("milne", "lam_schedule")),
            "tol": cfg.float("milne", "tol"), "max_iter": cfg.int("milne", "max_iter")}


# --- subcommands -------------------------------------------------------------

def random_smooth_pairs(grid, n_pairs, seed):
    """Pairs mu^{1/2} p(v) with p a random cubic polynomial."""
    from .velocity import sqrt_maxwellian
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    mons = np.array([grid.v1 ** i * grid.v2 ** j for i in range(4) for j in range(4 - i)])
    mons = mons * sqrt_maxwellian(grid.v1, grid.v2)
    return [tuple(rng.standard_normal((2, len(mons))) @ mons) for _ in range(n_pairs)]


def gamma_conservation(op, n_pairs, seed):
    """max_i |<Gamma[f,g], psi_i>| / (|f||g|) for Gamma and for its raw quadrature."""
    w = op.grid.weights
    worst = raw = 0.0
    for f, g in random_smooth_pairs(op.grid, n_pairs, seed):
        G, defect = op.gamma(f, g, return_defect=True)
        nfg = np.sqrt(f * f @ w) * np.sqrt(g * g @ w)
        worst = max(worst, float(np.abs(op.psi @ (G * w)).max() / nfg))
        raw = max(raw, float(np.abs(op.psi @ ((G + defect @ op.psi) * w)).max() / nfg))
    return worst, raw


def cmd_operator_check(cfg, args, rep):
    from .collision import collision_frequency
    op = _operator(cfg)
    grid = op.grid
    tol_null = 1e-3
    res = op.null_residuals()
    ev = np.sort(np.abs(op.eigenvalues()))
    asym = op.asymmetry()
    nu0 = float(collision_frequency(0.0, op.q0))
    ratio = op.nu / (1.0 + grid.s)
    worst, raw = gamma_conservation(op, 50, args.seed)
    rep.results.update({"grid": [grid.n_r, grid.n_phi], "vmax": grid.vmax, "tol_null": tol_null,
                        "null_residuals": res, "asymmetry": asym, "smallest_eigenvalues": ev[:6],
                        "sigma_gap": ev[4], "nu0": nu0, "nu_ratio_range": [ratio.min(), ratio.max()],
                        "gamma_conservation_defect": worst,
                        "gamma_raw_quadrature_defect": raw})
    rep.check("null_residuals", float(res.max()), res.max() <= tol_null, tol_null)
    rep.check("asymmetry", asym, asym <= 1e-10, 1e-10)
    rep.check("null_eigenvalues", float(ev[3]), ev[3] <= 1e-3, 1e-3)
    rep.check("sigma_gap", float(ev[4]), ev[4] >= 0.05, 0.05)
    rep.check("nu0", abs(nu0 - 4 * np.pi * op.q0), abs(nu0 - 4 * np.pi * op.q0) <= 1e-4, 1e-4)
    rep.check("nu_lower", float(ratio.min()), ratio.min() > 0, 0.0)
    rep.check("gamma_conservation", worst, worst <= 1e-3, 1e-3)
    rep.tables["spectrum"] = (["index", "eigenvalue"], list(enumerate(ev)))


def _milne_problem(cfg, op, eps, data_name, flat=False):
    from . import milne
    from .characteristics import MilneGeometry
    geom = MilneGeometry(eps, n_eta=cfg.int("milne", "n_eta"), flat=flat)
    return milne.MilneProblem(geom, op, boundary_data(data_name))


def cmd_milne_solve(cfg, args, rep):
    from . import milne
    op = _operator(cfg)
    name = cfg.raw("milne", "data")
    exact = {"psi0": 0, "psi2": 2, "psi3": 3}.get(name)
    rows, out = [], []
    for eps in cfg.eps_list("milne"):
        sol = milne.solve(_milne_problem(cfg, op, eps, name), **_solve_kw(cfg))
        s = milne.summary(sol)
        orth = np.abs(sol.orthogonality()[:, [0, 2, 3]]).max()
        s["max_orthogonality"] = float(orth)
        if exact is not None:
            s["exact_error"] = float(np.abs(sol.g - op.psi[exact]).max())
            rep.check(f"exact_eps={eps:g}", s["exact_error"], s["exact_error"] <= 1e-5, 1e-5)
        rep.check(f"mass_flux_eps={eps:g}", s["max_mass_flux"], s["max_mass_flux"] <= 1e-5, 1e-5)
        rep.check(f"q1_eps={eps:g}", s["max_q1"], s["max_q1"] <= 1e-5, 1e-5)
        out.append(s)
        rows += [(eps, e, n) for e, n in zip(sol.eta, sol.norms())]
        out_dir = Path(args.out or "out")
        out_dir.mkdir(parents=True, exist_ok=True)
        milne.dump(sol, out_dir / f"milne-solve_eps{eps:g}.bin")
    rep.results["data"] = name
    rep.results["solves"] = out
    rep.tables["norms"] = (["eps", "eta", "l2_norm"], rows)


def cmd_milne_corrector(cfg, args, rep):
    from . import milne
    op = _operator(cfg)
    name = cfg.raw("milne", "data")
    eps_list = cfg.eps_list("milne")
    out, offs, rows = [], [], []
    for eps in eps_list:
        prob = _milne_problem(cfg, op, eps, name)
        base = milne.solve(prob, **_solve_kw(cfg))
        cor = milne.build_corrector(prob, base, **_solve_kw(cfg))
        sol = milne.solve(milne.MilneProblem(prob.geom, op, prob.h_nodes - cor.field(op)),
                          **_solve_kw(cfg))
        n = sol.norms()
        # data inside the corrector span leave nothing to decay
        vanished = n.max() <= 1e-12
        K0 = math.inf if vanished else milne.decay_rate(sol)
        mass = float(np.abs(milne.mass_flux(sol)).max())
        ratio = 0.0 if vanished else float(n[-1] / n[0])
        offs.append(cor.off_identity())
        out.append({"eps": eps, "T": cor.T, "corrector": cor.D, "off_identity": cor.off_identity(),
                    "base_limit": cor.qL, "K0": K0, "ratio_L_0": ratio, "max_mass_flux": mass})
        rows += [(eps, e, v) for e, v in zip(sol.eta, n)]
        rep.check(f"K0_eps={eps:g}", K0, K0 > 0, 0.0)
        rep.check(f"ratio_eps={eps:g}", ratio, ratio <= 0.01, 0.01)
        rep.check(f"mass_flux_eps={eps:g}", mass, mass <= 1e-5, 1e-5)
    order = np.argsort(eps_list)[::-1]
    seq = [offs[i] for i in order]
    rep.check("T_monotone", seq, all(a > b for a, b in zip(seq, seq[1:])))
    rep.results["data"] = name
    rep.results["correctors"] = out
    rep.tables["corrected_norms"] = (["eps", "eta", "l2_norm"], rows)


def cmd_decay_scan(cfg, args, rep):
    from . import milne
    op = _operator(cfg)
    name = cfg.raw("milne", "data")
    rows = []
    for eps in cfg.eps_list("milne"):
        sol = milne.solve(_milne_problem(cfg, op, eps, name), **_solve_kw(cfg))
        K0 = milne.decay_rate(sol)
        rows.append((eps, sol.problem.geom.L, K0, float(sol.norms()[-1])))
        rep.check(f"K0_eps={eps:g}", K0, np.isfinite(K0) and K0 > 0, 0.0)
    rep.results["data"] = name
    rep.results["rates"] = [{"eps": r[0], "L": r[1], "K0": r[2], "norm_L": r[3]} for r in rows]
    rep.tables["rates"] = (["eps", "L", "K0", "norm_L"], rows)


def cmd_regularity_scan(cfg, args, rep):
    from . import regularity as rg
    op = _operator(cfg)
    mode = args.mode or cfg.raw("regularity", "mode")
    if mode not in ("flat", "geometric"):
        raise ConfigError(f"{cfg.path}: [regularity] mode must be flat or geometric")
    eps = cfg.eps_list("regularity")[0]
    h = boundary_data(cfg.raw("regularity", "data"))
    rows = rg.grazing_scan(op, h, eps, mode, levels=cfg.int("regularity", "levels"),
                           n_eta=cfg.int("milne", "n_eta"), **_solve_kw(cfg))
    uw = [r.sup_unweighted for r in rows]
    ww = [r.sup_weighted for r in rows]
    if mode == "geometric":
        spread = max(ww) / min(ww)
        rep.check("weighted_sup_stable", spread, spread <= 1.5, 1.5)
    else:
        growth = [b / a for a, b in zip(uw, uw[1:])]
        rep.check("unweighted_growth", growth, min(growth) >= 2.0, 2.0)
    rep.results.update({"mode": mode, "eps": eps, "sup_unweighted": uw, "sup_weighted": ww})
    rep.tables["grazing"] = (["level", "h_grazing", "sup_unweighted", "sup_weighted"],
                             [(r.level, r.h_grazing, r.sup_unweighted, r.sup_weighted) for r in rows])


def cmd_tangential(cfg, args, rep):
    from . import milne
    from . import regularity as rg
    op = _operator(cfg)
    curve = _curve(cfg)
    eps = cfg.eps_list("tangential")[0]
    n = cfg.int("tangential", "n_theta")
    h = boundary_data(cfg.raw("tangential", "data"))
    th = 2 * np.pi * np.arange(n) / n
    sl = [milne.solve(milne.MilneProblem(rg.slice_geometry(curve, t, eps,
                                                           n_eta=cfg.int("milne", "n_eta")), op, h),
                      **_solve_kw(cfg)) for t in th]
    Ws = rg.tangential_solve(sl, th, curve, **_solve_kw(cfg))
    sups = [float(np.abs(w.W).max()) for w in Ws]
    circle = np.allclose(curve.cos[1:], 0) and np.allclose(curve.sin, 0)
    if circle:
        rep.check("circle_W", max(sups), max(sups) <= 1e-6, 1e-6)
    else:
        rep.check("W_finite", max(sups), np.isfinite(max(sups)))
    rep.results.update({"eps": eps, "theta": th, "W_sup": sups, "circle": bool(circle)})
    rep.tables["tangential"] = (["theta", "W_sup"], list(zip(th, sups)))


def _hydro_boundary(cfg):
    from .hydro import BoundaryData
    a = np.array(cfg.floats("hydro", "theta_b1_cos"))
    b = np.array(cfg.floats("hydro", "theta_b1_sin"))

    def theta_b1(t):
        t = np.asarray(t, dtype=float)
        k = np.arange(max(a.size, b.size))
        A, B = np.pad(a, (0, k.size - a.size)), np.pad(b, (0, k.size - b.size))
        return np.cos(np.multiply.outer(t, k)) @ A + np.sin(np.multiply.outer(t, k)) @ B

    return BoundaryData(theta_b1=theta_b1)


def cmd_hydro_solve(cfg, args, rep):
    from . import hydro
    from .velocity import build_grid
    grid = build_grid(cfg.float("velocity", "vmax"), cfg.int("velocity", "n_r"),
                      cfg.int("velocity", "n_phi"))
    bd = _hydro_boundary(cfg)
    branch = cfg.raw("hydro", "branch")
    if branch != "non-isothermal":
        raise ConfigError(f"{cfg.path}: [hydro] branch must be non-isothermal from the CLI")
    f = hydro.solve_nsf_leading(bd, branch)
    x, _ = hydro.disk_rule(24)
    th = f.theta_T(x)
    tb = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    _, _, T = bd.values(tb)
    trace = float(np.abs(f.theta_T(np.stack([np.cos(tb), np.sin(tb)], -1)) - T).max())
    bous = f.boussinesq_defect(x)
    norm = f.normalization(grid)
    compat = np.abs(np.array(hydro.flux_compatibility(bd.local_u(tb), T))).max()
    lap = f.hessian(x)
    lap = float(np.abs(lap[:, 0, 0, 3] + lap[:, 1, 1, 3]).max())
    inside = bool(th.min() >= T.min() - 1e-12 and th.max() <= T.max() + 1e-12)
    rep.results.update({"branch": f.branch, "M": f.M, "P2": f.P2,
                        "fourier": np.stack([f.c.real, f.c.imag], -1)})
    rep.check("boundary_trace", trace, trace <= 1e-8, 1e-8)
    rep.check("laplacian", lap, lap <= 1e-8, 1e-8)
    rep.check("boussinesq", bous, bous <= 1e-10, 1e-10)
    rep.check("normalization", abs(norm), abs(norm) <= 1e-8, 1e-8)
    rep.check("flux_compatibility", float(compat), compat <= 1e-8, 1e-8)
    rep.check("maximum_principle", inside, inside)
    r = np.hypot(x[:, 0], x[:, 1])
    rep.tables["fields"] = (["x1", "x2", "r", "theta_T", "rho"],
                            [(a, b, c, d, e) for (a, b), c, d, e in zip(x, r, th, f.M - th)])


def cmd_expansion_scan(cfg, args, rep):
    from . import hydro
    op = _operator(cfg)
    bd = _hydro_boundary(cfg)
    sc = hydro.ScanConfig(eps=tuple(cfg.eps_list("hydro")), n_theta=cfg.int("hydro", "n_theta"),
                          theta_stride=cfg.int("hydro", "theta_stride"),
                          n_eta=cfg.int("hydro", "n_eta"))
    res = hydro.residual_scan(op, bd, sc)
    d = res.to_dict()
    rep.results.update({"meta": d["meta"], "rows": d["rows"], "orders": d["orders"]})
    p = min(res.orders["interior_first_l2"])
    rep.check("interior_first_order", p, p >= 1.5, 1.5)
    col = {(r["eps"], r["variant"]): r["l2"] for r in res.rows if r["region"] == "collar"}
    dec = [col[(e, "full")] < col[(e, "first")] for e in sc.eps]
    rep.check("collar_decrease", dec, all(dec))
    keys = list(res.rows[0].keys())
    rep.tables["residuals"] = (keys, [[r[k] for k in keys] for r in res.rows])


def cmd_mc_verify(cfg, args, rep):
    from . import mc_transport as mc
    curve = _curve(cfg)
    seed = cfg.int("mc", "seed") if args.seed is None else args.seed
    rows = mc.verify_manufactured(curve, eps=cfg.float("mc", "eps"),
                                  n_samples=cfg.int("mc", "samples"), k_max=cfg.int("mc", "k_max"),
                                  n_probes=cfg.int("mc", "probes"), seed=seed,
                                  threads=args.threads)
    ks = cfg.ints("mc", "survival_k")
    surv = mc.cycle_survival_stats(cfg.float("mc", "T0"), cfg.float("mc", "survival_eps"), ks,
                                   cfg.int("mc", "survival_samples"), curve, seed=seed)
    hits = sum(r.within_3sigma for r in rows)
    need = math.ceil(0.9 * len(rows))
    fr = [surv[k] for k in sorted(surv)]
    rep.check("probes_within_3sigma", hits, hits >= need, need)
    rep.check("survival_monotone", fr, all(a >= b for a, b in zip(fr, fr[1:])))
    kmax = max(ks)
    rep.check(f"survival_k={kmax}", surv[kmax], surv[kmax] < 0.5, 0.5)
    rep.results.update({"seed": seed, "survival": {str(k): surv[k] for k in sorted(surv)},
                        "probes_within_3sigma": hits, "n_probes": len(rows)})
    rep.tables["probes"] = (["x1", "x2", "v1", "v2", "exact", "estimate", "stderr", "n",
                             "within_3sigma"],
                            [(r.x1, r.x2, r.v1, r.v2, r.exact, r.estimate, r.stderr, r.n,
                              int(r.within_3sigma)) for r in rows])
    rep.tables["survival"] = (["k", "fraction"], [(k, surv[k]) for k in sorted(surv)])


COMMANDS = {
    "operator-check": cmd_operator_check,
    "milne-solve": cmd_milne_solve,
    "milne-corrector": cmd_milne_corrector,
    "decay-scan": cmd_decay_scan,
    "regularity-scan": cmd_regularity_scan,
    "tangential": cmd_tangential,
    "hydro-solve": cmd_hydro_solve,
    "expansion-scan": cmd_expansion_scan,
    "mc-verify": cmd_mc_verify,
}


def build_parser():
    p = argparse.ArgumentParser(prog="kinlayer", description=__doc__.splitlines()[0],
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "regularity-scan":
            sp.add_argument("mode", nargs="?", choices=["flat", "geometric"],
                            help="overrides [regularity] mode")
        sp.add_argument("--config", required=True, help="INI file")
        sp.add_argument("--out", default=None, help="output directory (default: ./out)")
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (default: [mc] seed or 0)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
        sp.add_argument("--quiet", action="store_true", help="no summary on stdout")
    return p


def _set_threads(n):
    if n < 1:
        raise ConfigError("--threads must be at least 1")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config(args.config)
        cfg.require(*NEEDS[args.command])
        if args.seed is None and args.command != "mc-verify":
            args.seed = 0
        _set_threads(args.threads)
        rep = Report(args.command, cfg)
        COMMANDS[args.command](cfg, args, rep)
    except ConfigError as exc:
        print(f"kinlayer: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:      # module errors, reported with context
        print(f"kinlayer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    rep.write(Path(args.out or "out"))
    if not args.quiet:
        print(rep.summary())
    return 0 if rep.passed else EXIT_FAIL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
