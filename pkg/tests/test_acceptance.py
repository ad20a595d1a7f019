"""Acceptance criteria, each at its stated tolerance.

Every test records one ``criterion N ...: PASS|FAIL`` line, which pytest prints
in an "acceptance criteria" section of the terminal summary.
"""
import json

import numpy as np
import pytest
from scipy.optimize import brentq

from conftest import write_config
from kinlayer import characteristics as ch
from kinlayer import cli, hydro
from kinlayer.collision import collision_frequency

SEED = 20261016


def run_cli(tmp, command, *extra, **overrides):
    tmp.mkdir(parents=True, exist_ok=True)
    cfg = write_config(tmp / "cfg.ini", **overrides)
    out = tmp / "out"
    code = cli.run([command, *extra, "--config", str(cfg), "--out", str(out), "--quiet"])
    return code, json.loads((out / f"{command}.json").read_text()), out


def inv(report, name):
    return report["invariants"][name]


def verdict(record, label, checks):
    """Record one line for a criterion; ``checks`` maps sub-check name to bool."""
    bad = [k for k, ok in checks.items() if not ok]
    record(f"{label}: {'PASS' if not bad else 'FAIL'}"
           + ("" if not bad else "  failed: " + ", ".join(bad)))
    assert not bad, bad


def test_criterion_1_operator_suite(op, op_fine, record):
    res, res_fine = op.null_residuals(), op_fine.null_residuals()
    ev = np.sort(np.abs(op.eigenvalues()))
    nu0 = float(collision_frequency(0.0, 1.0))
    s = np.linspace(0, 60, 601)
    ratio = collision_frequency(s, 1.0) / (1 + s)
    gam, _ = cli.gamma_conservation(op, 50, SEED)
    verdict(record, "criterion 1 operator suite", {
        "null residual <= 1e-3": res.max() <= 1e-3,
        "null residual halves at 48x64": np.all(res_fine <= 0.5 * res),
        "asymmetry <= 1e-10": op.asymmetry() <= 1e-10,
        "four null eigenvalues <= 1e-3": ev[3] <= 1e-3,
        "fifth eigenvalue >= 0.05": ev[4] >= 0.05,
        "nu(0) = 4 pi": abs(nu0 - 4 * np.pi) <= 1e-4,
        "nu/(1+|v|) bounded below": ratio.min() > 0.5 and op.nu.min() > 0,
        "gamma conservation (50 pairs)": gam <= 1e-3,
    })


def bisect_eta_plus(geom, eta, va, vb):
    e1 = va * va + vb * vb
    f = lambda y: e1 - (vb * np.exp(ch.potential_W(geom, y) - ch.potential_W(geom, eta))) ** 2
    return brentq(f, eta, geom.L, xtol=1e-15, rtol=1e-15)


def test_criterion_2_characteristics(record):
    geom = ch.MilneGeometry(0.1)
    rng = np.random.default_rng(SEED)
    spread = 0.0
    for _ in range(20):
        eta, va, vb = rng.uniform(0.2, 2.5), rng.uniform(-1.5, 1.5), rng.uniform(-2, 2)
        s, e, a, b = ch.trace_characteristic(geom, eta, va, vb, s_max=2.0)
        E1, E2 = ch.conserved(geom, e, a, b)
        for q in (E1, E2, ch.weight_zeta(geom, e, a, b)):
            spread = max(spread, float(np.ptp(q)))
    eta_err = 0.0
    for _ in range(20):
        eta, va, vb = rng.uniform(0, 2), rng.uniform(0.05, 1.5), rng.uniform(0.3, 2)
        ep = ch.eta_plus(geom, eta, va, vb)
        if ep < geom.L:
            eta_err = max(eta_err, abs(ep - bisect_eta_plus(geom, eta, va, vb)))
    nu = lambda v: collision_frequency(v)
    add_err = 0.0
    for _ in range(20):
        y0, y1, y2 = np.sort(rng.uniform(0, geom.L, 3))[::-1]
        va, vb = rng.uniform(0.2, 2), rng.uniform(-2, 2)
        a1, b1 = ch.transport_velocity(geom, y0, va, vb, y1)
        whole = ch.damping_H(geom, y0, y2, va, vb, nu)
        parts = ch.damping_H(geom, y0, y1, va, vb, nu) + ch.damping_H(geom, y1, y2, a1, b1, nu)
        add_err = max(add_err, abs(whole - parts) / max(1.0, whole))
    verdict(record, "criterion 2 characteristics", {
        f"E1/E2/zeta conserved (spread {spread:.1e})": spread <= 1e-8,
        f"eta+ vs bisection ({eta_err:.1e})": eta_err <= 1e-10,
        f"H additivity ({add_err:.1e})": add_err <= 1e-8,
    })


def test_criterion_3_milne_exact(tmp_path, record):
    checks = {}
    for data in ("psi0", "psi3", "generic"):
        code, rep, _ = run_cli(tmp_path / data, "milne-solve", milne__data=data)
        for s in rep["results"]["solves"]:
            tag = f"{data} eps={s['eps']:g}"
            if data != "generic":
                checks[f"{tag} exact"] = s["exact_error"] <= 1e-5
            checks[f"{tag} q1"] = s["max_q1"] <= 1e-5
            checks[f"{tag} orthogonality"] = s["max_orthogonality"] <= 1e-5
        checks[f"{data} exit 0"] = code == 0
    verdict(record, "criterion 3 Milne exact solutions", checks)


def test_criterion_4_corrector(tmp_path, record):
    code, rep, _ = run_cli(tmp_path, "milne-corrector")
    checks = {"off-identity strictly decreasing": inv(rep, "T_monotone")["pass"]}
    for c in rep["results"]["correctors"]:
        e = f"eps={c['eps']:g}"
        checks[f"K0 > 0 {e}"] = c["K0"] is None or c["K0"] > 0
        checks[f"ratio <= 0.01 {e}"] = c["ratio_L_0"] <= 0.01
        checks[f"mass flux <= 1e-5 {e}"] = c["max_mass_flux"] <= 1e-5
    checks["three eps"] = len(rep["results"]["correctors"]) == 3
    checks["exit 0"] = code == 0
    verdict(record, "criterion 4 corrector", checks)


def test_criterion_5_regularity(tmp_path, record):
    _, geo, _ = run_cli(tmp_path / "g", "regularity-scan", "geometric")
    _, flat, _ = run_cli(tmp_path / "f", "regularity-scan", "flat")
    _, tan, _ = run_cli(tmp_path / "t", "tangential")
    ww = geo["results"]["sup_weighted"]
    uw = flat["results"]["sup_unweighted"]
    growth = [b / a for a, b in zip(uw, uw[1:])]
    verdict(record, "criterion 5 regularity", {
        "three refinements": len(ww) == 3 and len(uw) == 3,
        f"weighted sup within 1.5x ({max(ww) / min(ww):.3f})": max(ww) / min(ww) <= 1.5,
        f"flat unweighted growth >= 2 ({min(growth):.2f})": min(growth) >= 2.0,
        f"circle tangential W ({max(tan['results']['W_sup']):.1e})":
            max(tan["results"]["W_sup"]) <= 1e-6,
    })


def test_criterion_6_hydro(tmp_path, record):
    code, rep, _ = run_cli(tmp_path, "hydro-solve")
    f = hydro.solve_nsf_leading(cli._hydro_boundary(cli.Config(tmp_path / "cfg.ini")))
    x, _ = hydro.disk_rule(24)
    r, phi = np.hypot(x[:, 0], x[:, 1]), np.arctan2(x[:, 1], x[:, 0])
    err = float(np.abs(f.theta_T(x) - r * np.cos(phi)).max())
    verdict(record, "criterion 6 hydrodynamic leading order", {
        f"theta_T = r cos phi ({err:.1e})": err <= 1e-8,
        "Boussinesq <= 1e-10": inv(rep, "boussinesq")["pass"],
        "normalization <= 1e-8": inv(rep, "normalization")["pass"],
        "flux compatibility <= 1e-8": inv(rep, "flux_compatibility")["pass"],
        "exit 0": code == 0,
    })


def test_criterion_7_expansion_scan(tmp_path, record):
    code, rep, _ = run_cli(tmp_path, "expansion-scan")
    p = inv(rep, "interior_first_order")["value"]
    verdict(record, "criterion 7 expansion scan", {
        f"interior first-order residual order >= 1.5 ({p:.2f})": p >= 1.5,
        "full collar residual below first at every eps": inv(rep, "collar_decrease")["pass"],
        "exit 0": code == 0,
    })


def test_criterion_8_monte_carlo(tmp_path, record):
    code, rep, _ = run_cli(tmp_path, "mc-verify", "--seed", "7")
    hits = rep["results"]["probes_within_3sigma"]
    surv = rep["results"]["survival"]
    fr = [surv[k] for k in ("0", "5", "10", "20", "40")]
    verdict(record, "criterion 8 Monte Carlo", {
        f"probes within 3 sigma ({hits}/{rep['results']['n_probes']})":
            hits >= 18 and rep["results"]["n_probes"] == 20,
        "survival non-increasing": all(a >= b for a, b in zip(fr, fr[1:])),
        f"survival at k=40 below 0.5 ({fr[-1]:.3f})": fr[-1] < 0.5,
        "exit 0": code == 0,
    })


@pytest.mark.parametrize("threads", [1, 3])
def test_criterion_9_determinism(tmp_path, record, threads):
    def outputs(tag):
        run_cli(tmp_path / tag, "mc-verify", "--seed", "11", "--threads", str(threads),
                mc__samples="2000")
        run_cli(tmp_path / tag, "hydro-solve")
        out = tmp_path / tag / "out"
        return {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    a, b = outputs("a"), outputs("b")
    verdict(record, f"criterion 9 determinism (threads={threads})", {
        "same files": a.keys() == b.keys() and len(a) >= 4,
        "byte-identical": a == b,
    })
