"""Acceptance criteria 1-11. Each test prints one PASS/FAIL line; the lines
are also collected into the pytest terminal summary."""

import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fbsdelab.cli import run
from fbsdelab.conditions import grid_minimize_lower, lambda_window_optimal, yin_lower_bound
from fbsdelab.control import (ControlConfig, Policy, VerifyConfig, fd_gradient, gradient,
                              lq_optimal_gain, lq_problem, optimize_policy, verify_max_principle)
from fbsdelab.core import ConstantsRecord, TimeGrid
from fbsdelab.field import (build_field, decoupling_residual, ikw_cases, ikw_residual,
                            loglog_slope, stationarity_test, z_consistency_residual)
from fbsdelab.models import (black_consol_model, blanchard_model, dornbusch_model,
                             dornbusch_oracle, krugman_model, linear_model, shifted_driver,
                             sine_rate)
from fbsdelab.picard import SolveConfig, comparison_harness, sensitivity_harness, solve_fbsde


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_01_window_algebra():
    start = time.perf_counter()
    inst = ConstantsRecord(mu2=0.0, c1=1.0, c2=0.0, k2=1.0)
    lo = lambda_window_optimal(inst, gamma=1.0).lower
    yin = yin_lower_bound(inst)
    exact = abs(lo - 3.0) <= 1e-12 and abs(yin - 5.0) <= 1e-12
    rng = np.random.default_rng(2024)
    B = 10_000
    mu2, c1, c2 = rng.normal(size=B), rng.uniform(0, 2, B), rng.uniform(0, 1, B)
    k = rng.uniform(0, 1, (B, 4))
    recs = [ConstantsRecord(mu2=mu2[i], c1=c1[i], c2=c2[i], k1=k[i, 0], k2=k[i, 1], k4=k[i, 2],
                            k5=k[i, 3]) for i in range(B)]
    wins = [lambda_window_optimal(c) for c in recs]
    lower = np.array([w.lower for w in wins])
    gam = np.array([w.gamma for w in wins])
    yins = np.array([yin_lower_bound(c) for c in recs])
    strict = bool(np.all(lower < yins))
    val, _, _ = grid_minimize_lower(mu2, c1, c2, gam)
    rel = float(np.max(np.abs(val - lower) / np.maximum(np.abs(lower), 1e-300)))
    elapsed = time.perf_counter() - start
    ok = exact and strict and rel <= 1e-6 and elapsed < 10
    report(1, ok, f"lower={lo:.15g} yin={yin:.15g} strict={strict} grid_rel={rel:.2e} "
                  f"time={elapsed:.1f}s")


def test_criterion_02_krugman():
    start = time.perf_counter()
    cfg = SolveConfig(lam=-0.35, dt=0.01, horizon=12.5, paths=100_000, seed=1, tol=1e-4)
    _, d = solve_fbsde(krugman_model(5.0, 0.1, 1.0, x0=0.0), [0.0], cfg)
    elapsed = time.perf_counter() - start
    y0, se = float(d.y0[0, 0]), float(d.y0_se[0, 0])
    t = d.grid.times()
    # the truncation Y(T) = 0 bends Z towards 0 near T; compare on t <= T/2
    early = t <= d.grid.T / 2
    z_err = float(np.max(np.abs(d.mean_Z[early, 0, 0] - 0.1)) / 0.1)
    ratios_ok = all(r < 1 for r in d.contraction_ratios)
    ok = (d.converged and abs(y0 - 1.0) <= max(3 * se, 0.01) and z_err <= 0.05 and ratios_ok
          and d.iterations <= 30 and elapsed < 120)
    report(2, ok, f"Y0={y0:.6f} se={se:.2e} z_rel={z_err:.3f} iters={d.iterations} "
                  f"T={d.horizon_used:g} time={elapsed:.1f}s")


def test_criterion_03_dornbusch():
    m = dornbusch_model(1, 1, 1, 0.5, 0.4, 0.1, 1.0, 0.5)
    o = dornbusch_oracle(m.params["params"])
    ref = o.alpha * 0.5 + o.beta
    cfg = SolveConfig(lam=-0.4, dt=0.02, horizon=12.5, paths=4000, seed=1)
    _, d = solve_fbsde(m, [0.5], cfg)
    y0, se = float(d.y0[0, 0]), float(d.y0_se[0, 0])
    ok = d.converged and d.lambda_in_window and o.residual < 1e-12 and abs(y0 - ref) <= max(
        3 * se, 0.02 * abs(ref))
    report(3, ok, f"Y0={y0:.6f} oracle={ref:.6f} se={se:.2e} oracle_residual={o.residual:.1e}")


def test_criterion_04_black_consol():
    cfg = SolveConfig(lam=-0.01, dt=0.1, horizon=20.0, paths=256, seed=0, max_doublings=8)
    _, d = solve_fbsde(black_consol_model(0.0, 0.0, 0.05), [0.05], cfg)
    y0, se = float(d.y0[0, 0]), float(d.y0_se[0, 0])
    ok = d.converged and d.tail < 1e-6 and abs(y0 - 20.0) <= max(3 * se, 0.4)
    report(4, ok, f"Y0={y0:.6f} tail={d.tail:.1e} T={d.horizon_used:g}")


def test_criterion_05_comparison():
    rng = np.random.default_rng(11)
    cfg = SolveConfig(lam=-0.2, dt=0.05, horizon=25.0, paths=2000, seed=3, refine_horizon=False)
    fails = 0
    for j in range(20):
        m2 = linear_model(a=rng.uniform(-1.0, -0.3), by=rng.uniform(-0.2, 0.2),
                          sigma=rng.uniform(0.1, 0.4), fx=rng.uniform(-1, 1),
                          fy=rng.uniform(-1.5, -0.5), x0=rng.uniform(-1, 1))
        delta = (0.1, 0.5)[j % 2]
        r = comparison_harness(shifted_driver(m2, delta), m2, m2.x0, cfg)
        fails += not r.passed
    kcfg = SolveConfig(lam=-0.35, dt=0.02, horizon=12.5, paths=5000, seed=1)
    k = krugman_model(5.0, 0.1, 1.0)
    gaps = []
    for delta in (0.1, 0.5):
        r = comparison_harness(shifted_driver(k, delta), k, [0.0], kcfg)
        gaps.append(r.difference / (delta * 5.0) - 1)
    ok = fails == 0 and all(abs(g) <= 0.02 for g in gaps)
    report(5, ok, f"linear_failures={fails}/20 krugman_gap_rel=" + ",".join(f"{g:.1e}" for g in gaps))


def test_criterion_06_sensitivity():
    cfg = SolveConfig(lam=-0.35, dt=0.02, horizon=12.5, paths=4000, seed=1, refine_horizon=False)
    r = sensitivity_harness(krugman_model(5.0, 0.1, 1.0), [0.0], dx=(0.2, 0.1, 0.05, 0.025),
                            config=cfg)
    ok = abs(r.slope_dx - 2.0) <= 0.3 and r.passed
    report(6, ok, f"slope={r.slope_dx:.4f} C={r.fitted_C:.3f} "
                  f"ratios={','.join(f'{v:.3f}' for v in r.ratios)}")


def _decoupling(model, lat, lam, x0):
    cfg = SolveConfig(lam=lam, dt=0.01, paths=4096, seed=3)
    fld = build_field(model, [0.0, 2.0, 4.0, 6.0, 8.0, 10.0], [lat], cfg, horizon_end=20.0,
                      group_paths=128)
    sol, _ = solve_fbsde(model, [x0], cfg.with_(horizon=20.0, refine_horizon=False), store=True)
    dec = decoupling_residual(model, fld, cfg, solution=sol)
    zc = z_consistency_residual(model, fld, sol)
    return dec, zc


def test_criterion_07_decoupling():
    kd, kz = _decoupling(krugman_model(5.0, 0.1, 1.0), np.arange(-1.5, 1.5001, 0.05), -0.35, 0.0)
    dd, dz = _decoupling(dornbusch_model(1, 1, 1, 0.5, 0.4, 0.1, 1.0, 0.5),
                         np.arange(-1.0, 2.0001, 0.05), -0.4, 0.5)
    ok = max(kd, dd) < 1e-2 and max(kz, dz) < 5e-2
    report(7, ok, f"krugman dec={kd:.1e} z={kz:.1e}; dornbusch dec={dd:.1e} z={dz:.1e}")


def test_criterion_08_stationarity():
    i, fac, bd = sine_rate(0.5, 0.2, window=20)
    blanchard = blanchard_model(0.5, 0.0, 1.0, 1.0, 1.0, 0.1, i_proc=i, c_proc=0.1, factor=fac,
                                bounds=dict(i=bd))
    cases = [("krugman", krugman_model(5.0, 0.1, 1.0), [0.0], SolveConfig(lam=-0.35, dt=0.01), 40.0, 64),
             ("blanchard", blanchard, [0.0], SolveConfig(lam=-0.3, dt=0.05), 40.0, 64),
             ("dornbusch", dornbusch_model(1, 1, 1, 0.5, 0.4, 0.1, 1.0, 0.5), [0.5],
              SolveConfig(lam=-0.4, dt=0.02), 20.0, 32),
             ("linear", linear_model(a=-0.5, by=0.1, fx=0.5), [0.2], SolveConfig(lam=-0.2, dt=0.05),
              20.0, 32)]
    ps = {}
    for name, m, x, cfg, h, gs in cases:
        ps[name] = stationarity_test(m, 2.0, 3.0, x, 500, cfg, horizon=h, group_paths=gs).p_value
    inhom = stationarity_test(krugman_model(5.0, 0.1, 1.0, drift_t=0.1), 2.0, 3.0, [0.0], 500,
                              SolveConfig(lam=-0.35, dt=0.01), horizon=40.0, group_paths=64,
                              allow_nonautonomous=True)
    ok = all(p > 0.01 for p in ps.values()) and inhom.p_value < 0.01
    report(8, ok, " ".join(f"{k}_p={v:.3f}" for k, v in ps.items())
           + f" inhomogeneous_p={inhom.p_value:.1e}")


@pytest.mark.parametrize("case", [
    pytest.param("F=x", marks=pytest.mark.xfail(
        strict=True, reason="Euler reproduces F=x exactly: residual 0, slope undefined")),
    "F=x^2", "F=W(t)x"])
def test_criterion_09_ikw(case):
    c = {k.name: k for k in ikw_cases()}[case]
    dts = (0.02, 0.01, 0.005)
    res = [ikw_residual(c, TimeGrid.from_step(0.0, 1.0, h), paths=20_000, seed=0) for h in dts]
    slope = loglog_slope(dts, res)
    ok = bool(abs(slope - 1.0) <= 0.3)
    report(9, ok, f"{case} slope={slope:.3f} residuals=" + ",".join(f"{v:.2e}" for v in res))


def test_criterion_10_maximum_principle():
    start = time.perf_counter()
    prob = lq_problem()
    cfg = ControlConfig()
    Kstar = lq_optimal_gain()
    res = optimize_policy(prob, Policy.affine(0.0, 0.0, 0.2), 30, [1.0], cfg,
                          free=[True, False, True])
    gain_err = abs(-res.policy.params["Kx"][0, 0] - Kstar) / Kstar
    rep = verify_max_principle(prob, res.policy, [1.0], cfg, VerifyConfig(perturbations=50))
    probe = Policy.affine(-0.5, 0.0, 0.2)
    g, _, _ = gradient(prob, probe, [1.0], cfg)
    fd = fd_gradient(prob, probe, [1.0], cfg)
    grad_rel = float(np.max(np.abs(g - fd) / np.abs(fd)))
    shifted = res.policy.with_vector(res.policy.vector() + np.array([0.0, 0.0, 0.5]))
    srep = verify_max_principle(prob, shifted, [1.0], cfg, VerifyConfig(perturbations=0))
    elapsed = time.perf_counter() - start
    ok = (rep.passed and rep.optimality_ok and len(rep.perturbed_costs) == 50
          and grad_rel <= 0.05 and not srep.pointwise_ok and gain_err <= 0.05 and elapsed < 300)
    report(10, ok, f"gain_err={gain_err:.3f} checks=({rep.pointwise_ok},{rep.convexity_ok},"
                   f"{rep.optimality_ok}) grad_rel={grad_rel:.3f} "
                   f"shifted_violations={srep.pointwise_violations} time={elapsed:.0f}s")


def test_criterion_11_determinism(tmp_path):
    runs = [["solve", "--model", "dornbusch", "--paths", "2000", "--dt", "0.05", "--horizon", "20"],
            ["compare", "--model", "krugman", "--paths", "1000", "--dt", "0.05"],
            ["field", "--model", "krugman", "--dt", "0.05", "--t-nodes", "0,1", "--h", "0.25",
             "--group-paths", "32", "--horizon-end", "10"],
            ["ikw-check", "--ikw-paths", "2000"],
            ["control", "--budget", "2", "--paths", "500", "--dt", "0.05"]]
    bad = []
    for argv in runs:
        sub = argv[0]
        a, b = tmp_path / f"{sub}_a", tmp_path / f"{sub}_b"
        ca = run(argv + ["--threads", "1", "--out", str(a)])
        cb = run([sub, "--config", str(a / "manifest.json"), "--threads", "4", "--out", str(b)])
        same = (a / f"{sub}.csv").read_bytes() == (b / f"{sub}.csv").read_bytes()
        cfg_same = (json.loads((a / "manifest.json").read_text())["config_text"]
                    .replace("threads = 1", "threads = 4")
                    == json.loads((b / "manifest.json").read_text())["config_text"])
        if not (ca == cb == 0 and same and cfg_same):
            bad.append(sub)
    report(11, not bad, f"byte-identical reruns for {len(runs)} subcommands; mismatches={bad}")
