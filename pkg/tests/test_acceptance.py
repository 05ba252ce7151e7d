"""Acceptance criteria 1-10.  Each test prints one PASS/FAIL line and fails when its criterion does."""

import json
import math
import time

import numpy as np
import pytest

from cbicurves.calibrate import CalibrationProblem, calibrate, synthetic_surface
from cbicurves.cli import main
from cbicurves.curves import write_surface_csv
from cbicurves.fourier import CharFunContext, caplet_price_fourier, caplet_strip_fft_multi, fft_grid_for, modified_cf
from cbicurves.mechanisms import MechanismParams, ergodic_laplace, lifetime, lifetime_root, phi
from cbicurves.model import MultiCurveModel
from cbicurves.montecarlo import SimConfig, mc_caplet, simulate
from cbicurves.quantize import QuantizationError, build_grid, caplet_price_quant
from cbicurves.riccati import RiccatiRequest, solve, solve_batch
from cbicurves.synthetic import flat_curves, sloped_curves, table3_params
from test_cli import snapshot, write_inputs
from test_mechanisms import phi_by_quadrature
from test_riccati import cir_closed_form


@pytest.fixture
def verdict(capsys):
    start = time.perf_counter()

    def report(n, ok, limit, detail):
        took = time.perf_counter() - start
        ok = bool(ok) and took < limit
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} ({took:.1f} s, limit {limit} s) {detail}")
        assert ok, detail

    return report


def test_01_riccati_vs_cir(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        b, s2 = rng.uniform(0.05, 2.0), rng.uniform(0.01, 2.0)
        p, q, t = rng.uniform(-0.5, 3.0), rng.uniform(0.0, 2.0), rng.uniform(0.05, 5.0)
        m = MechanismParams(b, math.sqrt(s2), 0.0, 1.0, 1.5, (0.0,))
        sol = solve(RiccatiRequest(m, p, q, t))
        v, integ = cir_closed_form(b, s2, p, q, t)
        worst = max(worst, abs(sol.v[-1] / v - 1), abs(sol.integral[-1] / integ - 1))
    verdict(1, worst < 1e-8, 5, f"max relative error {worst:.2e} over 100 (p, q, t)")


def test_02_mechanism_quadrature(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        eta = rng.uniform(0.01, 0.5)
        m = MechanismParams(rng.uniform(0.01, 1.0), rng.uniform(0.0, 0.5), eta, eta * rng.uniform(1.05, 20.0),
                            rng.uniform(1.05, 1.95), (0.0,))
        z = m.lower_bound + rng.uniform(0.0, 1.0) * (5.0 - m.lower_bound)
        ref = phi_by_quadrature(m, z)
        worst = max(worst, abs(phi(m, z) - ref) / max(abs(ref), 1e-12))
    verdict(2, worst < 1e-8, 30, f"max relative error {worst:.2e} over 100 cases")


def test_03_lifetime(verdict):
    rng = np.random.default_rng(3)
    cases = [(MechanismParams(1.0, math.sqrt(2.0), 0.0, 1.0, 1.5, (0.0,)), -2.0, 0.0)]
    while len(cases) < 25:
        b, s2 = rng.uniform(0.2, 2.0), rng.uniform(0.5, 3.0)
        m = MechanismParams(b, math.sqrt(s2), 0.0, 1.0, 1.5, (0.0,))
        q = rng.uniform(0.0, 0.5)
        cases.append((m, lifetime_root(m, q) - rng.uniform(0.2, 3.0), q))
    while len(cases) < 50:
        base = table3_params().mechanism
        m = base.with_(b=base.stability_threshold() - rng.uniform(0.002, 0.06))  # unstable
        q = rng.uniform(0.0, 0.05)
        pq = lifetime_root(m, q)
        if pq > m.lower_bound + 0.01:  # otherwise q keeps the boundary attracting and nothing explodes
            cases.append((m, m.lower_bound + rng.uniform(0.1, 0.9) * (pq - m.lower_bound), q))
    worst = 0.0
    for m, p, q in cases:
        T = lifetime(m, p, q)
        assert math.isfinite(T)
        sol = solve(RiccatiRequest(m, p, q, 2 * T + 1))
        worst = max(worst, abs(sol.blew_up / T - 1))
    ln2 = lifetime(*cases[0])
    probes = []
    for m, _, q in cases[:: 5]:
        pq = lifetime_root(m, q)
        probes += [lifetime(m, pq + d, q) for d in (0.0, 0.1, 1.0)]
    inf_ok = all(v == math.inf for v in probes)
    ok = worst < 0.01 and abs(ln2 / math.log(2) - 1) < 1e-10 and inf_ok
    verdict(3, ok, 60, f"max blow-up mismatch {worst:.2e} over 50 cases, CIR ln2 case {ln2:.9f}, "
                       f"{len(probes)} probes at p >= p_q infinite: {inf_ok}")


def test_04_perfect_fit(verdict):
    worst = 0.0
    for curves in (flat_curves(), sloped_curves()):
        err = MultiCurveModel(table3_params(), curves).fit_errors()
        worst = max(worst, np.max(np.abs(err["bond"])), *(np.max(np.abs(s)) for s in err["spread"]))
    verdict(4, worst < 1e-8, 10, f"max relative pillar error {worst:.2e}")


def test_05_three_way_caplets(verdict):
    model = MultiCurveModel(table3_params(), flat_curves())
    mats = np.array([0.5, 1.0, 2.0])
    strikes = np.round(np.linspace(0.01, 0.06, 11), 6)
    n, mesh = fft_grid_for(model, 0, mats, tail_tol=1e-10, mesh=1.0, eps=-4.0)
    fft = caplet_strip_fft_multi(model, 0, mats, strikes, n=n, mesh=mesh, eps=-4.0, rel_tol=1e-8)
    bundle = simulate(model, SimConfig(2.0, 200_000, seed=5), obs_times=mats)
    z = np.empty_like(fft)
    for r, T in enumerate(mats):
        mean, se = mc_caplet(model, bundle, 0, T, strikes)
        z[r] = (mean - fft[r]) / se
    del bundle
    mc_ok = bool(np.all(np.abs(z) < 3))
    ctx = CharFunContext(model, 0, 0.0, 1.0)
    K = np.array([0.01, 0.02])
    ref = fft[1, [0, 2]]
    try:
        grid = build_grid(ctx, 10, 2.0)
        rel = caplet_price_quant(grid, ctx, K) / ref - 1
        quant_ok = abs(rel[1]) < 0.02 and abs(rel[0]) < 0.10
        quant = f"N=10 p=2 rel diff {rel[0]:+.2%} at 1%, {rel[1]:+.2%} at 2%"
    except QuantizationError as exc:
        quant_ok = False
        rel1 = caplet_price_quant(build_grid(ctx, 10, 1.0), ctx, K) / ref - 1
        quant = (f"N=10 p=2 grid does not exist ({str(exc)[:60]}...); "
                 f"p=1 diagnostic {rel1[0]:+.2%} at 1%, {rel1[1]:+.2%} at 2%")
    verdict(5, mc_ok and quant_ok, 600, f"FFT vs MC max |z| {np.max(np.abs(z)):.2f} over 33 caplets; {quant}")


def test_06_ergodic(verdict):
    m = table3_params()
    model = MultiCurveModel(m, flat_curves())
    mech = model.mechanism
    x_stat = mech.dbeta / mech.b
    bundle = simulate(model, SimConfig(10.0, 10_000, seed=6), obs_times=[10.0], x0=x_stat)
    sim = bundle.y[:, -1, :].mean(axis=0)
    target = np.asarray(mech.beta) / mech.b
    rel = np.max(np.abs(sim / target - 1))
    b, s2, beta = 0.7, 0.09, 0.05
    cir = MechanismParams(b, math.sqrt(s2), 0.0, 1.0, 1.5, (beta,))
    lap = max(abs(ergodic_laplace(cir, p) / (1 + s2 * p / (2 * b)) ** (-2 * beta / s2) - 1) for p in (0.1, 1.0, 5.0, 20.0))
    verdict(6, rel < 0.05 and lap < 1e-8, 120, f"long-run mean off by {rel:.2%}; CIR stationary Laplace error {lap:.1e}")


def test_07_ordering(verdict):
    model = MultiCurveModel(table3_params(), flat_curves())
    bundle = simulate(model, SimConfig(1.0, 10_000, steps=1000, seed=7))
    violations = int(np.sum(np.diff(bundle.y, axis=-1) < 0))
    verdict(7, violations == 0, 120, f"{violations} violations over {bundle.paths} paths x 1000 steps")


def test_08_charfun_anchors(verdict):
    model = MultiCurveModel(table3_params(), sloped_curves())
    worst_anchor = 0.0
    for i, T, x in ((0, 1.0, None), (1, 3.0, [0.01, 0.002]), (0, 0.5, [0.0, 0.03])):
        c = CharFunContext(model, i, 0.0, T, x)
        worst_anchor = max(worst_anchor, abs(modified_cf(c, 0.0).real / c.bond_T_plus_delta() - 1),
                           abs(modified_cf(c, -1j).real / c.forward_value() - 1))
    c = CharFunContext(model, 0, 0.0, 1.0)
    K = np.array([0.01, 0.03, 0.06])
    prices = np.array([caplet_price_fourier(c, K, epsilon=e) for e in (-1.5, -1.0, -0.5, 0.0, 0.1)])
    spread = float(np.max(prices.max(axis=0) - prices.min(axis=0)))
    verdict(8, worst_anchor < 1e-8 and spread < 1e-7, 30,
            f"anchor error {worst_anchor:.1e}; price spread over 5 damping branches {spread:.1e}")


def test_09_calibration_recovery(verdict):
    truth = table3_params()
    curves = flat_curves()
    surf = synthetic_surface(truth, curves)
    mech = truth.mechanism
    init = table3_params(b=mech.b * 1.2, sigma=mech.sigma * 0.8, eta=mech.eta * 0.8, theta=mech.theta * 0.8,
                         alpha=1 + (mech.alpha - 1) * 0.8)
    res = calibrate(CalibrationProblem(surf, curves, truth), init)
    verdict(9, res.rms_bp < 0.1, 900, f"rms {res.rms_bp:.2e} bp after {res.iterations} iterations "
                                     f"({res.evaluations} evaluations, {res.reason})")


def _without_wall_time(files):
    out = dict(files)
    rep = json.loads(out["report.json"])
    rep.pop("wall_time")
    out["report.json"] = json.dumps(rep, sort_keys=True).encode()
    return out


def test_10_determinism(verdict, tmp_path):
    args = write_inputs(tmp_path / "in")
    surf = synthetic_surface(table3_params(), flat_curves(), expiries=(1.0, 2.0), strikes=(0.03, 0.05), tenor_idx=[0])
    write_surface_csv(tmp_path / "surface.csv", surf)
    runs = {
        "simulate": ["simulate", *args, "--paths", "2000", "--steps", "200", "--horizon", "2", "--seed", "42"],
        "price": ["price", *args, "--method", "mc", "--expiry", "1,2", "--strike", "0.02,0.04", "--paths", "3000",
                  "--steps", "200", "--seed", "9", "--fft-mesh", "auto"],
        "calibrate": ["calibrate", *args, "--surface", str(tmp_path / "surface.csv"), "--free", "eta,theta",
                      "--max-iter", "4"],
        "fit": ["fit", *args],
    }
    same = {}
    for name, argv in runs.items():
        out = tmp_path / name
        snaps = []
        for threads in ("1", "2"):
            assert main([*argv, "--out", str(out), "--threads", threads]) == 0
            snaps.append(snapshot(out))
        assert main([name, "--manifest", str(out / "manifest.json"), "--out", str(out), "--threads", "3"]) == 0
        snaps.append(snapshot(out))
        if name == "calibrate":
            snaps = [_without_wall_time(s) for s in snaps]
        same[name] = snaps[0] == snaps[1] == snaps[2]
    verdict(10, all(same.values()), 300, f"threads 1/2 and manifest replay bit-identical: {same}")
