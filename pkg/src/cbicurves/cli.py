"""Command-line front end: fit, price, simulate, calibrate, moments.

Every command writes its outputs and a manifest.json into ``--out``.
Numbers are written with ``repr`` (17 significant digits), so reruns can be
diffed exactly.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import CalibrationError, CalibrationProblem, LMConfig, calibrate, write_report
from .curves import CurveInputError, MarketCurves, read_discount_csv, read_forward_csv, read_surface_csv
from .fourier import CharFunContext, FFTGridError, StripError, caplet_strip_fft_multi, fft_grid_for
from .mechanisms import ergodic_mean, exp_moment_finite
from .model import ConvexityNotFinite, ModelError, ModelParams, MultiCurveModel
from .montecarlo import SimConfig, cluster_stats, mc_bond, mc_caplet, simulate, write_paths_csv
from .quantize import QuantizationError, build_grid, caplet_price_quant
from .riccati import RiccatiError

log = logging.getLogger("cbicurves")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
INPUT_ERRORS = (CurveInputError, ModelError, CalibrationError, FileNotFoundError)
NUMERIC_ERRORS = (RiccatiError, QuantizationError, FFTGridError, StripError, ArithmeticError, np.linalg.LinAlgError)


class InputError(ValueError):
    """Bad command-line input."""


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _floats(text: str | None, name: str) -> list[float]:
    if text is None:
        return []
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--{name}: expected comma-separated numbers, got {text!r}") from None


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- inputs


def _model_inputs(args) -> dict:
    """Input file paths, from --model (a fit artifact) or from the individual flags."""
    if getattr(args, "model", None):
        art = json.loads(Path(args.model).read_text())
        inputs = dict(art["inputs"])
        inputs.setdefault("params", args.params)
        if args.params:
            inputs["params"] = args.params
        return inputs
    if not args.params or not args.discount or not args.forward:
        raise InputError("need --params, --discount and --forward (or --model)")
    fwd = {}
    for item in args.forward:
        if "=" not in item:
            raise InputError(f"--forward expects tenor=csv, got {item!r}")
        tenor, path = item.split("=", 1)
        try:
            fwd[repr(float(tenor))] = path
        except ValueError:
            raise InputError(f"--forward: bad tenor {tenor!r}") from None
    return {"params": args.params, "discount": args.discount, "forward": fwd}


def _load_curves(inputs: dict, params: ModelParams) -> MarketCurves:
    disc = read_discount_csv(inputs["discount"])
    given = {float(k): v for k, v in inputs["forward"].items()}
    fwds = []
    for d in params.tenors:
        match = [v for k, v in given.items() if abs(k - d) < 1e-12]
        if not match:
            raise CurveInputError(f"missing forward curve for tenor {d!r}")
        fwds.append(read_forward_csv(match[0], tenor=d))
    return MarketCurves(disc, tuple(fwds))


def _load_model(args, inputs: dict | None = None):
    inputs = inputs or _model_inputs(args)
    params = ModelParams.read(inputs["params"])
    curves = _load_curves(inputs, params)
    return params, curves, MultiCurveModel(params, curves), inputs


def _input_files(inputs: dict) -> list[str]:
    files = [inputs["params"], inputs["discount"], *inputs["forward"].values()]
    if inputs.get("surface"):
        files.append(inputs["surface"])
    return files


def _write_manifest(out: Path, command: str, inputs: dict, args) -> None:
    overrides = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "threads", "manifest", "verbose") and v is not None}
    manifest = {
        "command": command,
        "inputs": inputs,
        "overrides": overrides,
        "seed": getattr(args, "seed", None),
        "out": str(out),
        "version": __version__,
        "hashes": {str(p): _sha256(p) for p in _input_files(inputs)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=fmt))


def _replay(args):
    """Replace every recorded option by its manifest value; refuse if an input file changed."""
    man = json.loads(Path(args.manifest).read_text())
    if man.get("command") != args.command:
        raise InputError(f"manifest records command {man.get('command')!r}, not {args.command!r}")
    for k, v in man["overrides"].items():
        if k != "command":
            setattr(args, k, v)
    for path, digest in man.get("hashes", {}).items():
        if not Path(path).exists() or _sha256(path) != digest:
            raise InputError(f"input {path} changed since the manifest was written")
    return args


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([fmt(v) for v in row])


def _sim_config(args, horizon: float, **extra) -> SimConfig:
    return SimConfig(horizon=horizon, paths=args.paths, steps=args.steps, eps_trunc=args.eps_trunc, seed=args.seed,
                     threads=args.threads, **extra)


# ---------------------------------------------------------------- commands


def cmd_fit(args, out: Path) -> int:
    params, curves, model, inputs = _load_model(args)
    sh = model.shifts
    art = {
        "inputs": inputs,
        "params": params.to_dict(),
        "grid": sh.grid.tolist(),
        "Lambda": sh.Lambda_grid.tolist(),
        "c": sh.c_grid.tolist(),
        "negative_c": list(sh.negative_c),
    }
    (out / "model.json").write_text(json.dumps(art, indent=2))
    errs = model.fit_errors()
    rows = [("bond", None, T, e) for T, e in zip(curves.discount.pillars, errs["bond"])]
    for i, (fc, es) in enumerate(zip(curves.forwards, errs["spread"])):
        rows += [("spread", fc.tenor, T, e) for T, e in zip(fc.pillars, es)]
    _write_csv(out / "fit_quality.csv", ["quantity", "tenor", "maturity", "rel_error"], rows)
    worst = max((abs(r[3]) for r in rows), default=0.0)
    print(f"fitted {len(rows)} pillar quantities, max relative error {worst:.3e}")
    return EXIT_OK


def _tenor_index(model: MultiCurveModel, tenor: float | None) -> int:
    if tenor is None:
        return 0
    hits = np.flatnonzero(np.abs(model.tenors - tenor) < 1e-12)
    if not hits.size:
        raise InputError(f"tenor {tenor!r} not in the model tenors {model.tenors.tolist()}")
    return int(hits[0])


def _fft_prices(args, model, i, expiries, strikes):
    mesh = args.fft_mesh
    n = args.fft_n
    if mesh == "auto":
        n, mesh = fft_grid_for(model, i, expiries)
    return caplet_strip_fft_multi(model, i, expiries, strikes, n=n, mesh=float(mesh), threads=args.threads)


def _caplet_rows(args, model, i, expiries, strikes):
    methods = ("fft", "quant", "mc") if args.method == "all" else (args.method,)
    delta = float(model.tenors[i])
    rows, ok, results = [], 0, {}
    for meth in methods:
        try:
            if meth == "fft":
                res = {(T, K): (p, None) for T, row in zip(expiries, _fft_prices(args, model, i, expiries, strikes))
                       for K, p in zip(strikes, row)}
            elif meth == "quant":
                res = {}
                for T in expiries:
                    ctx = CharFunContext(model, i, 0.0, T, threads=args.threads)
                    grid = build_grid(ctx, args.quant_n, p_norm=args.quant_p)
                    for K, p in zip(strikes, np.atleast_1d(caplet_price_quant(grid, ctx, strikes))):
                        res[(T, K)] = (p, None)
            else:
                bundle = simulate(model, _sim_config(args, max(expiries)), obs_times=expiries)
                res = {}
                for T in expiries:
                    mean, err = mc_caplet(model, bundle, i, T, strikes)
                    for K, p, e in zip(strikes, mean, err):
                        res[(T, K)] = (p, e)
        except NUMERIC_ERRORS as exc:
            for T in expiries:
                for K in strikes:
                    rows.append(("caplet", delta, T, K, meth, None, None, f"{type(exc).__name__}: {exc}"))
            continue
        results[meth] = res
        for (T, K), (p, e) in res.items():
            rows.append(("caplet", delta, T, K, meth, p, e, ""))
            ok += 1
    for a, b in (("fft", "mc"), ("fft", "quant"), ("mc", "quant")):
        if a in results and b in results:
            for key, (pa, _) in results[a].items():
                pb = results[b][key][0]
                rows.append(("caplet", delta, key[0], key[1], f"reldiff_{b}_vs_{a}", pb / pa - 1.0, None, ""))
    return rows, ok


def cmd_price(args, out: Path) -> int:
    _, _, model, inputs = _load_model(args)
    i = _tenor_index(model, args.tenor)
    delta = float(model.tenors[i])
    expiries = _floats(args.expiry, "expiry") or [1.0]
    strikes = _floats(args.strike, "strike")
    rows, ok = [], 0
    if args.product == "bond":
        for T in expiries:
            rows.append(("bond", None, T, None, "closed_form", float(model.bond_price(0.0, T)), None, ""))
            ok += 1
    elif args.product == "fra":
        for T in expiries:
            L = float(model.forward_ibor(i, 0.0, T))
            rows.append(("fra_rate", delta, T, None, "closed_form", L, None, ""))
            B = float(model.bond_price(0.0, T + delta))
            for K in strikes:
                rows.append(("fra", delta, T, K, "closed_form", B * delta * (L - K), None, ""))
            ok += 1
    elif args.product == "convexity":
        for T in expiries:
            try:
                rows.append(("convexity", delta, T, None, "closed_form", float(model.futures_convexity(i, 0.0, T)), None, ""))
                ok += 1
            except (ConvexityNotFinite, *NUMERIC_ERRORS) as exc:
                rows.append(("convexity", delta, T, None, "closed_form", None, None, f"{type(exc).__name__}: {exc}"))
    else:
        if not strikes:
            raise InputError("caplet pricing needs --strike")
        rows, ok = _caplet_rows(args, model, i, sorted(expiries), sorted(strikes))
    _write_csv(out / "prices.csv", ["product", "tenor", "expiry", "strike", "method", "price", "stderr", "error"], rows)
    _write_manifest(out, "price", inputs, args)
    print(f"wrote {len(rows)} rows to {out / 'prices.csv'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_simulate(args, out: Path) -> int:
    _, _, model, inputs = _load_model(args)
    cfg = _sim_config(args, args.horizon, jump_log=True)
    bundle = simulate(model, cfg)
    write_paths_csv(bundle, model, out / "paths.csv", max_paths=args.dump_paths)
    y = bundle.y
    violations = int(np.sum(np.diff(y, axis=2) < 0))
    bond, bond_err = mc_bond(bundle, model, args.horizon)
    target = ergodic_mean(model.mechanism)
    stats = {
        "paths": cfg.paths,
        "steps": cfg.steps,
        "horizon": cfg.horizon,
        "floored_fraction": bundle.floored_fraction,
        "acceptance_rate": bundle.acceptance_rate,
        "ordering_violations": violations,
        "mean_Y_final": y[:, -1, :].mean(axis=0).tolist(),
        "ergodic_mean": np.asarray(target).tolist(),
        "bond_mc": bond,
        "bond_stderr": bond_err,
        "bond_model": float(model.bond_price(0.0, args.horizon)),
        "clusters": cluster_stats(bundle),
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, default=fmt))
    _write_manifest(out, "simulate", inputs, args)
    print(f"simulated {cfg.paths} paths, ordering violations {violations}")
    return EXIT_OK


def cmd_calibrate(args, out: Path) -> int:
    if not args.surface:
        raise InputError("calibrate needs --surface")
    params, curves, _, inputs = _load_model(args)
    inputs = dict(inputs, surface=args.surface)
    surface = read_surface_csv(args.surface)
    free = [f.strip() for f in args.free.split(",") if f.strip()]
    frozen = set(args.freeze or [])
    free = tuple(f for f in free if f not in frozen)
    problem = CalibrationProblem(surface, curves, params, free=free, threads=args.threads)
    res = calibrate(problem, params, LMConfig(max_iter=args.max_iter, threads=args.threads))
    report = write_report(res, problem, out / "report.json", out / "report.csv")
    ModelParams.write(res.params, out / "params_calibrated.json")
    _write_manifest(out, "calibrate", inputs, args)
    print(f"rms {report['rms_vol_bp']:.4g} bp after {res.iterations} iterations ({res.reason}), {res.wall_time:.1f} s")
    return EXIT_OK


def cmd_moments(args, out: Path) -> int:
    params, _, model, inputs = _load_model(args)
    mech = model.mechanism
    expiries = _floats(args.expiry, "expiry") or [1.0]
    tenors = []
    for i, d in enumerate(model.tenors):
        rows = []
        for T in expiries:
            ctx = CharFunContext(model, i, 0.0, T)
            try:
                conv = float(model.futures_convexity(i, 0.0, T))
            except ConvexityNotFinite:
                conv = None
            rows.append({"expiry": T, "moment_strip_upper": ctx.strip_upper, "futures_convexity": conv})
        tenors.append({"tenor": float(d), "expiries": rows})
    res = {
        "stable": mech.is_stable,
        "boundary_phi": mech.boundary_phi,
        "stability_threshold_b": mech.stability_threshold(),
        "theta_eff": mech.theta_eff,
        "ergodic_mean": np.asarray(ergodic_mean(mech)).tolist(),
        "exp_moment_finite": {repr(g): exp_moment_finite(mech, g) for g in (0.5, 1.0, float(mech.theta_eff))},
        "tenors": tenors,
    }
    (out / "moments.json").write_text(json.dumps(res, indent=2, default=fmt))
    _write_manifest(out, "moments", inputs, args)
    print(json.dumps({k: res[k] for k in ("stable", "boundary_phi", "theta_eff")}, default=fmt))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _fft_mesh(text: str):
    if text == "auto":
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("mesh must be a number or 'auto'") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("mesh must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--params", help="model parameter JSON")
    common.add_argument("--discount", help="OIS discount curve CSV")
    common.add_argument("--forward", action="append", metavar="TENOR=CSV", help="forward curve per tenor, repeatable")
    common.add_argument("--model", help="fit artifact (model.json) naming the inputs")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--paths", type=int, default=10000)
    common.add_argument("--steps", type=int, default=1000)
    common.add_argument("--eps-trunc", type=float, default=1e-3)
    common.add_argument("--fft-n", type=int, default=32768)
    common.add_argument("--fft-mesh", type=_fft_mesh, default=0.05)
    common.add_argument("--quant-n", type=int, default=10)
    common.add_argument("--quant-p", type=float, default=2.0, help="distortion norm of the quantization grid")
    common.add_argument("--manifest", help="rerun the command recorded in a manifest.json; --out and --threads still apply")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cbicurves", description="CBI-driven multi-curve interest rate model")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", parents=[common], help="fit the deterministic shifts to the curves")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("price", parents=[common], help="price bonds, FRAs, caplets or futures convexity")
    s.add_argument("--product", choices=("bond", "fra", "caplet", "convexity"), default="caplet")
    s.add_argument("--method", choices=("fft", "quant", "mc", "all"), default="fft")
    s.add_argument("--tenor", type=float)
    s.add_argument("--expiry", help="comma-separated expiries in years")
    s.add_argument("--strike", help="comma-separated strikes")
    s.set_defaults(func=cmd_price)

    s = sub.add_parser("simulate", parents=[common], help="simulate factor paths")
    s.add_argument("--horizon", type=float, default=1.0)
    s.add_argument("--dump-paths", type=int, default=10)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", parents=[common], help="fit mechanism parameters to a vol surface")
    s.add_argument("--surface", help="normal vol surface CSV")
    s.add_argument("--free", default="b,sigma,eta,theta,alpha")
    s.add_argument("--freeze", action="append", help="keep a parameter at its initial value, repeatable")
    s.add_argument("--max-iter", type=int, default=500)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("moments", parents=[common], help="lifetime, stability and ergodic diagnostics")
    s.add_argument("--expiry", help="comma-separated expiries in years")
    s.set_defaults(func=cmd_moments)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    start = time.perf_counter()
    try:
        if args.threads < 1:
            raise InputError("--threads must be at least 1")
        if args.manifest:
            args = _replay(args)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            code = args.func(args, out)
        if args.func is cmd_fit:
            _write_manifest(out, "fit", _model_inputs(args), args)
    except (InputError, *INPUT_ERRORS, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (*NUMERIC_ERRORS, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
