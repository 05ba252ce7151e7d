"""Levenberg-Marquardt calibration to a normal implied-vol caplet surface.

Parameters live in an unconstrained space:

* b, sigma, eta and every mu_k are log-transformed,
* theta = eta (1 + e^u) keeps theta above eta,
* alpha = 1 + logistic(u) keeps alpha in (1, 2),
* beta and y0 are cumulative softplus sums, so they stay ordered and non-negative.

The no-explosion condition couples four parameters and is enforced by a
barrier: infeasible trial points return inflated residuals, which the
gain-ratio rule rejects.  Residuals are expressed in basis points of normal vol.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .curves import MarketCurves, VolSurface, bachelier_price, implied_normal_vol
from .fourier import caplet_strip_fft_multi, fft_grid_for
from .mechanisms import MechanismParams
from .model import ModelError, ModelParams, MultiCurveModel

__all__ = [
    "CalibrationError",
    "ParamTransform",
    "CalibrationProblem",
    "LMConfig",
    "CalibrationResult",
    "objective",
    "calibrate",
    "synthetic_surface",
    "write_report",
]

log = logging.getLogger(__name__)

BP = 1e-4
SCALARS = ("b", "sigma", "eta", "theta", "alpha")
VECTORS = ("beta", "mu", "y0")
PENALTY_BP = 1e4
TINY = 1e-300


class CalibrationError(ValueError):
    """Malformed calibration inputs or an inadmissible starting point."""


def _softplus(u):
    return np.logaddexp(0.0, u)


def _softplus_inv(d):
    d = np.maximum(np.asarray(d, dtype=float), TINY)
    return d + np.log(-np.expm1(-d))


class ParamTransform:
    """Bijection between ModelParams and an unconstrained vector of the free parameters."""

    def __init__(self, base: ModelParams, free):
        free = tuple(free)
        unknown = [f for f in free if f not in SCALARS + VECTORS]
        if unknown:
            raise CalibrationError(f"unknown parameter names: {', '.join(unknown)}")
        self.base = base
        self.free = tuple(n for n in SCALARS + VECTORS if n in free)
        m = base.m
        self.labels = []
        for n in self.free:
            self.labels += [n] if n in SCALARS else [f"{n}[{k}]" for k in range(m)]

    @property
    def size(self) -> int:
        return len(self.labels)

    def _values(self, params: ModelParams) -> dict:
        d = params.to_dict()
        return {k: (np.asarray(v, dtype=float) if isinstance(v, list) else float(v)) for k, v in d.items()}

    def to_vector(self, params: ModelParams) -> np.ndarray:
        d = self._values(params)
        out = []
        for n in self.free:
            v = d[n]
            if n in ("b", "sigma", "eta"):
                out.append(math.log(max(v, TINY)))
            elif n == "theta":
                out.append(float(np.log(np.expm1(np.log(v / d["eta"])))) if v > d["eta"] else -math.inf)
            elif n == "alpha":
                if not 1.0 < v < 2.0:
                    raise CalibrationError("a free alpha must lie strictly inside (1, 2)")
                out.append(float(logit(v - 1.0)))
            elif n == "mu":
                out.extend(np.log(np.maximum(v, TINY)))
            else:
                out.extend(_softplus_inv(np.diff(np.concatenate([[0.0], v]))))
        vec = np.asarray(out, dtype=float)
        if not np.all(np.isfinite(vec)):
            raise CalibrationError("starting point is not representable (theta must exceed eta)")
        return vec

    def from_vector(self, vec) -> ModelParams:
        """Map back to parameters; raises ValueError/ModelError only for pathological vectors."""
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise CalibrationError(f"parameter vector needs {self.size} entries")
        d = self._values(self.base)
        m = self.base.m
        pos = 0
        raw_theta = None
        for n in self.free:
            if n in SCALARS:
                u = vec[pos]
                pos += 1
                if n in ("b", "sigma", "eta"):
                    d[n] = math.exp(u)
                elif n == "theta":
                    raw_theta = u
                else:
                    d[n] = 1.0 + float(expit(u))
            else:
                u = vec[pos:pos + m]
                pos += m
                d[n] = np.exp(u) if n == "mu" else np.cumsum(_softplus(u))
        if raw_theta is not None:
            d["theta"] = d["eta"] * (1.0 + math.exp(raw_theta))
        mech = MechanismParams(d["b"], d["sigma"], d["eta"], d["theta"], d["alpha"], tuple(d["beta"]))
        return ModelParams(mech, tuple(d["mu"]), tuple(d["y0"]), self.base.tenors)


@dataclass
class CalibrationProblem:
    """A vol surface, the curves to refit, and which parameters move.

    The FFT grid (n, mesh) per tenor is fixed when the problem is built so
    the objective stays a smooth function of the parameters.
    """

    surface: VolSurface
    curves: MarketCurves
    base: ModelParams
    free: tuple = ("b", "sigma", "eta", "theta", "alpha")
    eps: float = -4.0
    mesh: float = 1.0
    fft_n: dict | None = None
    tail_tol: float = 1e-10
    check_tol: float = 1e-6
    rel_tol: float = 1e-8
    threads: int = 1
    transform: ParamTransform = field(init=False)
    groups: list = field(init=False)

    def __post_init__(self):
        s = self.surface
        if len(s) == 0:
            raise CalibrationError("empty vol surface")
        if np.any(s.weight < 0) or not np.all(np.isfinite(s.weight)):
            raise CalibrationError("quote weights must be finite and non-negative")
        self.transform = ParamTransform(self.base, self.free)
        tenors = np.asarray(self.base.tenors)
        self.groups = []
        for i, d in enumerate(tenors):
            idx = np.flatnonzero(np.isclose(s.tenor, d, rtol=0, atol=1e-9))
            if idx.size:
                self.groups.append((i, idx, np.unique(s.expiry[idx]), np.unique(s.strike[idx])))
        covered = sum(g[1].size for g in self.groups)
        if covered != len(s):
            bad = sorted(set(np.round(s.tenor, 9)) - set(np.round(tenors, 9)))
            raise CalibrationError(f"surface quotes tenors without a forward curve: {bad}")
        if self.fft_n is None:
            model = self.build_model(self.base)
            self.fft_n = {
                i: fft_grid_for(model, i, exp, self.tail_tol, self.mesh, self.eps, self.rel_tol)[0]
                for i, _, exp, _ in self.groups
            }

    def build_model(self, params: ModelParams) -> MultiCurveModel:
        return MultiCurveModel(params, self.curves, rel_tol=self.rel_tol)

    def initial_vector(self, params: ModelParams | None = None) -> np.ndarray:
        return self.transform.to_vector(self.base if params is None else params)


def _barrier(params: ModelParams) -> float:
    """Size of the no-explosion violation, 0 when admissible."""
    mech = params.mechanism
    bad = 0.0
    if not mech.theta_eff > 1.0:
        bad += 1.0 - mech.theta_eff
    phi_b = mech.boundary_phi
    if phi_b > 0:
        bad += phi_b if math.isfinite(phi_b) else 1.0
    return bad


def model_quotes(problem: CalibrationProblem, params: ModelParams):
    """(model prices, model vols, market prices) for every quote; vol NaN where the price is unattainable."""
    s = problem.surface
    model = problem.build_model(params)
    prices = np.full(len(s), np.nan)
    vols = np.full(len(s), np.nan)
    mkt = np.full(len(s), np.nan)

    def group(g):
        i, idx, exps, ks = g
        return caplet_strip_fft_multi(model, i, exps, ks, n=problem.fft_n[i], mesh=problem.mesh, eps=problem.eps,
                                      tail_tol=problem.check_tol, rel_tol=problem.rel_tol)

    if problem.threads > 1 and len(problem.groups) > 1:
        with ThreadPoolExecutor(max_workers=problem.threads) as pool:
            strips = list(pool.map(group, problem.groups))
    else:
        strips = [group(g) for g in problem.groups]
    for (i, idx, exps, ks), strip in zip(problem.groups, strips):
        delta = float(model.tenors[i])
        for q in idx:
            T, K = s.expiry[q], s.strike[q]
            r, c = np.searchsorted(exps, T), np.searchsorted(ks, K)
            B = float(model.bond_price(0.0, T + delta))
            fwd = float(model.forward_ibor(i, 0.0, T))
            p = float(strip[r, c])
            prices[q] = p
            mkt[q] = float(bachelier_price(B, delta, fwd, K, s.vol[q], T))
            try:
                vols[q] = implied_normal_vol(p, B, delta, fwd, K, T)
            except ValueError:
                vols[q] = np.nan
    return prices, vols, mkt


def objective(problem: CalibrationProblem, vec) -> np.ndarray:
    """Weighted normal-vol residuals (market minus model) in basis points."""
    s = problem.surface
    w = np.sqrt(s.weight)
    try:
        params = problem.transform.from_vector(vec)
    except (ValueError, OverflowError):
        return np.full(len(s), PENALTY_BP * 10.0)
    bad = _barrier(params)
    if bad > 0:
        return np.full(len(s), PENALTY_BP * (1.0 + bad))
    try:
        _, vols, _ = model_quotes(problem, params)
    except (ModelError, ValueError, ArithmeticError) as exc:
        log.debug("objective penalty: %s", exc)
        return np.full(len(s), PENALTY_BP * 2.0)
    res = (s.vol - vols) / BP
    return w * np.where(np.isfinite(res), res, PENALTY_BP)


@dataclass(frozen=True)
class LMConfig:
    max_iter: int = 500
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    fd_step: float = 1e-5
    tau: float = 1e-3
    threads: int = 1


@dataclass
class CalibrationResult:
    params: ModelParams
    initial: ModelParams
    free: tuple
    vector: np.ndarray
    residuals: np.ndarray
    rms_bp: float
    iterations: int
    evaluations: int
    converged: bool
    reason: str
    trace: list
    wall_time: float


def _jacobian(problem, x, r, cfg: LMConfig):
    h = cfg.fd_step * np.maximum(1.0, np.abs(x))

    def column(k):
        xp = x.copy()
        xp[k] += h[k]
        return (objective(problem, xp) - r) / h[k]

    if cfg.threads > 1 and x.size > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            cols = list(pool.map(column, range(x.size)))
    else:
        cols = [column(k) for k in range(x.size)]
    return np.column_stack(cols) if cols else np.zeros((r.size, 0))


def calibrate(problem: CalibrationProblem, init: ModelParams | None = None, cfg: LMConfig = LMConfig()) -> CalibrationResult:
    """Damped Gauss-Newton with the gain-ratio update of the damping parameter."""
    start = time.perf_counter()
    init = problem.base if init is None else init
    try:
        problem.build_model(init)
    except (ModelError, ValueError) as exc:
        raise CalibrationError(f"inadmissible initial parameters: {exc}") from exc
    x = problem.initial_vector(init)
    r = objective(problem, x)
    if np.all(r >= PENALTY_BP):
        raise CalibrationError("initial parameters price no quote")
    F = 0.5 * float(r @ r)
    evals = 1
    trace = [{"iteration": 0, "rms_bp": math.sqrt(2 * F / r.size), "mu": None, "accepted": True}]
    it, nu, mu = 0, 2.0, None
    reason, converged = "max_iter", False
    if x.size == 0:
        reason, converged = "no free parameters", True
    while x.size and it < cfg.max_iter:
        it += 1
        J = _jacobian(problem, x, r, cfg)
        evals += x.size
        A = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g)) < cfg.grad_tol:
            reason, converged = "gradient", True
            break
        if mu is None:
            mu = cfg.tau * float(np.max(np.diag(A)))
        while True:
            try:
                h = np.linalg.solve(A + mu * np.eye(x.size), -g)
            except np.linalg.LinAlgError:
                mu *= nu
                nu *= 2.0
                continue
            if np.linalg.norm(h) <= cfg.step_tol * (np.linalg.norm(x) + cfg.step_tol):
                reason, converged = "step", True
                break
            xn = x + h
            rn = objective(problem, xn)
            evals += 1
            Fn = 0.5 * float(rn @ rn)
            pred = 0.5 * float(h @ (mu * h - g))
            rho = (F - Fn) / pred if pred > 0 else -1.0
            if rho > 0:
                x, r, F = xn, rn, Fn
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                trace.append({"iteration": it, "rms_bp": math.sqrt(2 * F / r.size), "mu": mu, "accepted": True})
                log.info("iteration %d: rms %.3e bp, mu %.3e", it, math.sqrt(2 * F / r.size), mu)
                break
            mu *= nu
            nu *= 2.0
            trace.append({"iteration": it, "rms_bp": math.sqrt(2 * Fn / r.size), "mu": mu, "accepted": False})
        if reason == "step":
            break
    params = problem.transform.from_vector(x) if x.size else init
    return CalibrationResult(
        params=params, initial=init, free=problem.transform.free, vector=x, residuals=r,
        rms_bp=float(math.sqrt(np.mean(r**2))), iterations=it, evaluations=evals, converged=converged,
        reason=reason, trace=trace, wall_time=time.perf_counter() - start,
    )


def synthetic_surface(params: ModelParams, curves: MarketCurves, expiries=(1.0, 3.0, 5.0, 10.0),
                      strikes=(0.03, 0.035, 0.04, 0.045, 0.05, 0.055, 0.06), tenor_idx=None, **problem_kw) -> VolSurface:
    """Normal vols of the model's own caplet prices on a rectangular grid."""
    tenor_idx = range(params.m) if tenor_idx is None else tenor_idx
    rows = [(T, K, params.tenors[i]) for i in tenor_idx for T in expiries for K in strikes]
    e, k, t = (np.array(c, dtype=float) for c in zip(*rows))
    probe = VolSurface(e, k, t, np.full(e.shape, 0.01))
    problem = CalibrationProblem(probe, curves, params, free=(), **problem_kw)
    _, vols, _ = model_quotes(problem, params)
    if not np.all(np.isfinite(vols)):
        raise CalibrationError("some synthetic quotes have no implied vol")
    return VolSurface(e, k, t, vols)


def write_report(result: CalibrationResult, problem: CalibrationProblem, json_path, csv_path=None):
    """JSON summary plus a per-quote CSV with vol residuals and squared price errors."""
    s = problem.surface
    prices, vols, mkt = model_quotes(problem, result.params)
    price_err = prices - mkt
    rows = [
        {
            "expiry": float(s.expiry[q]), "strike": float(s.strike[q]), "tenor": float(s.tenor[q]),
            "market_vol": float(s.vol[q]), "model_vol": float(vols[q]),
            "residual_bp": float((s.vol[q] - vols[q]) / BP),
            "market_price": float(mkt[q]), "model_price": float(prices[q]),
            "price_sq_error": float(price_err[q] ** 2),
        }
        for q in range(len(s))
    ]
    report = {
        "free": list(result.free),
        "initial": result.initial.to_dict(),
        "final": result.params.to_dict(),
        "rms_vol_bp": result.rms_bp,
        "rms_price": float(np.sqrt(np.nanmean(price_err**2))),
        "iterations": result.iterations,
        "evaluations": result.evaluations,
        "converged": result.converged,
        "reason": result.reason,
        "wall_time": result.wall_time,
        "trace": result.trace,
        "quotes": rows,
    }
    Path(json_path).write_text(json.dumps(report, indent=2, default=repr))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            for row in rows:
                wr.writerow({k: repr(v) for k, v in row.items()})
    return report
