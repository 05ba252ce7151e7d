"""Flow-driven multi-curve model: exact curve fit and closed-form linear products.

Factors are the independent layers X^j = Y^j - Y^(j-1) of the CBI flow.
The OIS short rate loads on X^j with weight lambda_j = sum_{k>=j} mu_k and
the log spread of tenor i loads on X^j for every j <= i.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curves import CurveInputError, MarketCurves
from .mechanisms import MechanismParams, lifetime
from .riccati import RiccatiSolution, solve_batch

__all__ = [
    "ModelError",
    "ConvexityNotFinite",
    "ModelParams",
    "FittedShifts",
    "MultiCurveModel",
    "fit_shifts",
]


class ModelError(ValueError):
    """Invalid model specification."""


class ConvexityNotFinite(ArithmeticError):
    """The future rate has no finite expectation at the requested horizon."""


@dataclass(frozen=True)
class ModelParams:
    """Everything in the model parameter file."""

    mechanism: MechanismParams
    mu: tuple[float, ...]
    y0: tuple[float, ...]
    tenors: tuple[float, ...]

    def __post_init__(self):
        m = self.mechanism.m
        for name in ("mu", "y0", "tenors"):
            val = tuple(float(x) for x in np.atleast_1d(getattr(self, name)))
            if len(val) != m:
                raise ModelError(f"{name} needs {m} entries, got {len(val)}")
            object.__setattr__(self, name, val)
        if any(x < 0 for x in self.mu):
            raise ModelError("mu must be non-negative")
        if any(x < 0 for x in self.y0) or any(a > b for a, b in zip(self.y0, self.y0[1:])):
            raise ModelError("y0 must be non-negative and non-decreasing")
        if any(not t > 0 for t in self.tenors) or any(a >= b for a, b in zip(self.tenors, self.tenors[1:])):
            raise ModelError("tenors must be positive and strictly increasing")

    @property
    def m(self) -> int:
        return self.mechanism.m

    @property
    def lam(self) -> np.ndarray:
        return np.cumsum(np.asarray(self.mu)[::-1])[::-1]

    @property
    def x0(self) -> np.ndarray:
        return np.diff(np.concatenate([[0.0], self.y0]))

    def to_dict(self) -> dict:
        mech = self.mechanism
        return {
            "b": mech.b,
            "sigma": mech.sigma,
            "eta": mech.eta,
            "theta": mech.theta,
            "alpha": mech.alpha,
            "beta": list(mech.beta),
            "mu": list(self.mu),
            "y0": list(self.y0),
            "tenors": list(self.tenors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        keys = ("b", "sigma", "eta", "theta", "alpha", "beta", "mu", "y0", "tenors")
        missing = [k for k in keys if k not in d]
        if missing:
            raise ModelError(f"parameter file lacks {', '.join(missing)}")
        try:
            mech = MechanismParams(d["b"], d["sigma"], d["eta"], d["theta"], d["alpha"], tuple(d["beta"]))
        except (TypeError, ValueError) as exc:
            raise ModelError(str(exc)) from exc
        return cls(mech, tuple(d["mu"]), tuple(d["y0"]), tuple(d["tenors"]))

    @classmethod
    def read(cls, path) -> "ModelParams":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelError(f"cannot read parameter file {path}: {exc}") from exc
        return cls.from_dict(data)

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


class _FactorCache:
    """v(., 0, lambda_j) and v(., -1, lambda_j) with dense output, extended on demand."""

    MAX_STEP = 1.0 / 32.0

    def __init__(self, mech: MechanismParams, lam: np.ndarray, horizon: float, rel_tol: float):
        self.mech = mech
        self.lam = lam
        self.rel_tol = rel_tol
        self._sol: dict[int, RiccatiSolution] = {}
        self._horizon = 0.0
        self._extend(horizon)

    def _extend(self, horizon: float):
        horizon = max(horizon, 2.0 * self._horizon)
        for j, q in enumerate(self.lam):
            sol = solve_batch(self.mech, [0.0, -1.0], float(q), horizon, self.rel_tol, max_step=self.MAX_STEP)
            if sol.exploded:
                raise ModelError(f"Riccati solution of factor {j} explodes before {horizon}")
            self._sol[j] = sol
        self._horizon = horizon

    def __call__(self, j: int, tau):
        """(v0, I0, vm, Im) at time(s) tau for factor j."""
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < 0):
            raise ValueError("negative time to maturity")
        if np.any(tau > self._horizon):
            self._extend(float(np.max(tau)) + 1.0)
        v, integ = self._sol[j](tau)
        return v[..., 0], integ[..., 0], v[..., 1], integ[..., 1]


@dataclass(frozen=True, eq=False)
class FittedShifts:
    """Lambda(T) = int_0^T l(s) ds and spread shifts c_i(T), evaluated exactly.

    ``grid``, ``Lambda_grid`` and ``c_grid`` tabulate both on a monthly grid
    for reporting.
    """

    Lambda: callable
    c: callable
    grid: np.ndarray
    Lambda_grid: np.ndarray
    c_grid: np.ndarray
    negative_c: tuple[int, ...] = field(default=())


def fit_shifts(params: ModelParams, curves: MarketCurves, cache: _FactorCache) -> FittedShifts:
    """Invert the bond and spread formulas at t = 0 against the market curves."""
    mech = params.mechanism
    dbeta, x0 = mech.dbeta, params.x0

    def Lambda(T):
        T = np.asarray(T, dtype=float)
        out = -curves.discount.log_discount(T)
        for j in range(params.m):
            v0, i0, _, _ = cache(j, T)
            out = out - dbeta[j] * i0 - v0 * x0[j]
        return out

    def c(i, T):
        T = np.asarray(T, dtype=float)
        out = np.log(curves.spread(i, T))
        for j in range(i + 1):
            v0, i0, vm, im = cache(j, T)
            out = out - dbeta[j] * (i0 - im) - (v0 - vm) * x0[j]
        return out

    last = max(float(curves.discount.pillars[-1]), max(float(f.pillars[-1]) for f in curves.forwards))
    grid = np.arange(0, math.ceil(12 * last) + 1) / 12.0
    lam_grid = Lambda(grid)
    c_grid = np.array([c(i, grid) for i in range(params.m)])
    negative = tuple(i for i in range(params.m) if np.any(c_grid[i] < 0))
    if negative:
        warnings.warn(f"fitted spread shifts c_i < 0 for tenor indices {negative}", stacklevel=3)
    return FittedShifts(Lambda, c, grid, lam_grid, c_grid, negative)


class MultiCurveModel:
    """Fitted multi-curve model.  Tenor indices are zero-based throughout."""

    def __init__(self, params: ModelParams, curves: MarketCurves, rel_tol: float = 1e-10):
        mech = params.mechanism
        if not mech.is_stable:
            raise ModelError("mechanism violates the no-explosion condition phi(-theta/eta) <= 0")
        if not mech.theta_eff > 1:
            raise ModelError("theta/eta must exceed 1")
        if len(curves.forwards) != params.m:
            raise CurveInputError(f"model has {params.m} tenors but {len(curves.forwards)} forward curves were given")
        for k, (a, b) in enumerate(zip(params.tenors, curves.tenors)):
            if abs(a - b) > 1e-12:
                raise CurveInputError(f"missing forward curve for tenor {a} (index {k})")
        self.params = params
        self.curves = curves
        self.mechanism = mech
        self.m = params.m
        self.tenors = np.asarray(params.tenors)
        self.lam = params.lam
        self.x0 = params.x0
        self.dbeta = mech.dbeta
        self.rel_tol = rel_tol
        last = max(float(curves.discount.pillars[-1]), max(float(f.pillars[-1]) for f in curves.forwards))
        self._cache = _FactorCache(mech, self.lam, max(31.0, last + self.tenors[-1] + 1.0), rel_tol)
        self.shifts = fit_shifts(params, curves, self._cache)

    # ------------------------------------------------------------ coefficients

    def _x(self, x):
        x = self.x0 if x is None else np.asarray(x, dtype=float)
        if x.shape[-1] != self.m:
            raise ValueError(f"factor state needs {self.m} components")
        return x

    def Lambda(self, T):
        return self.shifts.Lambda(T)

    def c(self, i: int, T):
        self._check_index(i)
        return self.shifts.c(i, T)

    def _check_index(self, i):
        if not 0 <= i < self.m:
            raise IndexError(f"tenor index {i} out of range")

    def B0(self, tau) -> np.ndarray:
        """Bond loadings, one column per factor."""
        return -np.stack([self._cache(j, tau)[0] for j in range(self.m)], axis=-1)

    def Bi(self, i: int, tau) -> np.ndarray:
        self._check_index(i)
        cols = []
        for j in range(self.m):
            v0, _, vm, _ = self._cache(j, tau)
            cols.append((v0 - vm) if j <= i else np.zeros_like(v0))
        return np.stack(cols, axis=-1)

    def A0(self, t, T):
        tau = np.asarray(T, dtype=float) - np.asarray(t, dtype=float)
        out = -(self.Lambda(T) - self.Lambda(t))
        for j in range(self.m):
            out = out - self.dbeta[j] * self._cache(j, tau)[1]
        return out

    def Ai(self, i: int, t, T):
        self._check_index(i)
        tau = np.asarray(T, dtype=float) - np.asarray(t, dtype=float)
        out = self.c(i, T)
        for j in range(i + 1):
            _, i0, _, im = self._cache(j, tau)
            out = out + self.dbeta[j] * (i0 - im)
        return out

    # ------------------------------------------------------------ products

    def bond_price(self, t, T, x=None):
        t, T = float(t), float(T)
        if t > T:
            raise ValueError("t must not exceed T")
        x = self._x(x)
        return float(np.exp(self.A0(t, T) + self.B0(T - t) @ x))

    def bond_prices(self, t, T, x):
        """Vectorized over states: x has shape (n, m), T scalar."""
        x = np.asarray(x, dtype=float)
        return np.exp(self.A0(t, T) + x @ self.B0(float(T) - float(t)))

    def fwd_mult_spread(self, i: int, t, T, x=None):
        t, T = float(t), float(T)
        if t > T:
            raise ValueError("t must not exceed T")
        x = self._x(x)
        return float(np.exp(self.Ai(i, t, T) + self.Bi(i, T - t) @ x))

    def forward_ibor(self, i: int, t, T, x=None):
        d = self.tenors[i] if 0 <= i < self.m else None
        S = self.fwd_mult_spread(i, t, T, x)
        return (S * self.bond_price(t, T, x) / self.bond_price(t, T + d, x) - 1.0) / d

    def forward_ibor_paths(self, i: int, T: float, x):
        """L(T, T, delta_i) for an array of factor states at time T."""
        d = self.tenors[i]
        x = np.asarray(x, dtype=float)
        log_s = self.c(i, T) + x @ self.Bi(i, 0.0)
        log_b = self.A0(T, T + d) + x @ self.B0(d)
        return (np.exp(log_s - log_b) - 1.0) / d

    def futures_rate(self, i: int, t, T, x=None, immigration_weighted: bool = True):
        """E[L(T, T, delta_i) | X_t = x] under the risk-neutral measure.

        The exponent integrates the immigration rate psi_j(v) = dbeta_j v of
        each factor; ``immigration_weighted=False`` drops the dbeta_j weight.
        """
        self._check_index(i)
        t, T = float(t), float(T)
        if t > T:
            raise ValueError("t must not exceed T")
        x = self._x(x)
        d = self.tenors[i]
        tau = T - t
        p = self.B0(d) - (np.arange(self.m) <= i)
        mech = self.mechanism
        expo = self.c(i, T) - self.A0(T, T + d)
        for j in range(self.m):
            if x[j] == 0.0 and self.dbeta[j] == 0.0:
                continue  # factor stays at zero
            if p[j] < mech.lower_bound:
                raise ConvexityNotFinite(
                    f"convexity not finite: factor {j} needs the exponential moment "
                    f"{-p[j]:.6g} beyond theta/eta = {mech.theta_eff:.6g}"
                )
            if tau == 0:
                expo -= p[j] * x[j]
                continue
            if lifetime(mech, float(p[j]), 0.0) <= tau:
                raise ConvexityNotFinite(f"convexity not finite at horizon {tau}: factor {j} explodes")
            sol = solve_batch(mech, [p[j]], 0.0, tau, self.rel_tol, dense=False)
            v, integ = sol.v[-1, 0], sol.integral[-1, 0]
            w = self.dbeta[j] if immigration_weighted else 1.0
            expo -= w * integ + v * x[j]
        return (math.exp(expo) - 1.0) / d

    def futures_convexity(self, i: int, t, T, x=None, immigration_weighted: bool = True):
        return self.futures_rate(i, t, T, x, immigration_weighted) - self.forward_ibor(i, t, T, x)

    # ------------------------------------------------------------ reporting

    def fit_errors(self) -> dict:
        """Relative repricing errors at every input pillar."""
        disc = self.curves.discount
        bond = [self.bond_price(0.0, T) / disc(T) - 1.0 for T in disc.pillars]
        spreads = []
        for i, fc in enumerate(self.curves.forwards):
            spreads.append([self.fwd_mult_spread(i, 0.0, T) / self.curves.spread(i, T) - 1.0 for T in fc.pillars])
        return {"bond": np.array(bond), "spread": [np.array(s) for s in spreads]}
