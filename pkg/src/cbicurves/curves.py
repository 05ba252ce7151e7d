"""Pillar curves, spot spreads, and the Bachelier caplet formula."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.interpolate import PchipInterpolator
from scipy.stats import norm

__all__ = [
    "CurveInputError",
    "DiscountCurve",
    "ForwardCurve",
    "MarketCurves",
    "VolSurface",
    "bachelier_price",
    "implied_normal_vol",
    "spot_mult_spread",
    "read_discount_csv",
    "read_forward_csv",
    "read_surface_csv",
    "write_discount_csv",
    "write_forward_csv",
    "write_surface_csv",
]


class CurveInputError(ValueError):
    """Malformed or inconsistent curve input."""


def _check_pillars(pillars):
    pillars = np.asarray(pillars, dtype=float)
    if pillars.ndim != 1 or pillars.size == 0:
        raise CurveInputError("curve needs at least one pillar")
    if np.any(~np.isfinite(pillars)) or np.any(pillars < 0):
        raise CurveInputError("pillars must be finite and non-negative")
    if np.any(np.diff(pillars) <= 0):
        raise CurveInputError("pillars must be strictly increasing")
    return pillars


@dataclass(frozen=True, eq=False)
class DiscountCurve:
    """OIS discount factors B(0, T), monotone cubic in log-discount.

    A pillar at T = 0 with value 1 is added when missing.  Beyond the last
    pillar the instantaneous forward is held flat.
    """

    pillars: np.ndarray
    discounts: np.ndarray
    _interp: PchipInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        pillars = _check_pillars(self.pillars)
        discounts = np.asarray(self.discounts, dtype=float)
        if discounts.shape != pillars.shape:
            raise CurveInputError("pillars and discounts differ in length")
        if np.any(~np.isfinite(discounts)) or np.any(discounts <= 0):
            raise CurveInputError("discount factors must be positive")
        if pillars[0] > 0:
            pillars = np.concatenate([[0.0], pillars])
            discounts = np.concatenate([[1.0], discounts])
        elif discounts[0] != 1.0:
            raise CurveInputError("discount factor at T=0 must equal 1")
        object.__setattr__(self, "pillars", pillars)
        object.__setattr__(self, "discounts", discounts)
        logs = np.log(discounts)
        interp = PchipInterpolator(pillars, logs, extrapolate=False) if pillars.size > 1 else None
        object.__setattr__(self, "_interp", interp)

    @property
    def last_forward(self) -> float:
        if self._interp is None:
            return 0.0
        return -float(self._interp.derivative()(self.pillars[-1]))

    def log_discount(self, T):
        T = np.asarray(T, dtype=float)
        if np.any(T < 0):
            raise ValueError("maturity must be non-negative")
        if self._interp is None:
            return np.zeros_like(T)
        last = self.pillars[-1]
        inside = np.minimum(T, last)
        out = self._interp(inside)
        beyond = T > last
        if np.any(beyond):
            out = np.where(beyond, np.log(self.discounts[-1]) - self.last_forward * (T - last), out)
        # pillar values are returned exactly
        k = np.searchsorted(self.pillars, T)
        k = np.clip(k, 0, self.pillars.size - 1)
        on = self.pillars[k] == T
        if np.any(on):
            out = np.where(on, np.log(self.discounts[k]), out)
        return out

    def __call__(self, T):
        T_arr = np.asarray(T, dtype=float)
        out = np.exp(self.log_discount(T_arr))
        k = np.clip(np.searchsorted(self.pillars, T_arr), 0, self.pillars.size - 1)
        out = np.where(self.pillars[k] == T_arr, self.discounts[k], out)
        return float(out) if np.ndim(T) == 0 else out

    discount = __call__

    def ois_forward(self, T, delta: float):
        """Simple OIS forward rate (B(0,T)/B(0,T+delta) - 1)/delta."""
        return (self(T) / self(np.asarray(T) + delta) - 1.0) / delta


@dataclass(frozen=True, eq=False)
class ForwardCurve:
    """Forward Ibor rates L(0, T, delta) for one tenor; flat beyond the pillars."""

    tenor: float
    pillars: np.ndarray
    forwards: np.ndarray
    _interp: PchipInterpolator | None = field(init=False, repr=False)

    def __post_init__(self):
        if not self.tenor > 0:
            raise CurveInputError("tenor must be positive")
        pillars = _check_pillars(self.pillars)
        forwards = np.asarray(self.forwards, dtype=float)
        if forwards.shape != pillars.shape or np.any(~np.isfinite(forwards)):
            raise CurveInputError("forwards must be finite and match the pillars")
        object.__setattr__(self, "tenor", float(self.tenor))
        object.__setattr__(self, "pillars", pillars)
        object.__setattr__(self, "forwards", forwards)
        interp = PchipInterpolator(pillars, forwards, extrapolate=False) if pillars.size > 1 else None
        object.__setattr__(self, "_interp", interp)

    def __call__(self, T):
        T_arr = np.asarray(T, dtype=float)
        if self._interp is None:
            out = np.full_like(T_arr, self.forwards[0])
        else:
            Tc = np.clip(T_arr, self.pillars[0], self.pillars[-1])
            out = self._interp(Tc)
            k = np.clip(np.searchsorted(self.pillars, Tc), 0, self.pillars.size - 1)
            out = np.where(self.pillars[k] == Tc, self.forwards[k], out)
        return float(out) if np.ndim(T) == 0 else out


@dataclass(frozen=True, eq=False)
class MarketCurves:
    """OIS discount curve plus one forward curve per tenor, tenors increasing."""

    discount: DiscountCurve
    forwards: tuple[ForwardCurve, ...]

    def __post_init__(self):
        fw = tuple(sorted(self.forwards, key=lambda c: c.tenor))
        if not fw:
            raise CurveInputError("at least one forward curve is required")
        tenors = [c.tenor for c in fw]
        if len(set(tenors)) != len(tenors):
            raise CurveInputError("duplicate tenor among forward curves")
        object.__setattr__(self, "forwards", fw)

    @property
    def tenors(self) -> tuple[float, ...]:
        return tuple(c.tenor for c in self.forwards)

    def spread(self, i: int, T):
        return spot_mult_spread(self.forwards[i], self.discount, T)


def spot_mult_spread(fwd: ForwardCurve, ois: DiscountCurve, T):
    """(1 + delta L(0,T,delta)) / (1 + delta L_OIS(0,T,delta))."""
    T = np.asarray(T, dtype=float)
    if np.any(T < 0):
        raise ValueError("maturity must be non-negative")
    d = fwd.tenor
    out = (1.0 + d * fwd(T)) * ois(T + d) / ois(T)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class VolSurface:
    """Normal implied vol quotes (expiry, strike, tenor, vol)."""

    expiry: np.ndarray
    strike: np.ndarray
    tenor: np.ndarray
    vol: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, n), dtype=float)) for n in ("expiry", "strike", "tenor", "vol")]
        if len({a.shape for a in arrs}) != 1:
            raise CurveInputError("surface columns differ in length")
        e, k, t, v = arrs
        if np.any(~(e > 0)):
            raise CurveInputError("expiries must be positive")
        if np.any(~(v >= 0)):
            raise CurveInputError("vols must be non-negative")
        if np.any(~(t > 0)):
            raise CurveInputError("tenors must be positive")
        for name, a in zip(("expiry", "strike", "tenor", "vol"), arrs):
            object.__setattr__(self, name, a)
        w = np.ones_like(e) if self.weight is None else np.asarray(self.weight, dtype=float)
        object.__setattr__(self, "weight", w)

    def __len__(self):
        return self.expiry.size


def bachelier_price(B_settle, delta, fwd, K, sigma, T_expiry):
    """Caplet price under a normal model, settled and discounted at T + delta."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    sd = sigma * np.sqrt(np.asarray(T_expiry, dtype=float))
    diff = np.asarray(fwd, dtype=float) - np.asarray(K, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a = np.abs(diff / sd)
        val = np.maximum(diff, 0.0) + sd * (norm.pdf(a) - a * norm.sf(a))  # parity keeps the time value out of the intrinsic
    val = np.where((sd > 0) & np.isfinite(val), val, np.maximum(diff, 0.0))  # z overflow: no time value left
    out = B_settle * delta * val
    return float(out) if np.ndim(out) == 0 else out


def implied_normal_vol(price, B_settle, delta, fwd, K, T_expiry, vol_cap: float = 1.0) -> float:
    """Normal vol reproducing ``price``; zero when the price equals intrinsic value."""
    if not T_expiry > 0:
        raise ValueError("expiry must be positive")
    intrinsic = B_settle * delta * max(fwd - K, 0.0)
    tol = 1e-15 * max(1.0, abs(B_settle * delta))
    if price < intrinsic - tol:
        raise ValueError("price below intrinsic value")
    if price <= intrinsic + tol:
        return 0.0
    top = bachelier_price(B_settle, delta, fwd, K, vol_cap, T_expiry)
    if price > top:
        raise ValueError("price above the attainable range")
    f = lambda s: bachelier_price(B_settle, delta, fwd, K, s, T_expiry) - price
    return optimize.brentq(f, 0.0, vol_cap, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


# ---------------------------------------------------------------- CSV IO


def _read_rows(path, columns):
    path = Path(path)
    if not path.exists():
        raise CurveInputError(f"file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(columns):
            raise CurveInputError(f"{path}: expected header {','.join(columns)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise CurveInputError(f"{path}: row {lineno}: expected {len(columns)} fields")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise CurveInputError(f"{path}: row {lineno}: non-numeric field") from None
            if not all(math.isfinite(x) for x in vals):
                raise CurveInputError(f"{path}: row {lineno}: non-finite field")
            rows.append(vals)
    if not rows:
        raise CurveInputError(f"{path}: no data rows")
    return np.array(rows)


def read_discount_csv(path) -> DiscountCurve:
    data = _read_rows(path, ("tenor_years", "discount_factor"))
    return DiscountCurve(data[:, 0], data[:, 1])


_TENOR_RE = re.compile(r"(\d+(?:\.\d+)?)([MmYy])")


def read_forward_csv(path, tenor: float | None = None) -> ForwardCurve:
    """Forward curve file; the tenor comes from the argument, a sidecar JSON, or the filename (e.g. 3M)."""
    path = Path(path)
    if tenor is None:
        side = path.with_suffix(".json")
        if side.exists():
            tenor = float(json.loads(side.read_text())["tenor"])
        else:
            m = _TENOR_RE.search(path.stem)
            if not m:
                raise CurveInputError(f"{path}: tenor not given and not found in sidecar or filename")
            tenor = float(m.group(1)) / (12.0 if m.group(2) in "Mm" else 1.0)
    data = _read_rows(path, ("tenor_years", "forward_rate"))
    return ForwardCurve(tenor, data[:, 0], data[:, 1])


def read_surface_csv(path) -> VolSurface:
    data = _read_rows(path, ("expiry_years", "strike", "tenor_years", "normal_vol_abs"))
    for lineno, row in enumerate(data, start=2):
        if not row[0] > 0 or not row[2] > 0 or row[3] < 0:
            raise CurveInputError(f"{path}: row {lineno}: invalid quote")
    return VolSurface(data[:, 0], data[:, 1], data[:, 2], data[:, 3])


def _fmt(x) -> str:
    return repr(float(x))


def write_discount_csv(path, curve: DiscountCurve):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tenor_years", "discount_factor"])
        for t, d in zip(curve.pillars, curve.discounts):
            w.writerow([_fmt(t), _fmt(d)])


def write_forward_csv(path, curve: ForwardCurve):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tenor_years", "forward_rate"])
        for t, f in zip(curve.pillars, curve.forwards):
            w.writerow([_fmt(t), _fmt(f)])
    Path(path).with_suffix(".json").write_text(json.dumps({"tenor": curve.tenor}))


def write_surface_csv(path, surface: VolSurface):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["expiry_years", "strike", "tenor_years", "normal_vol_abs"])
        for row in zip(surface.expiry, surface.strike, surface.tenor, surface.vol):
            w.writerow([_fmt(x) for x in row])
