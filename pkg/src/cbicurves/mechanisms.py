"""Tempered alpha-stable branching mechanism and its analytic companions.

The mechanism drives every factor of the CBI flow.  Jumps of the flow have
size ``eta * u`` with ``u`` drawn from the tempered stable measure, which is
the same as a tempered stable measure with tempering ``theta / eta`` and
scale ``eta**alpha``.  All formulas below are written in terms of that
effective tempering ``theta_eff``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, optimize, special

__all__ = [
    "DomainError",
    "DomainInfo",
    "MechanismParams",
    "dphi",
    "domain",
    "ergodic_laplace",
    "ergodic_mean",
    "exp_moment_finite",
    "flow_jump_constant",
    "levy_density",
    "lifetime",
    "lifetime_root",
    "phi",
    "psi",
    "upper_incomplete_gamma",
]


class DomainError(ValueError):
    """Argument outside the effective domain of the mechanism."""


@dataclass(frozen=True)
class DomainInfo:
    lower_bound: float
    boundary_included: bool


@dataclass(frozen=True)
class MechanismParams:
    """Parameters of the branching mechanism and the immigration ladder.

    ``eta = 0`` switches the jump part off, leaving a CIR mechanism that is
    used as a closed-form test double.  ``alpha = 2`` is accepted as the
    Gaussian limit of the stable family.
    """

    b: float
    sigma: float
    eta: float
    theta: float
    alpha: float
    beta: tuple[float, ...] = field(default=(0.0,))

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(x) for x in np.atleast_1d(self.beta)))
        for name in ("b", "sigma", "eta", "theta", "alpha"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if not self.theta > self.eta:
            raise ValueError("theta must exceed eta")
        if not 1.0 < self.alpha <= 2.0:
            raise ValueError("alpha must lie in (1, 2]")
        beta = np.asarray(self.beta)
        if beta.size == 0 or np.any(beta < 0) or np.any(np.diff(beta) < 0):
            raise ValueError("beta must be a non-empty, non-negative, non-decreasing vector")

    @property
    def m(self) -> int:
        return len(self.beta)

    @property
    def has_jumps(self) -> bool:
        return self.eta > 0

    @property
    def theta_eff(self) -> float:
        return self.theta / self.eta if self.eta > 0 else math.inf

    @property
    def lower_bound(self) -> float:
        return -self.theta_eff

    @property
    def dbeta(self) -> np.ndarray:
        """Immigration increments beta(i) - beta(i-1) with beta(0) = 0."""
        return np.diff(np.concatenate([[0.0], self.beta]))

    @property
    def boundary_phi(self) -> float:
        """phi at the lower end of the domain; non-positive means no explosion."""
        if not self.has_jumps:
            return math.inf if self.sigma > 0 else (-math.inf if self.b > 0 else math.inf)
        return float(phi(self, self.lower_bound))

    @property
    def is_stable(self) -> bool:
        return self.has_jumps and self.boundary_phi <= 0.0

    def stability_threshold(self) -> float:
        """Smallest b for which the flow has no moment explosion."""
        a, eta, th = self.alpha, self.eta, self.theta
        return 0.5 * self.sigma**2 * th / eta + eta * (1 - a) * th ** (a - 1) / math.cos(a * math.pi / 2)

    def with_(self, **kw) -> "MechanismParams":
        return replace(self, **kw)


def flow_jump_constant(mech: MechanismParams) -> float:
    """Scale of the flow's jump measure C(alpha, eta) = -eta^a / (Gamma(-a) cos(a pi / 2))."""
    a = mech.alpha
    return -(mech.eta**a) / (special.gamma(-a) * math.cos(a * math.pi / 2))


def levy_density(mech: MechanismParams, w):
    """Density of the flow jump measure at jump size ``w > 0``."""
    w = np.asarray(w, dtype=float)
    th = mech.theta_eff
    return flow_jump_constant(mech) * np.exp(-th * w) * w ** (-1.0 - mech.alpha)


def domain(mech: MechanismParams) -> DomainInfo:
    return DomainInfo(mech.lower_bound, mech.has_jumps)


def _shifted_power(s, a):
    """Principal power s**a that stays real on the real axis."""
    if np.iscomplexobj(s):
        out = np.power(s, a)
        real = np.imag(s) == 0
        if np.any(real):
            out = np.where(real, np.power(np.maximum(np.real(s), 0.0), a), out)
        return out
    return np.power(s, a)


def phi_unchecked(mech: MechanismParams, z):
    """Closed-form mechanism without the domain check (internal use by solvers)."""
    out = mech.b * z + 0.5 * mech.sigma**2 * z * z
    if mech.has_jumps:
        a, th = mech.alpha, mech.theta_eff
        c = mech.eta**a / math.cos(a * math.pi / 2)
        out = out + c * (th**a + z * (a * th ** (a - 1)) - _shifted_power(z + th, a))
    return out


def _check_domain(mech: MechanismParams, z):
    if mech.has_jumps and np.any(np.real(z) < mech.lower_bound):
        raise DomainError(f"Re(z) below the domain bound {mech.lower_bound!r}")


def phi(mech: MechanismParams, z):
    """Branching mechanism at real or complex ``z`` with Re(z) >= -theta_eff."""
    scalar = np.ndim(z) == 0
    z = np.asarray(z)
    if not np.iscomplexobj(z):
        z = z.astype(float)
    _check_domain(mech, z)
    out = phi_unchecked(mech, z)
    return out[()] if scalar else out


def dphi(mech: MechanismParams, z):
    """Derivative of :func:`phi`."""
    scalar = np.ndim(z) == 0
    z = np.asarray(z)
    if not np.iscomplexobj(z):
        z = z.astype(float)
    _check_domain(mech, z)
    out = mech.b + mech.sigma**2 * z
    if mech.has_jumps:
        a, th = mech.alpha, mech.theta_eff
        c = mech.eta**a * a / math.cos(a * math.pi / 2)
        out = out + c * (th ** (a - 1) - _shifted_power(z + th, a - 1))
    return out[()] if scalar else out


def psi(mech: MechanismParams, z, i: int):
    """Immigration rate of factor ``i`` (zero-based)."""
    if not 0 <= i < mech.m:
        raise IndexError(f"factor index {i} out of range for {mech.m} factors")
    return mech.dbeta[i] * z


def _finite_lower(mech: MechanismParams, q: float) -> float:
    """A finite left end for root searches; for jump-free mechanisms expand until phi > q."""
    if mech.has_jumps:
        return mech.lower_bound
    y = -1.0
    while phi(mech, y) <= q:
        y *= 2.0
        if y < -1e300:
            return -math.inf
    return y


def lifetime_root(mech: MechanismParams, q: float) -> float:
    """p_q = inf{y in domain : q - phi(y) >= 0}."""
    if q < 0:
        raise ValueError("q must be non-negative")
    lo = _finite_lower(mech, q)
    if not math.isfinite(lo):
        return -math.inf
    if q - phi(mech, lo) >= 0:
        return mech.lower_bound if mech.has_jumps else -math.inf
    hi = 0.0
    if q == 0.0:
        # phi(0) = 0: move the right end to where phi is strictly negative
        if mech.b <= 0:
            return 0.0
        hi = optimize.brentq(lambda y: dphi(mech, y), lo, 0.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        if phi(mech, hi) >= 0:
            return 0.0
    return optimize.brentq(lambda y: q - phi(mech, y), lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)


def lifetime(mech: MechanismParams, p: float, q: float) -> float:
    """Explosion time of v(., p, q); ``math.inf`` when the solution lives forever."""
    if mech.has_jumps and p < mech.lower_bound:
        raise DomainError(f"p={p!r} below the domain bound {mech.lower_bound!r}")
    pq = lifetime_root(mech, q)
    if p >= pq:
        return math.inf
    lo = mech.lower_bound

    def f(y):
        return 1.0 / (phi(mech, y) - q)

    if math.isfinite(lo):
        # split off the last decade next to p so a nearby root of phi - q is resolved
        mid = p - 0.1 * (p - lo)
        parts = [(lo, mid), (mid, p)]
    else:
        parts = [(-math.inf, min(p, -1.0))] + ([(-1.0, p)] if p > -1.0 else [])
    total = 0.0
    for a, b in parts:
        val, _ = integrate.quad(f, a, b, epsabs=0.0, epsrel=1e-10, limit=500)
        total += val
    return total


def exp_moment_finite(mech: MechanismParams, gamma: float) -> bool:
    """Whether E[exp(gamma X_t)] is finite for every t.

    This is the case exactly when ``-gamma`` lies in the domain and at or
    above the explosion root p_0.  For stable mechanisms p_0 is the domain
    bound, so the test reduces to ``gamma <= theta_eff``.
    """
    p = -gamma
    if mech.has_jumps and p < mech.lower_bound:
        return False
    return p >= lifetime_root(mech, 0.0)


def ergodic_laplace(mech: MechanismParams, p: float, beta: float | None = None) -> float:
    """Laplace transform of the stationary law, exp(-beta * int_0^p z / phi(z) dz).

    ``beta`` defaults to the immigration of the last factor.
    """
    if mech.b <= 0:
        raise ValueError("ergodic law requires b > 0")
    beta = mech.beta[-1] if beta is None else float(beta)
    if p <= lifetime_root(mech, 0.0):
        raise DomainError("p must exceed the explosion root p_0")
    if p == 0:
        return 1.0

    def f(z):
        if abs(z) < 1e-12:
            return 1.0 / mech.b
        return z / phi(mech, z)

    val, _ = integrate.quad(f, 0.0, p, epsabs=0.0, epsrel=1e-12, limit=500)
    return math.exp(-beta * val)


def ergodic_mean(mech: MechanismParams) -> np.ndarray:
    """Stationary mean beta(i) / b of every cumulative factor."""
    if mech.b <= 0:
        raise ValueError("ergodic law requires b > 0")
    return np.asarray(mech.beta) / mech.b


def upper_incomplete_gamma(a: float, x: float) -> float:
    """Gamma(a, x) = int_x^inf u^(a-1) e^(-u) du for any real a and x > 0.

    Negative orders are reached by the downward recurrence
    Gamma(a, x) = (Gamma(a+1, x) - x^a e^-x) / a from a positive order.
    """
    if not x > 0:
        raise ValueError("x must be positive")
    if a > 0:
        return float(special.gammaincc(a, x) * special.gamma(a))
    if a == 0:
        return float(special.exp1(x))
    k = math.ceil(-a)
    top = a + k
    g = upper_incomplete_gamma(top, x) if top > 0 else float(special.exp1(x))
    for j in range(k - 1, -1, -1):
        s = a + j
        g = (g - x**s * math.exp(-x)) / s
    return g
