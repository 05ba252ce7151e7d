"""Generalized Riccati equation dv/dt = q - phi(v), v(0) = p.

The solver integrates the augmented pair (v, I) with I' = v using an
embedded Dormand-Prince 5(4) pair.  Initial values may be a batch of real or
complex numbers; the whole batch shares one step-size sequence, so results
are reproducible and independent of how callers split their work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mechanisms import DomainError, MechanismParams, phi_unchecked

__all__ = ["RiccatiRequest", "RiccatiSolution", "RiccatiError", "solve", "solve_batch", "affine_transform"]

GUARD = 1e-14

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


class RiccatiError(RuntimeError):
    """Raised when a caller demands full-horizon coverage and the solution explodes."""


@dataclass(frozen=True)
class RiccatiRequest:
    mechanism: MechanismParams
    p: complex | float
    q: float
    horizon: float

    def __post_init__(self):
        if self.q < 0:
            raise ValueError("q must be non-negative")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.mechanism.has_jumps and np.real(self.p) < self.mechanism.lower_bound:
            raise DomainError("Re(p) below the domain bound")


@dataclass(frozen=True)
class RiccatiSolution:
    """v(t) and I(t) = int_0^t v at the grid points.

    For a batch of initial values ``v`` and ``integral`` have shape
    ``(len(grid), n)``; entries after an explosion are NaN and ``blew_up``
    holds the explosion time per element (``inf`` when none).
    """

    grid: np.ndarray
    v: np.ndarray
    integral: np.ndarray
    blew_up: np.ndarray | float
    q: float
    mechanism: MechanismParams

    @property
    def v_values(self):
        return self.v

    @property
    def integral_values(self):
        return self.integral

    @property
    def exploded(self) -> bool:
        return bool(np.any(np.isfinite(self.blew_up)))

    def __call__(self, t):
        """Cubic Hermite dense output (v(t), I(t)) between grid points."""
        t = np.asarray(t, dtype=float)
        g = self.grid
        if np.any(t < g[0] - 1e-12) or np.any(t > g[-1] + 1e-12):
            raise ValueError("evaluation time outside the solved range")
        k = np.clip(np.searchsorted(g, t, side="right") - 1, 0, len(g) - 2)
        h = g[k + 1] - g[k]
        s = (t - g[k]) / h
        extra = (slice(None),) + (None,) * (self.v.ndim - 1)
        s, h = s[extra] if t.ndim else s, h[extra] if t.ndim else h
        v0, v1 = self.v[k], self.v[k + 1]
        f0 = self.q - phi_unchecked(self.mechanism, v0)
        f1 = self.q - phi_unchecked(self.mechanism, v1)
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        v = h00 * v0 + h10 * h * f0 + h01 * v1 + h11 * h * f1
        i0, i1 = self.integral[k], self.integral[k + 1]
        integral = h00 * i0 + h10 * h * v0 + h01 * i1 + h11 * h * v1
        return v, integral


def _rhs(mech, q, v):
    return q - phi_unchecked(mech, v), v


def _integrate(mech, p, q, horizon, rtol, atol, stops, dense, max_step, h_min_rel=1e-13, max_steps=200000):
    """Core DP5(4) loop over a 1-d batch ``p``."""
    p = np.asarray(p)
    n = p.shape[0]
    lb = mech.lower_bound + GUARD if mech.has_jumps else -math.inf
    stops = np.unique(np.concatenate([np.asarray(stops, dtype=float), [horizon]]))
    stops = stops[(stops > 0) & (stops <= horizon)]

    dtype = np.result_type(p.dtype, float)
    v = p.astype(dtype).copy()
    integ = np.zeros(n, dtype=dtype)
    alive = np.ones(n, dtype=bool)
    blew = np.full(n, math.inf)

    times = [0.0]
    v_out = [v.copy()]
    i_out = [integ.copy()]

    t = 0.0
    f_v, f_i = _rhs(mech, q, v)
    scale0 = np.max(np.abs(f_v)) if n else 0.0
    h = min(max_step, horizon, 0.01 / max(scale0, 1e-12) if scale0 > 0 else horizon)
    h = max(h, 1e-6 * horizon)
    err_prev = 1.0
    si = 0
    steps = 0
    while si < len(stops) and np.any(alive):
        target = stops[si]
        if steps > max_steps:
            raise RiccatiError("step budget exhausted")
        h = min(h, max_step, target - t)
        idx = np.flatnonzero(alive)
        y_v, y_i = v[idx], integ[idx]
        kv = [f_v[idx]]
        ki = [f_i[idx]]
        bad = np.zeros(idx.size, dtype=bool)
        for s in range(1, 7):
            a = _A[s]
            sv = y_v + h * sum(a[j] * kv[j] for j in range(s) if a[j] != 0.0)
            si_ = y_i + h * sum(a[j] * ki[j] for j in range(s) if a[j] != 0.0)
            bad |= ~(np.real(sv) >= lb) | ~np.isfinite(sv)
            sv_safe = np.where(bad, y_v, sv) if bad.any() else sv
            fv, fi = _rhs(mech, q, sv_safe)
            kv.append(fv)
            ki.append(fi)
        new_v, new_i = sv, si_
        h_floor = h_min_rel * max(1.0, t)
        if bad.any():
            if h * 0.5 < h_floor:
                # elements that keep leaving the domain have exploded
                dead = idx[bad]
                fdead = kv[0][bad]
                dist = np.real(y_v[bad]) - mech.lower_bound if mech.has_jumps else 0.0 * np.real(y_v[bad])
                speed = np.maximum(np.abs(np.real(fdead)), 1e-300)
                blew[dead] = t + dist / speed
                alive[dead] = False
                v[dead] = np.nan
                integ[dead] = np.nan
                h = max(h, 1e-6 * horizon)
                continue
            h *= 0.5
            continue
        ev = h * sum(_E[j] * kv[j] for j in range(7) if _E[j] != 0.0)
        ei = h * sum(_E[j] * ki[j] for j in range(7) if _E[j] != 0.0)
        sc_v = atol + rtol * np.maximum(np.abs(y_v), np.abs(new_v))
        sc_i = atol + rtol * np.maximum(np.abs(y_i), np.abs(new_i))
        err = max(np.max(np.abs(ev) / sc_v), np.max(np.abs(ei) / sc_i)) if idx.size else 0.0
        if not math.isfinite(err):
            err = 1e10
        if err <= 1.0:
            steps += 1
            t_new = target if abs(target - (t + h)) <= 1e-14 * max(1.0, target) else t + h
            v[idx] = new_v
            integ[idx] = new_i
            f_v_new = np.array(f_v)
            f_i_new = np.array(f_i)
            f_v_new[idx] = kv[6]
            f_i_new[idx] = ki[6]
            f_v, f_i = f_v_new, f_i_new
            t = t_new
            huge = np.abs(v[idx]) > 1e12
            if huge.any():
                dead = idx[huge]
                blew[dead] = t
                alive[dead] = False
                v[dead] = np.nan
                integ[dead] = np.nan
            hit = t >= target
            if hit:
                si += 1
            if dense or hit:
                times.append(t)
                v_out.append(v.copy())
                i_out.append(integ.copy())
            fac = 0.9 * err ** (-0.7 / 5) * err_prev ** (0.4 / 5) if err > 0 else 5.0
            h = h * min(5.0, max(0.2, fac))
            err_prev = max(err, 1e-4)
        else:
            h = h * max(0.2, 0.9 * err ** (-1 / 5))
            if h < h_floor:
                ratio = np.maximum(np.max(np.abs(ev) / sc_v, axis=0) if ev.ndim > 1 else np.abs(ev) / sc_v, np.abs(ei) / sc_i)
                dead = idx[~(ratio <= 1.0)]
                blew[dead] = t
                alive[dead] = False
                v[dead] = np.nan
                integ[dead] = np.nan
                h = max(h_floor, 1e-6 * horizon)
    # pad remaining stops after every element died
    while si < len(stops):
        if times[-1] < stops[si]:
            times.append(float(stops[si]))
            v_out.append(np.full(n, np.nan, dtype=dtype))
            i_out.append(np.full(n, np.nan, dtype=dtype))
        si += 1
    return np.array(times), np.array(v_out), np.array(i_out), blew


def solve_batch(
    mech: MechanismParams,
    p,
    q: float,
    horizon: float,
    rel_tol: float = 1e-10,
    stops=(),
    dense: bool = True,
    max_step: float | None = None,
    abs_tol: float = 1e-13,
) -> RiccatiSolution:
    """Solve for a 1-d batch of initial values sharing one step sequence.

    With ``dense=False`` only the ``stops`` and the horizon are stored; every
    stop is hit exactly by the step sequence.
    """
    if not 1e-14 < rel_tol < 1e-4:
        raise ValueError("rel_tol must lie in (1e-14, 1e-4)")
    if q < 0:
        raise ValueError("q must be non-negative")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    p = np.atleast_1d(np.asarray(p))
    if not np.iscomplexobj(p):
        p = p.astype(float)
    if mech.has_jumps and np.any(np.real(p) < mech.lower_bound):
        raise DomainError("Re(p) below the domain bound")
    grid, v, integ, blew = _integrate(
        mech, p, float(q), float(horizon), rel_tol, abs_tol, stops, dense, max_step or math.inf
    )
    return RiccatiSolution(grid, v, integ, blew, float(q), mech)


def solve(request: RiccatiRequest, rel_tol: float = 1e-10, max_step: float | None = None) -> RiccatiSolution:
    """Solve a single Riccati request; arrays in the result are one-dimensional."""
    sol = solve_batch(request.mechanism, [request.p], request.q, request.horizon, rel_tol, max_step=max_step)
    return RiccatiSolution(sol.grid, sol.v[:, 0], sol.integral[:, 0], float(sol.blew_up[0]), sol.q, sol.mechanism)


def affine_transform(mech: MechanismParams, x0, p_vec, q: float, t: float, rel_tol: float = 1e-10):
    """E[exp(-sum_j p_j X^j_t - q int_0^t sum_j X^j ds)] for independent factors X^j."""
    x0 = np.asarray(x0, dtype=float)
    p_vec = np.asarray(p_vec)
    if x0.shape != (mech.m,) or p_vec.shape != (mech.m,):
        raise ValueError("x0 and p_vec need one entry per factor")
    if t == 0:
        return np.exp(-np.sum(p_vec * x0))
    expo = 0.0
    for j in range(mech.m):
        sol = solve(RiccatiRequest(mech, p_vec[j], q, t), rel_tol)
        if sol.exploded:
            raise RiccatiError(f"factor {j} explodes at t={sol.blew_up!r} before {t!r}")
        expo = expo + x0[j] * sol.v[-1] + mech.dbeta[j] * sol.integral[-1]
    return np.exp(-expo)
