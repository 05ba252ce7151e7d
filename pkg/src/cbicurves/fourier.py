"""Caplet pricing through the modified characteristic function of the log spread-to-bond ratio.

For tenor index i and expiry T let X = ln(S(T,T) / B(T,T+delta)).  The
modified characteristic function

    Phi(zeta) = E[exp(-int_t^T r ds) B(T,T+delta) exp(i zeta X)]

is exponential-affine in the factor state and needs one complex Riccati
solve per factor and frequency.  A caplet on L(T,T,delta) with strike K is a
call on exp(X) with strike 1 + delta K, priced with a damped Fourier
integral plus a residue term that depends on the damping.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .model import MultiCurveModel
from .riccati import RiccatiError, solve_batch

__all__ = [
    "StripError",
    "FFTGridError",
    "CharFunContext",
    "modified_cf",
    "modified_cf_multi",
    "default_damping",
    "residue",
    "caplet_price_fourier",
    "caplet_strip_fft",
    "caplet_strip_fft_multi",
    "fft_grid_for",
    "quadrature_weights",
    "integrate_adaptive",
    "truncation_point",
]

CHUNK = 4096

# 15-point Kronrod rule with embedded 7-point Gauss rule on [-1, 1]
_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0,
])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327,
])
GK_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
GK_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
G_WEIGHTS = np.zeros(15)
G_WEIGHTS[[1, 3, 5, 7, 9, 11, 13]] = np.concatenate([_WG[:-1], _WG[::-1]])


class StripError(ValueError):
    """Damping outside the strip where the characteristic function is finite."""


class FFTGridError(ValueError):
    """FFT frequency range too short for the decay of the integrand."""


@dataclass(eq=False)
class CharFunContext:
    """Everything Phi needs for one (tenor, valuation time, expiry, state)."""

    model: MultiCurveModel
    i: int
    t: float
    T: float
    x: np.ndarray | None = None
    threads: int = 1
    delta: float = field(init=False)
    tau: float = field(init=False)
    B0d: np.ndarray = field(init=False)
    gamma: np.ndarray = field(init=False)
    A0d: float = field(init=False)
    ci: float = field(init=False)
    dLambda: float = field(init=False)

    def __post_init__(self):
        model = self.model
        if not 0 <= self.i < model.m:
            raise IndexError(f"tenor index {self.i} out of range")
        self.t, self.T = float(self.t), float(self.T)
        if not 0 <= self.t <= self.T:
            raise ValueError("need 0 <= t <= T")
        self.x = model.x0.copy() if self.x is None else np.asarray(self.x, dtype=float)
        self.delta = float(model.tenors[self.i])
        self.tau = self.T - self.t
        self.B0d = model.B0(self.delta)
        self.gamma = (np.arange(model.m) <= self.i).astype(float)
        self.A0d = float(model.A0(self.T, self.T + self.delta))
        self.ci = float(model.c(self.i, self.T))
        self.dLambda = float(model.Lambda(self.T) - model.Lambda(self.t))

    @property
    def mechanism(self):
        return self.model.mechanism

    @property
    def strip_upper(self) -> float:
        """Supremum of admissible -Im(zeta): every factor start stays in the domain."""
        th = self.mechanism.theta_eff
        v = -self.B0d[self.gamma > 0]
        return float(np.min((th + v) / (1.0 + v)))

    def admissible(self, eps: float) -> bool:
        return 1.0 + eps < self.strip_upper

    def riccati_start(self, zeta):
        zeta = np.asarray(zeta, dtype=complex)
        iz = 1j * zeta
        return (iz[..., None] - 1.0) * self.B0d - iz[..., None] * self.gamma

    def bond_T_plus_delta(self) -> float:
        return self.model.bond_price(self.t, self.T + self.delta, self.x)

    def forward_value(self) -> float:
        """Phi(-i) = B(t,T) S(t,T)."""
        return self.model.bond_price(self.t, self.T, self.x) * self.model.fwd_mult_spread(self.i, self.t, self.T, self.x)


def _solve_factor(mech, p, q, horizons, rel_tol, threads):
    """v and I at each horizon for a 1-d batch of starts, solved in fixed-size chunks."""
    n = p.size
    chunks = [slice(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]
    horizons = np.asarray(horizons, dtype=float)

    def run(sl):
        sol = solve_batch(mech, p[sl], q, float(horizons.max()), rel_tol, stops=horizons, dense=False)
        if sol.exploded:
            raise RiccatiError("complex Riccati solution left the domain before expiry")
        rows = np.searchsorted(sol.grid, horizons)
        return sol.v[rows], sol.integral[rows]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    v = np.concatenate([a for a, _ in parts], axis=1)
    integ = np.concatenate([b for _, b in parts], axis=1)
    return v, integ


def modified_cf_multi(model: MultiCurveModel, i: int, t: float, maturities, zeta, x=None, rel_tol=1e-10, threads=1):
    """Phi for several expiries of one tenor; shape (len(maturities), len(zeta)).

    One batched Riccati solve per factor serves all expiries because the
    Riccati starts depend on the tenor only.
    """
    maturities = np.atleast_1d(np.asarray(maturities, dtype=float))
    ctxs = [CharFunContext(model, i, t, T, x) for T in maturities]
    ref = ctxs[0]
    zeta = np.atleast_1d(np.asarray(zeta, dtype=complex))
    mech = model.mechanism
    y = -np.imag(zeta)
    if np.any(y >= ref.strip_upper):
        raise StripError(f"-Im(zeta) must stay below {ref.strip_upper!r}")
    p = ref.riccati_start(zeta)
    if np.any(np.real(p) < mech.lower_bound):
        raise StripError("Riccati start outside the domain")
    iz = 1j * zeta
    expo = np.empty((maturities.size, zeta.size), dtype=complex)
    for k, c in enumerate(ctxs):
        expo[k] = -c.dLambda + (1.0 - iz) * c.A0d + iz * c.ci
    taus = maturities - float(t)
    for j in range(model.m):
        w_int, w_x = model.dbeta[j], ref.x[j]
        if w_int == 0.0 and w_x == 0.0:
            continue
        pos = taus > 0
        if np.any(pos):
            v, integ = _solve_factor(mech, p[:, j], float(model.lam[j]), taus[pos], rel_tol, threads)
            expo[pos] -= w_int * integ + w_x * v
        if np.any(~pos):
            expo[~pos] -= w_x * p[:, j]
    return np.exp(expo)


def modified_cf(ctx: CharFunContext, zeta, rel_tol: float = 1e-10):
    """Phi(zeta) for scalar or 1-d complex ``zeta``."""
    scalar = np.ndim(zeta) == 0
    out = modified_cf_multi(ctx.model, ctx.i, ctx.t, [ctx.T], zeta, ctx.x, rel_tol, ctx.threads)[0]
    return complex(out[0]) if scalar else out


def default_damping(ctx: CharFunContext) -> float:
    """0.5 when admissible, otherwise half of the admissible positive headroom."""
    head = ctx.strip_upper - 1.0
    return 0.5 if 0.5 < head else 0.5 * head


def residue(eps: float, K_bar, phi_0: float, phi_mi: float):
    """Residue correction for damping ``eps`` (poles of the kernel at zeta = 0 and zeta = i)."""
    K_bar = np.asarray(K_bar, dtype=float)
    if eps < -1:
        return phi_mi - K_bar * phi_0
    if eps == -1:
        return phi_mi - 0.5 * K_bar * phi_0
    if eps < 0:
        return np.full_like(K_bar, phi_mi)
    if eps == 0:
        return np.full_like(K_bar, 0.5 * phi_mi)
    return np.zeros_like(K_bar)


# ------------------------------------------------------------ quadrature


def truncation_point(envelope, rel: float = 1e-14, u_start: float = 1.0, u_cap: float = 1e6) -> float:
    """First doubling point where ``envelope(u)`` drops below ``rel`` times its running peak."""
    us = u_start * 2.0 ** np.arange(0, 64)
    us = us[us <= u_cap]
    peak = 0.0
    for k in range(0, us.size, 4):
        block = us[k:k + 4]
        env = envelope(block)
        for u, e in zip(block, env):
            peak = max(peak, e)
            if e < rel * peak:
                return float(u)
    return float(u_cap)


def integrate_adaptive(fvals, upper: float, breaks=None, abs_tol: float = 1e-12, max_rounds: int = 40):
    """Integrate a vector-valued function on [0, upper] with adaptive Gauss-Kronrod panels.

    ``fvals(u)`` maps a 1-d node array to values of shape (len(u), k).  Panels
    are split until each panel's Kronrod-minus-Gauss error is below its share
    of ``abs_tol``.  Returns (integral, number of nodes used).
    """
    if breaks is None:
        breaks = np.linspace(0.0, upper, 65)
    breaks = np.unique(np.clip(np.asarray(breaks, dtype=float), 0.0, upper))
    todo = np.stack([breaks[:-1], breaks[1:]], axis=1)
    total = None
    done_err = 0.0
    nodes = 0
    for _ in range(max_rounds):
        if todo.size == 0:
            break
        a, b = todo[:, 0], todo[:, 1]
        half = 0.5 * (b - a)
        u = (0.5 * (a + b)[:, None] + half[:, None] * GK_NODES[None, :]).ravel()
        vals = np.asarray(fvals(u)).reshape(a.size, 15, -1)
        nodes += u.size
        k = np.einsum("pnk,n->pk", vals, GK_WEIGHTS) * half[:, None]
        g = np.einsum("pnk,n->pk", vals, G_WEIGHTS) * half[:, None]
        err = np.max(np.abs(k - g), axis=1)
        noise = 50 * np.finfo(float).eps * np.max(np.einsum("pnk,n->pk", np.abs(vals), GK_WEIGHTS), axis=1) * half
        allow = np.maximum(abs_tol * (b - a) / upper, noise)
        if done_err + err.sum() <= abs_tol:
            ok = np.ones(a.size, dtype=bool)
        else:
            ok = err <= allow
        done_err += err[ok].sum()
        part = k[ok].sum(axis=0)
        total = part if total is None else total + part
        bad = todo[~ok]
        m = 0.5 * (bad[:, 0] + bad[:, 1])
        todo = np.concatenate([np.stack([bad[:, 0], m], 1), np.stack([m, bad[:, 1]], 1)]) if bad.size else bad
    if todo.size:
        a, b = todo[:, 0], todo[:, 1]
        half = 0.5 * (b - a)
        u = (0.5 * (a + b)[:, None] + half[:, None] * GK_NODES[None, :]).ravel()
        vals = np.asarray(fvals(u)).reshape(a.size, 15, -1)
        total = total + (np.einsum("pnk,n->pk", vals, GK_WEIGHTS) * half[:, None]).sum(axis=0)
    return total, nodes


def _log_strike(ctx, K):
    K = np.atleast_1d(np.asarray(K, dtype=float))
    K_bar = 1.0 + ctx.delta * K
    if np.any(K_bar <= 0):
        raise ValueError("1 + delta K must be positive")
    return K_bar, np.log(K_bar)


def caplet_price_fourier(ctx: CharFunContext, K, epsilon: float | None = None, abs_tol: float = 1e-12,
                         rel_tol: float = 1e-10):
    """Caplet price (payoff delta (L - K)^+ at T + delta, unit notional) by direct quadrature."""
    scalar = np.ndim(K) == 0
    K_bar, k = _log_strike(ctx, K)
    eps = default_damping(ctx) if epsilon is None else float(epsilon)
    if not ctx.admissible(eps):
        raise StripError(f"damping {eps!r} outside the admissible strip (1 + eps < {ctx.strip_upper!r})")
    phi_0 = ctx.bond_T_plus_delta()
    phi_mi = ctx.forward_value()

    def kernel(u):
        zeta = u - 1j * eps
        ph = modified_cf(ctx, zeta - 1j, rel_tol)
        return ph / (-zeta * (zeta - 1j))

    def envelope(u):
        return np.abs(kernel(u))

    upper = truncation_point(envelope)

    def fvals(u):
        zeta = u - 1j * eps
        ker = kernel(u)
        return np.real(np.exp(-1j * zeta[:, None] * k[None, :]) * ker[:, None])

    breaks = np.unique(np.concatenate([np.linspace(0, upper, 65), np.minimum(2.0 ** np.arange(-6, 8), upper)]))
    integral, _ = integrate_adaptive(fvals, upper, breaks, abs_tol=abs_tol * math.pi)
    price = residue(eps, K_bar, phi_0, phi_mi) + integral / math.pi
    return float(price[0]) if scalar else price


# ------------------------------------------------------------ FFT strip


def quadrature_weights(n: int, du: float, rule: str = "trapezoid") -> np.ndarray:
    """Frequency weights: trapezoid (half weight at u = 0) or Simpson."""
    if rule == "trapezoid":
        w = np.ones(n)
        w[0] = 0.5
        return w * du
    if rule == "simpson":
        w = np.where(np.arange(n) % 2 == 0, 2.0, 4.0)
        w[0] = 1.0
        return w * du / 3.0
    raise ValueError(f"unknown quadrature rule {rule!r}")


def fft_grid_for(model: MultiCurveModel, i: int, maturities, tail_tol: float = 1e-9, mesh: float = 0.25,
                 eps: float = -2.0, rel_tol: float = 1e-10, t: float = 0.0, x=None) -> tuple[int, float]:
    """(n, mesh) whose frequency range covers the integrand decay of the shortest expiry.

    The mesh bounds aliasing, which decays like exp((1 + eps) 2 pi / mesh);
    n is the smallest power of two reaching the truncation point.
    """
    T = float(np.min(maturities))
    ctx = CharFunContext(model, i, t, T, x)

    def envelope(u):
        zeta = u - 1j * eps
        return np.abs(modified_cf(ctx, zeta - 1j, rel_tol)) / np.abs(zeta * (zeta - 1j)) * u

    u_max = truncation_point(envelope, rel=tail_tol / max(float(envelope(np.array([1.0]))[0]), 1e-300))
    n = max(4096, 1 << int(math.ceil(math.log2(u_max / mesh))))
    return n, mesh


def caplet_strip_fft_multi(model: MultiCurveModel, i: int, maturities, strikes, n: int = 32768,
                           mesh: float = 0.05, eps: float = -2.0, t: float = 0.0, x=None,
                           tail_tol: float = 1e-7, rel_tol: float = 1e-10, threads: int = 1,
                           rule: str = "trapezoid"):
    """FFT caplet prices for every (expiry, strike) of one tenor; shape (len(maturities), len(strikes)).

    Prices come from one FFT per expiry on a log-strike grid centred on the
    requested strikes, followed by cubic interpolation in log-strike.  The
    default damping eps = -2 uses the residue branch eps < -1, where the
    damped remainder vanishes below the support of X and decays above it,
    so aliasing stays small whatever the width of the strip.  The integrand
    is Hermitian in u, which makes the trapezoid rule spectrally accurate;
    Simpson weights are available through ``rule``.
    """
    maturities = np.atleast_1d(np.asarray(maturities, dtype=float))
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    if n < 4 or n & (n - 1):
        raise ValueError("n must be a power of two")
    ctxs = [CharFunContext(model, i, t, T, x) for T in maturities]
    delta = ctxs[0].delta
    K_bar = 1.0 + delta * strikes
    if np.any(K_bar <= 0):
        raise ValueError("1 + delta K must be positive")
    ks = np.log(K_bar)
    if not ctxs[0].admissible(eps):
        raise StripError(f"damping {eps!r} outside the admissible strip")
    du = mesh
    dk = 2.0 * math.pi / (n * du)
    u = np.arange(n) * du
    zeta = u - 1j * eps
    phi = modified_cf_multi(model, i, t, maturities, zeta - 1j, x, rel_tol, threads)
    kernel = phi / (-zeta * (zeta - 1j))
    tail = np.abs(kernel[:, -1]) * u[-1] * np.exp(-eps * ks.max()) / math.pi
    if np.any(tail > tail_tol):
        raise FFTGridError(
            f"FFT range n*mesh = {u[-1] + du:.6g} too short: tail mass estimate {tail.max():.3g} exceeds {tail_tol:.1g}"
        )
    k_centre = 0.5 * (ks.min() + ks.max())
    k_start = k_centre - 0.5 * n * dk
    k_grid = k_start + dk * np.arange(n)
    w = quadrature_weights(n, du, rule)
    out = np.empty((maturities.size, strikes.size))
    lo = max(0, int(np.floor((ks.min() - k_start) / dk)) - 8)
    hi = min(n, int(np.ceil((ks.max() - k_start) / dk)) + 9)
    for r, c in enumerate(ctxs):
        seq = np.exp(-1j * u * k_start) * kernel[r] * w
        integral = np.real(np.fft.fft(seq))[lo:hi] / math.pi
        kk = k_grid[lo:hi]
        prices = residue(eps, np.exp(kk), c.bond_T_plus_delta(), c.forward_value()) + np.exp(-eps * kk) * integral
        out[r] = CubicSpline(kk, prices)(ks)
    return out


def caplet_strip_fft(ctx: CharFunContext, strikes, n: int = 32768, mesh: float = 0.05, eps: float = -2.0,
                     tail_tol: float = 1e-7, rel_tol: float = 1e-10, rule: str = "trapezoid"):
    """FFT caplet prices for one expiry."""
    return caplet_strip_fft_multi(ctx.model, ctx.i, [ctx.T], strikes, n, mesh, eps, ctx.t, ctx.x,
                                  tail_tol, rel_tol, ctx.threads, rule)[0]
