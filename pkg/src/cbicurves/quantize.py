"""Voronoi quantization of Z = exp(X) under the (T + delta)-forward measure.

The law of Z is only known through its characteristic function
Psi(u) = E[exp(i u X)] = Phi(u) / B(t, T + delta).  The stationarity
equations of the L^p distortion, the CDF and the density are all written as
Fourier integrals of Psi against incomplete Beta functions, so one set of
Psi values on fixed frequency nodes serves the whole Newton iteration.

Cell integrals of (x_j - z)^(q-1) and (z - x_j)^(q-1) against the density
reduce after the substitutions z = x_j t and z = x_j / t to

    int_{x_j^-}^{x_j} (x_j - z)^(q-1) f(z) dz
        = x_j^(q-1) / pi int_0^inf Re[Psi(u) x_j^(-iu) Bbar(x_j^-/x_j, -iu, q)] du,
    int_{x_j}^{x_j^+} (z - x_j)^(q-1) f(z) dz
        = x_j^(q-1) / pi int_0^inf Re[Psi(u) x_j^(-iu) Bbar(x_j/x_j^+, 1-q+iu, q)] du.

For the two unbounded end cells the lower incomplete Beta becomes a complete
one with a divergent first argument, so those integrals run on horizontal
lines u + i k1 (k1 > 0, negative moments of Z) and u - i k2 with
q - 1 < k2 < strip, where the complete Beta function is finite.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import loggamma, roots_jacobi, roots_legendre

from .fourier import CharFunContext, modified_cf_multi

__all__ = [
    "QuantizationError",
    "QuantGrid",
    "ForwardLaw",
    "incomplete_beta_upper",
    "complete_beta",
    "forward_cdf",
    "forward_density",
    "build_grid",
    "caplet_price_quant",
    "write_grid_csv",
]

log = logging.getLogger(__name__)

U_PANEL_NODES = 16
TAIL_REL = 1e-16
PANEL_PHASE = 8.0  # radians of net oscillation per 16-node panel
MAX_PANELS = 1 << 12
MAX_GRID_PANELS = 1 << 10
U_CHUNK = 2048


class QuantizationError(RuntimeError):
    """Newton iteration failed or the grid degenerated."""


def complete_beta(a, b):
    a = np.asarray(a, dtype=complex)
    return np.exp(loggamma(a) + loggamma(b) - loggamma(a + b))


def incomplete_beta_upper(x, a, b: float, order: int = 64):
    """Bbar(x, a, b) = int_x^1 t^(a-1) (1 - t)^(b-1) dt for complex ``a`` and real b >= 1.

    Gauss-Jacobi on t = x + (1 - x) s with weight (1 - s)^(b-1), so the
    endpoint factor is integrated exactly.  ``x`` has shape (k,), ``a``
    shape (n,); the result has shape (n, k).  ``1 - x`` may be passed as the
    keyword-free tuple (x, one_minus_x) to keep precision when x is near 1.
    """
    if isinstance(x, tuple):
        x, omx = (np.asarray(v, dtype=float) for v in x)
    else:
        x = np.asarray(x, dtype=float)
        omx = 1.0 - x
    a = np.asarray(a, dtype=complex)
    y, w = roots_jacobi(order, b - 1.0, 0.0)
    s = 0.5 * (1.0 + y)
    log_t = np.log1p(-omx[:, None] * (1.0 - s[None, :]))  # (k, order)
    vals = np.exp((a[:, None, None] - 1.0) * log_t[None, :, :]) @ w
    return vals * (omx ** b * 2.0 ** (-b))[None, :]


def _gauss_panels(upper: float, panels: int):
    """Gauss-Legendre nodes on [0, upper]: ``panels`` uniform panels refined geometrically towards 0.

    The geometric breaks resolve the kernels 1/(k - iu) of the shifted
    contours, whose poles sit a distance k < 2 from the real axis.
    """
    x, w = roots_legendre(U_PANEL_NODES)
    geo = 0.01 * 2.0 ** np.arange(0, 64)
    breaks = np.unique(np.concatenate([np.linspace(0.0, upper, panels + 1), geo[geo < upper]]))
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    u = ((a + half)[:, None] + half[:, None] * x[None, :]).ravel()
    wu = (half[:, None] * w[None, :]).ravel()
    return u, wu


class ForwardLaw:
    """Psi on a cached frequency grid plus the Fourier integrals built from it.

    ``panels`` uniform Gauss-Legendre panels cover [0, upper], where upper is
    the point beyond which |Psi| < TAIL_REL.  Values on shifted contours are
    computed lazily and cached by shift.
    """

    def __init__(self, ctx: CharFunContext, panels: int | None = None, rel_tol: float = 1e-10,
                 beta_order: int = 64):
        self.ctx = ctx
        self.rel_tol = rel_tol
        self.beta_order = beta_order
        self.bond = ctx.bond_T_plus_delta()
        self.mean = ctx.forward_value() / self.bond
        self.strip = ctx.strip_upper
        self.degenerate = self._is_degenerate()
        self.sd_log = 0.0 if self.degenerate else self._log_sd()
        self.upper = 0.0 if self.degenerate else self._truncation()
        self._cache: dict[float, np.ndarray] = {}
        if panels is None:
            panels = self.panels_for(12.0 * self.sd_log)
        self.set_panels(panels)

    # -- setup
    def _is_degenerate(self) -> bool:
        mech = self.ctx.mechanism
        if mech.sigma == 0.0 and mech.eta == 0.0:
            return True
        return bool(np.all(self.ctx.x == 0.0) and np.all(self.ctx.model.dbeta == 0.0))

    def psi(self, zeta):
        zeta = np.atleast_1d(np.asarray(zeta, dtype=complex))
        c = self.ctx
        return modified_cf_multi(c.model, c.i, c.t, [c.T], zeta, c.x, self.rel_tol, c.threads)[0] / self.bond

    def _log_sd(self) -> float:
        h = 1.0
        for _ in range(4):
            r = -2.0 * np.log(np.abs(self.psi([h])[0])) / h ** 2
            s = math.sqrt(max(r, 1e-300))
            h_new = 0.1 / s
            if abs(h_new / h - 1.0) < 0.5:
                break
            h = h_new
        return s

    def _truncation(self) -> float:
        u = 1.0 / self.sd_log
        while u < 1e8:
            if np.abs(self.psi([u])[0]) < TAIL_REL:
                return u
            u *= 1.5
        raise QuantizationError("characteristic function does not decay")

    def panels_for(self, width: float) -> int:
        """Power-of-two panel count resolving log-distances up to ``width`` from the mean."""
        need = width * self.upper / PANEL_PHASE
        return max(64, 1 << max(0, math.ceil(math.log2(max(need, 1.0)))))

    def ensure_width(self, width: float):
        if not self.degenerate and width > self.phase_width:
            panels = self.panels_for(width)
            if panels > MAX_GRID_PANELS:
                raise QuantizationError(
                    f"grid spans {width:.3g} in log-distance from the mean, beyond the resolvable range "
                    f"{PANEL_PHASE * MAX_GRID_PANELS / self.upper:.3g}; the top point escapes, which happens "
                    f"when the upper tail is too heavy for the chosen p_norm"
                )
            self.set_panels(panels)

    def set_panels(self, panels: int):
        self.panels = int(panels)
        self._cache.clear()
        if self.degenerate:
            self.u = np.zeros(0)
            self.wu = np.zeros(0)
        else:
            self.u, self.wu = _gauss_panels(self.upper, self.panels)

    def contour(self, shift: float) -> np.ndarray:
        """Psi(u + i shift) on the cached nodes."""
        key = float(shift)
        if key not in self._cache:
            self._cache[key] = self.psi(self.u + 1j * key)
        return self._cache[key]

    @property
    def lower_shift(self) -> float:
        return 1.0

    def upper_shift(self, q: float) -> float:
        """Shift k2 in (q - 1, strip) for the unbounded upper cell."""
        if q - 1.0 >= self.strip:
            return math.nan
        return 0.5 * (q - 1.0 + self.strip)

    @property
    def std(self) -> float:
        """Approximate standard deviation of Z from the curvature of log Psi at 0."""
        return self.mean * self.sd_log

    # -- distribution functions
    def cdf(self, x):
        """Q(Z <= x) by Gil-Pelaez inversion, clamped to [0, 1] and made monotone along the input order."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x <= 0):
            raise ValueError("x must be positive")
        if self.degenerate:
            return (x >= self.mean * (1 - 1e-14)).astype(float)
        out = np.empty_like(x)
        k = np.log(x)
        near = np.abs(k - math.log(self.mean)) <= self.phase_width
        if np.any(near):
            psi = self.contour(0.0)
            kern = psi[:, None] * np.exp(-1j * self.u[:, None] * k[None, near]) / (1j * self.u[:, None])
            out[near] = 0.5 - (self.wu @ np.real(kern)) / math.pi
        for idx in np.flatnonzero(~near):
            out[idx] = self._cdf_far(x[idx])
        out = np.clip(out, 0.0, 1.0)
        order = np.argsort(x, kind="stable")
        out[order] = np.maximum.accumulate(out[order])
        return out

    @property
    def phase_width(self) -> float:
        """Log-distance from the mean that the cached nodes resolve."""
        return PANEL_PHASE * self.panels / self.upper if self.upper > 0 else math.inf

    def _cdf_far(self, x: float) -> float:
        lk = math.log(x)
        if lk > math.log(self.mean):
            k2 = 0.98 * self.strip
            bound = float(np.real(self.psi([-1j * k2])[0])) * math.exp(-k2 * lk)
            if bound < 1e-13:
                return 1.0
        else:
            k1 = 10.0
            bound = float(np.real(self.psi([1j * k1])[0])) * math.exp(k1 * lk)
            if bound < 1e-13:
                return 0.0

        panels = self.panels_for(abs(lk - math.log(self.mean)))
        if panels > MAX_PANELS:
            raise QuantizationError(f"CDF at x = {x!r} needs {panels} frequency panels")
        u, wu = _gauss_panels(self.upper, panels)
        val = wu @ np.real(self.psi(u) * np.exp(-1j * u * lk) / (1j * u))
        return 0.5 - float(val) / math.pi

    def quantile(self, probs, tol: float = 1e-12):
        """Inverse CDF by vectorised bisection inside mean +- phase_width."""
        probs = np.asarray(probs, dtype=float)
        if self.degenerate:
            return np.full(probs.shape, self.mean)
        lm = math.log(self.mean)
        lo = np.full(probs.shape, lm - 0.9 * self.phase_width)
        hi = np.full(probs.shape, lm + 0.9 * self.phase_width)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.cdf(np.exp(mid)) < probs
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) < tol:
                break
        return np.exp(0.5 * (lo + hi))

    def density(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        psi = self.contour(0.0)
        kern = psi[:, None] * np.exp(-1j * self.u[:, None] * np.log(x)[None, :])
        return (self.wu @ np.real(kern)) / (math.pi * x)

    # -- cell integrals
    def cell_integrals(self, points, q: float):
        """(lower_j, upper_j): integrals of (x_j - z)^(q-1) and (z - x_j)^(q-1) over the two halves of cell j."""
        x = np.asarray(points, dtype=float)
        n = x.size
        spread = np.max(np.abs(np.log(x) - math.log(self.mean)))
        if n > 1:
            spread += 0.5 * float(np.max(np.log(x[1:] / x[:-1])))
        self.ensure_width(spread)
        u, wu = self.u, self.wu
        lx = np.log(x)
        psi = self.contour(0.0)
        lower = np.zeros(n)
        upper = np.zeros(n)
        if n > 1:
            gap = np.diff(x)
            om_lo = 0.5 * gap / x[1:]  # 1 - x_j^- / x_j for cells 1..n-1
            om_hi = gap / (x[:-1] + x[1:])  # 1 - x_j / x_j^+ for cells 0..n-2
            for s in range(0, u.size, U_CHUNK):
                sl = slice(s, s + U_CHUNK)
                rot = psi[sl, None] * np.exp(-1j * u[sl, None] * lx[None, :])
                bb = incomplete_beta_upper((1.0 - om_lo, om_lo), -1j * u[sl], q, self.beta_order)
                lower[1:] += wu[sl] @ np.real(rot[:, 1:] * bb)
                bb = incomplete_beta_upper((1.0 - om_hi, om_hi), 1.0 - q + 1j * u[sl], q, self.beta_order)
                upper[:-1] += wu[sl] @ np.real(rot[:, :-1] * bb)
        k1 = self.lower_shift
        ps = self.contour(k1)
        a = k1 - 1j * u
        lower[0] = wu @ np.real(ps * np.exp(a * lx[0]) * complete_beta(a, q))
        k2 = self.upper_shift(q)
        if math.isnan(k2):
            upper[-1] = math.inf
        else:
            ps = self.contour(-k2)
            a = 1.0 - q + k2 + 1j * u
            upper[-1] = wu @ np.real(ps * np.exp((-k2 - 1j * u) * lx[-1]) * complete_beta(a, q))
        scale = x ** (q - 1.0) / math.pi
        return lower * scale, upper * scale

    def gradient(self, points, p: float):
        """Gradient of the distortion E[min_j |Z - x_j|^p] with respect to the points."""
        if self.degenerate:
            return _degenerate_gradient(np.asarray(points, dtype=float), self.mean, p)
        lo, up = self.cell_integrals(points, p)
        return p * (lo - up)

    def distortion(self, points, p: float) -> float:
        """E[min_j |Z - x_j|^p]^(1/p); infinite when the p-th moment of Z is."""
        if self.degenerate:
            return float(np.min(np.abs(np.asarray(points) - self.mean)))
        lo, up = self.cell_integrals(points, p + 1.0)
        tot = float(np.sum(lo + up))
        return math.inf if not math.isfinite(tot) else max(tot, 0.0) ** (1.0 / p)


def _degenerate_gradient(x, atom, p):
    g = np.zeros_like(x)
    j = int(np.argmin(np.abs(x - atom)))
    d = x[j] - atom
    g[j] = p * np.sign(d) * abs(d) ** (p - 1.0) if d != 0 else 0.0
    return g


def forward_cdf(ctx: CharFunContext, x, law: ForwardLaw | None = None):
    """Q^{T+delta}(exp(X) <= x)."""
    law = ForwardLaw(ctx) if law is None else law
    scalar = np.ndim(x) == 0
    out = law.cdf(x)
    return float(out[0]) if scalar else out


def forward_density(ctx: CharFunContext, x, law: ForwardLaw | None = None):
    law = ForwardLaw(ctx) if law is None else law
    scalar = np.ndim(x) == 0
    out = law.density(x)
    return float(out[0]) if scalar else out


@dataclass
class QuantGrid:
    """Stationary quantization grid for exp(X) with its Voronoi edges and companion weights."""

    points: np.ndarray
    weights: np.ndarray
    p_norm: float
    residual: float
    iterations: int
    mid_minus: np.ndarray = field(init=False)
    mid_plus: np.ndarray = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        mids = 0.5 * (self.points[1:] + self.points[:-1])
        self.mid_minus = np.concatenate([[0.0], mids])
        self.mid_plus = np.concatenate([mids, [math.inf]])
        if np.any(np.diff(self.points) <= 0) or np.any(self.points <= 0):
            raise QuantizationError("grid points must be positive and strictly increasing")

    @property
    def size(self) -> int:
        return self.points.size

    def mean(self) -> float:
        return float(self.points @ self.weights)


def _companion_weights(law: ForwardLaw, x):
    if x.size == 1:
        return np.ones(1)
    F = law.cdf(0.5 * (x[1:] + x[:-1]))
    F = np.concatenate([[0.0], F, [1.0]])
    return np.diff(F)


def _tridiag_hessian(law, x, p, h_rel):
    """Banded (1, 1) Hessian from central differences of the gradient, three colours of columns."""
    n = x.size
    ab = np.zeros((3, n))
    h = h_rel * x
    for c in range(min(3, n)):
        idx = np.arange(c, n, 3)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h[idx]
        xm[idx] -= h[idx]
        diff = law.gradient(xp, p) - law.gradient(xm, p)
        for j in idx:
            ab[1, j] = diff[j] / (2.0 * h[j])
            if j > 0:
                ab[0, j] = diff[j - 1] / (2.0 * h[j])
            if j < n - 1:
                ab[2, j] = diff[j + 1] / (2.0 * h[j])
    return ab


def _initial_grid(law: ForwardLaw, n: int):
    """Regular grid around the mean between the 1/(2n) and 1 - 1/(2n) quantiles."""
    if n == 1:
        return np.array([law.mean])
    lo, hi = law.quantile(np.array([0.5 / n, 1.0 - 0.5 / n]))
    return np.linspace(lo, hi, n)


def _lloyd_sweep(law, x, p):
    """Diagonal Newton sweep; for p = 2 this maps each point to its cell mean."""
    g = law.gradient(x, p)
    w = _companion_weights(law, x)
    denom = p * (p - 1.0) * np.maximum(w, 1e-300) if p > 1 else np.maximum(w, 1e-300)
    step = g / denom
    lo = np.concatenate([[0.0], 0.5 * (x[1:] + x[:-1])])
    hi = np.concatenate([0.5 * (x[1:] + x[:-1]), [np.inf]])
    return np.clip(x - step, lo + 0.25 * (x - lo), x + 0.75 * (np.minimum(hi, 2 * x) - x))


def _newton(law, x, p, tol, max_iter, h_rel):
    g = law.gradient(x, p)
    gn = np.max(np.abs(g))
    it = 0
    while gn > tol and it < max_iter:
        it += 1
        moved = False
        if x.size > 1:
            ab = _tridiag_hessian(law, x, p, h_rel)
            try:
                d = solve_banded((1, 1), ab, g)
            except (np.linalg.LinAlgError, ValueError):
                d = None
        else:
            hh = h_rel * x[0]
            d = g / ((law.gradient(x + hh, p) - law.gradient(x - hh, p)) / (2 * hh))
        if d is not None and np.all(np.isfinite(d)):
            lam = 1.0
            for _ in range(30):
                xn = x - lam * d
                if xn[0] > 0 and np.all(np.diff(xn) > 0):
                    gn_new = law.gradient(xn, p)
                    if np.max(np.abs(gn_new)) < gn:
                        x, g, gn = xn, gn_new, float(np.max(np.abs(gn_new)))
                        moved = True
                        break
                lam *= 0.5
        log.debug("iteration %d: newton=%s max|grad|=%.3e panels=%d x=%s", it, moved, gn, law.panels, x)
        if not moved:
            xn = _lloyd_sweep(law, x, p)
            if np.any(np.diff(xn) <= 0):
                raise QuantizationError("grid collapse: two points merged during the fallback sweep")
            x = xn
            g = law.gradient(x, p)
            gn = float(np.max(np.abs(g)))
    return x, g, gn, it


def build_grid(ctx: CharFunContext, N: int, p_norm: float = 2.0, tol: float = 1e-9, max_iter: int = 200,
               law: ForwardLaw | None = None, h_rel: float = 1e-6, check_nodes: bool = True) -> QuantGrid:
    """Stationary L^p quantization grid of size N for exp(X) under the (T + delta)-forward measure.

    Starts from a regular grid around E[exp(X)] = 1 + delta L(t, T, delta)
    and runs damped Newton steps with a tridiagonal Hessian until every
    gradient component is below ``tol`` times p E[Z]^(p-1) sd(Z).  The
    frequency grid is doubled and the iteration resumed until the converged
    residuals agree across the two grids.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if p_norm < 1:
        raise ValueError("p_norm must be at least 1")
    law = ForwardLaw(ctx) if law is None else law
    if law.degenerate:
        x = law.mean * (1.0 + 1e-8 * np.arange(N))
        w = np.zeros(N)
        w[0] = 1.0
        return QuantGrid(x, w, p_norm, 0.0, 0)
    if p_norm - 1.0 >= law.strip:
        raise QuantizationError(f"E[Z^{p_norm - 1:g}] is infinite: the stationarity equations are undefined")
    scale = p_norm * law.mean ** (p_norm - 1.0) * law.std
    x = _initial_grid(law, N)
    total = 0
    for _ in range(6):
        x, g, gn, it = _newton(law, x, p_norm, tol * scale, max_iter - total, h_rel)
        total += it
        if gn > tol * scale:
            raise QuantizationError(
                f"Newton did not converge in {max_iter} iterations: max |grad| = {gn:.3e}, "
                f"target {tol * scale:.3e}, residual norms {np.array2string(np.abs(g), precision=2)}"
            )
        if not check_nodes:
            break
        coarse = law.panels
        law.set_panels(2 * coarse)
        g2 = law.gradient(x, p_norm)
        if np.max(np.abs(g2)) <= tol * scale:
            law.set_panels(coarse)
            break
    w = _companion_weights(law, x)
    return QuantGrid(x, w, p_norm, gn / scale, total)


def caplet_price_quant(grid: QuantGrid, ctx: CharFunContext, K):
    """B(t, T + delta) sum_j (x_j - (1 + delta K))^+ w_j."""
    scalar = np.ndim(K) == 0
    K_bar = 1.0 + ctx.delta * np.atleast_1d(np.asarray(K, dtype=float))
    pay = np.maximum(grid.points[None, :] - K_bar[:, None], 0.0) @ grid.weights
    out = ctx.bond_T_plus_delta() * pay
    return float(out[0]) if scalar else out


def write_grid_csv(grid: QuantGrid, path) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "point", "weight"])
        for k, (x, w) in enumerate(zip(grid.points, grid.weights)):
            wr.writerow([k, repr(float(x)), repr(float(w))])
