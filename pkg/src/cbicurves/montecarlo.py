"""Euler simulation of the tempered alpha-stable CBI flow and Monte Carlo pricing.

Each factor layer X^j = Y^j - Y^(j-1) is an independent CBI process with the
common branching mechanism and immigration rate dbeta_j, so the flow is
rebuilt as cumulative sums of non-negative layers and the ordering
Y^1 <= ... <= Y^m holds on every path by construction.

Per Euler step of length dt a layer moves by

    (dbeta_j - (b + comp) X) dt + sigma sqrt(X dt) Z + sum of jumps,

where the number of jumps is Poisson with mean X dt lam_eps and the sizes
have density proportional to exp(-theta' w) w^(-1-alpha) on [eps, inf).
lam_eps and comp are the mass and first moment of the truncated flow jump
measure, both positive.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .mechanisms import MechanismParams, flow_jump_constant, upper_incomplete_gamma
from .model import MultiCurveModel

__all__ = [
    "SimConfig",
    "JumpLaw",
    "PathBundle",
    "simulate",
    "simulate_layers",
    "sample_jump_sizes",
    "mc_discount_factors",
    "mc_bond",
    "mc_caplet",
    "mc_futures_rate",
    "mc_laplace",
    "cluster_stats",
    "write_paths_csv",
]

log = logging.getLogger(__name__)

NORMAL, COUNT, SIZE = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    """Euler scheme settings.  ``block`` fixes the random-stream layout, so keep it constant for reproducibility."""

    horizon: float
    paths: int
    steps: int = 1000
    eps_trunc: float = 1e-3
    seed: int = 0
    antithetic: bool = False
    small_jump_diffusion: bool = True
    block: int = 8192
    threads: int = 1
    jump_log: bool = False

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.steps < 1 or self.paths < 1:
            raise ValueError("steps and paths must be at least 1")
        if not self.eps_trunc > 0:
            raise ValueError("eps_trunc must be positive")
        if self.block < 2 or self.block % 2:
            raise ValueError("block must be an even integer >= 2")
        if self.antithetic and self.paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)


@dataclass(frozen=True)
class JumpLaw:
    """Truncated flow jump measure on [eps, inf) and the quantities the scheme needs."""

    mech: MechanismParams
    eps: float

    @property
    def intensity(self) -> float:
        """Mass of the truncated measure per unit of factor level."""
        m = self.mech
        if not m.has_jumps:
            return 0.0
        th = m.theta_eff
        return flow_jump_constant(m) * th ** m.alpha * upper_incomplete_gamma(-m.alpha, self.eps * th)

    @property
    def compensator(self) -> float:
        """First moment of the truncated measure, the extra mean-reversion rate in the drift."""
        m = self.mech
        if not m.has_jumps:
            return 0.0
        th = m.theta_eff
        return flow_jump_constant(m) * th ** (m.alpha - 1) * upper_incomplete_gamma(1 - m.alpha, self.eps * th)

    @property
    def small_jump_variance(self) -> float:
        """Second moment of the removed jumps below eps."""
        m = self.mech
        if not m.has_jumps:
            return 0.0
        th = m.theta_eff
        a = 2.0 - m.alpha
        return flow_jump_constant(m) * th ** (m.alpha - 2) * special.gamma(a) * special.gammainc(a, self.eps * th)

    @property
    def acceptance_rate(self) -> float:
        """Expected acceptance of Pareto proposals with ratio exp(-theta' (w - eps))."""
        m = self.mech
        x = self.eps * m.theta_eff
        return m.alpha * x ** m.alpha * math.exp(x) * upper_incomplete_gamma(-m.alpha, x)

    def appendix_coefficients(self) -> tuple[float, float]:
        """(C_eps, drift coefficient) exactly as the appendix scheme writes them, both negative.

        The intensity there is -X C_eps dt and the drift coefficient enters as
        b + coefficient; the scheme here uses -C_eps and -coefficient.
        """
        m = self.mech
        th, a = m.theta_eff, m.alpha
        cos = math.cos(a * math.pi / 2)
        g = special.gamma(-a)
        c_eps = m.eta**a * th**a / cos * upper_incomplete_gamma(-a, self.eps * th) / g
        coef = m.eta**a * th ** (a - 1) / cos * upper_incomplete_gamma(1 - a, self.eps * th) / g
        return c_eps, coef


def sample_jump_sizes(rng: np.random.Generator, n: int, eps: float, alpha: float, theta: float) -> np.ndarray:
    """n draws with density proportional to exp(-theta w) w^(-1-alpha) on [eps, inf), by Pareto rejection."""
    out = np.empty(n)
    filled = 0
    while filled < n:
        k = max(2 * (n - filled), 64)
        w = eps * rng.random(k) ** (-1.0 / alpha)
        keep = w[rng.random(k) < np.exp(-theta * (w - eps))]
        take = min(keep.size, n - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


@dataclass
class PathBundle:
    """Simulated layers at the observation times.

    x: (paths, len(times), m) layer values; integral: (paths, len(times))
    trapezoid integral of sum_j weights_j X^j from 0.
    """

    times: np.ndarray
    x: np.ndarray
    integral: np.ndarray
    config: SimConfig
    floored_fraction: float
    acceptance_rate: float
    jumps: dict | None = None
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def y(self) -> np.ndarray:
        """Cumulative flow Y^i = sum_{j <= i} X^j."""
        return np.cumsum(self.x, axis=-1)

    @property
    def paths(self) -> int:
        return self.x.shape[0]

    def index(self, T: float) -> int:
        k = int(np.argmin(np.abs(self.times - T)))
        if abs(self.times[k] - T) > 1e-9 * max(1.0, T):
            raise ValueError(f"time {T!r} was not observed")
        return k


def _stream(cfg: SimConfig, block: int, layer: int, kind: int) -> np.random.Generator:
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(block, layer, kind))
    return np.random.Generator(np.random.Philox(ss))


def _run_block(b, cfg, mech, x0, dbeta, weights, obs_idx, law):
    B = cfg.block
    m = x0.size
    dt = cfg.dt
    sig2 = mech.sigma**2 + (law.small_jump_variance if cfg.small_jump_diffusion else 0.0)
    lam_eps, comp = law.intensity, law.compensator
    rng_n = [_stream(cfg, b, j, NORMAL) for j in range(m)]
    rng_c = [_stream(cfg, b, j, COUNT) for j in range(m)]
    rng_s = [_stream(cfg, b, j, SIZE) for j in range(m)]
    x = np.tile(x0, (B, 1)).T.copy()  # (m, B)
    integ = np.zeros(B)
    out_x = np.empty((obs_idx.size, m, B))
    out_i = np.empty((obs_idx.size, B))
    slot = {int(k): r for r, k in enumerate(obs_idx)}
    if 0 in slot:
        out_x[slot[0]] = x
        out_i[slot[0]] = 0.0
    floored = 0
    jl = [] if cfg.jump_log else None
    half = B // 2
    rows = np.arange(B)
    for n in range(1, cfg.steps + 1):
        lin_old = weights @ x
        for j in range(m):
            xj = x[j]
            if cfg.antithetic:
                z = np.empty(B)
                z[0::2] = rng_n[j].standard_normal(half)
                z[1::2] = -z[0::2]
            else:
                z = rng_n[j].standard_normal(B)
            new = xj + (dbeta[j] - (mech.b + comp) * xj) * dt + np.sqrt(sig2 * xj * dt) * z
            if lam_eps > 0:
                counts = rng_c[j].poisson(xj * (dt * lam_eps))
                tot = int(counts.sum())
                if tot:
                    sizes = sample_jump_sizes(rng_s[j], tot, cfg.eps_trunc, mech.alpha, mech.theta_eff)
                    owner = np.repeat(rows, counts)
                    new += np.bincount(owner, weights=sizes, minlength=B)
                    if jl is not None:
                        jl.append((owner + b * B, np.full(tot, n * dt), np.full(tot, j), sizes))
            neg = new < 0
            floored += int(neg.sum())
            new[neg] = 0.0
            x[j] = new
        integ += 0.5 * dt * (lin_old + weights @ x)
        if n in slot:
            out_x[slot[n]] = x
            out_i[slot[n]] = integ
    return out_x, out_i, floored, jl


def simulate_layers(mech: MechanismParams, x0, config: SimConfig, obs_times=None, weights=None) -> PathBundle:
    """Simulate the independent layers from ``x0`` with immigration rates ``mech.dbeta``."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (mech.m,) or np.any(x0 < 0):
        raise ValueError("x0 needs one non-negative entry per factor")
    dbeta = mech.dbeta
    weights = np.zeros(mech.m) if weights is None else np.asarray(weights, dtype=float)
    grid = config.times
    if obs_times is None:
        obs_idx = np.arange(config.steps + 1)
    else:
        obs = np.atleast_1d(np.asarray(obs_times, dtype=float))
        obs_idx = np.rint(obs / config.dt).astype(int)
        if np.any(np.abs(obs_idx * config.dt - obs) > 1e-9 * np.maximum(1.0, obs)) or np.any(obs_idx > config.steps):
            raise ValueError("observation times must lie on the simulation grid")
        obs_idx = np.unique(obs_idx)
    law = JumpLaw(mech, config.eps_trunc)
    if mech.has_jumps:
        log.debug("jump intensity %.6g per unit level, proposal acceptance %.4f", law.intensity, law.acceptance_rate)
    nblocks = -(-config.paths // config.block)

    def run(b):
        return _run_block(b, config, mech, x0, dbeta, weights, obs_idx, law)

    if config.threads > 1 and nblocks > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(run, range(nblocks)))
    else:
        parts = [run(b) for b in range(nblocks)]
    n = config.paths
    xs = np.concatenate([p[0] for p in parts], axis=2)[:, :, :n]
    integ = np.concatenate([p[1] for p in parts], axis=1)[:, :n]
    floored = sum(p[2] for p in parts)
    jumps = None
    if config.jump_log:
        pieces = [piece for p in parts for piece in p[3]]
        if pieces:
            path, t, layer, size = (np.concatenate([q[k] for q in pieces]) for k in range(4))
        else:
            path, t, layer, size = (np.zeros(0, dtype=d) for d in (int, float, int, float))
        keep = path < n
        order = np.lexsort((layer[keep], t[keep], path[keep]))
        jumps = {
            "path": path[keep][order], "time": t[keep][order],
            "layer": layer[keep][order], "size": size[keep][order],
        }
    total_steps = nblocks * config.block * config.steps * mech.m
    return PathBundle(
        times=grid[obs_idx],
        x=np.ascontiguousarray(np.moveaxis(xs, 2, 0)),
        integral=np.ascontiguousarray(integ.T),
        config=config,
        floored_fraction=floored / total_steps,
        acceptance_rate=law.acceptance_rate if mech.has_jumps else 1.0,
        jumps=jumps,
        weights=weights,
    )


def simulate(model: MultiCurveModel, config: SimConfig, obs_times=None, x0=None) -> PathBundle:
    """Simulate the model's factor layers; the integral tracks int_0^t (r_s - l(s)) ds."""
    x0 = model.x0 if x0 is None else x0
    return simulate_layers(model.mechanism, x0, config, obs_times, weights=model.lam)


# ------------------------------------------------------------ estimators


def _antithetic_pairs(n: int) -> np.ndarray:
    """Antithetic partners are adjacent paths (2k, 2k + 1)."""
    idx = np.arange(0, n - 1, 2)
    return np.stack([idx, idx + 1])


def _reduce(bundle: PathBundle, samples: np.ndarray):
    s = np.asarray(samples, dtype=float)
    if bundle.config.antithetic:
        pairs = _antithetic_pairs(bundle.paths)
        s = 0.5 * (s[pairs[0]] + s[pairs[1]])
    n = s.shape[0]
    mean = s.mean(axis=0)
    err = s.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(np.shape(mean), np.nan)
    return mean, err


def mc_discount_factors(bundle: PathBundle, model: MultiCurveModel, T: float) -> np.ndarray:
    """Pathwise exp(-int_0^T r ds)."""
    k = bundle.index(T)
    return np.exp(-float(model.Lambda(T)) - bundle.integral[:, k])


def mc_bond(bundle: PathBundle, model: MultiCurveModel, T: float):
    """(mean, stderr) of the discount factor to T; its expectation is B(0, T)."""
    return _reduce(bundle, mc_discount_factors(bundle, model, T))


def mc_caplet(model: MultiCurveModel, bundle: PathBundle, i: int, T: float, K):
    """(price, stderr) of the caplet paying delta (L(T, T, delta) - K)^+ at T + delta.

    The payment-date discounting from T to T + delta is replaced by its
    conditional expectation B(T, T + delta), which leaves the price unchanged
    and removes simulation noise over the accrual period.
    """
    scalar = np.ndim(K) == 0
    K = np.atleast_1d(np.asarray(K, dtype=float))
    d = float(model.tenors[i])
    k = bundle.index(T)
    xT = bundle.x[:, k, :]
    L = model.forward_ibor_paths(i, T, xT)
    disc = mc_discount_factors(bundle, model, T) * model.bond_prices(T, T + d, xT)
    pay = disc[:, None] * d * np.maximum(L[:, None] - K[None, :], 0.0)
    mean, err = _reduce(bundle, pay)
    return (float(mean[0]), float(err[0])) if scalar else (mean, err)


def mc_futures_rate(model: MultiCurveModel, bundle: PathBundle, i: int, T: float):
    """(mean, stderr) of L(T, T, delta_i) under the risk-neutral measure."""
    k = bundle.index(T)
    return _reduce(bundle, model.forward_ibor_paths(i, T, bundle.x[:, k, :]))


def mc_laplace(bundle: PathBundle, p_vec, T: float, q: float = 0.0):
    """(mean, stderr) of exp(-sum_j p_j X^j_T - q int_0^T sum_j X^j ds) when the bundle weights are ones."""
    k = bundle.index(T)
    p_vec = np.asarray(p_vec, dtype=float)
    if q != 0.0 and not np.allclose(bundle.weights, 1.0):
        raise ValueError("the integral term needs a bundle simulated with unit weights")
    return _reduce(bundle, np.exp(-bundle.x[:, k, :] @ p_vec - q * bundle.integral[:, k]))


# ------------------------------------------------------------ diagnostics


def cluster_stats(bundle: PathBundle, window: float = 0.25, bins: int = 20) -> dict:
    """Jump clustering summary from the jump log.

    Window counts are per path over non-overlapping windows of the given
    width.  A jump of layer j moves every Y^i with i >= j, so the fraction of
    Y^1 jumps that also move Y^i is one by construction.
    """
    if bundle.jumps is None:
        raise ValueError("bundle was simulated without a jump log")
    cfg = bundle.config
    J = bundle.jumps
    nwin = max(1, int(round(cfg.horizon / window)))
    win = np.minimum((J["time"] / window).astype(int), nwin - 1)
    counts = np.zeros((bundle.paths, nwin))
    np.add.at(counts, (J["path"], win), 1.0)
    mean = counts.mean()
    var = counts.var(ddof=1) if counts.size > 1 else 0.0
    gaps = []
    for p in np.unique(J["path"]):
        t = np.unique(J["time"][J["path"] == p])
        if t.size > 1:
            gaps.append(np.diff(t))
    gaps = np.concatenate(gaps) if gaps else np.zeros(0)
    hist, edges = np.histogram(gaps, bins=bins, range=(0.0, cfg.horizon)) if gaps.size else (np.zeros(bins), None)
    m = bundle.x.shape[2]
    moves = [np.isin(J["layer"], np.arange(i + 1)) for i in range(m)]
    base = moves[0].sum()
    common = [float((moves[0] & moves[i]).sum() / base) if base else math.nan for i in range(m)]
    return {
        "total_jumps": int(J["path"].size),
        "jumps_per_layer": [int((J["layer"] == j).sum()) for j in range(m)],
        "window": window,
        "window_mean": float(mean),
        "window_var": float(var),
        "dispersion_index": float(var / mean) if mean > 0 else math.nan,
        "interjump_hist": hist.tolist(),
        "interjump_edges": None if edges is None else edges.tolist(),
        "common_jump_fraction": common,
    }


def short_rate_shift(model: MultiCurveModel, t, h: float = 1e-5):
    """l(t) = d Lambda / dt by central differences (one-sided at 0)."""
    t = np.asarray(t, dtype=float)
    lo = np.maximum(t - h, 0.0)
    return (model.Lambda(t + h) - model.Lambda(lo)) / (t + h - lo)


def write_paths_csv(bundle: PathBundle, model: MultiCurveModel, path, max_paths: int | None = None) -> None:
    """CSV with columns path_id,time,Y1..Ym,r,spread1..spreadm."""
    m = bundle.x.shape[2]
    n = bundle.paths if max_paths is None else min(max_paths, bundle.paths)
    times = bundle.times
    ell = short_rate_shift(model, times)
    y = bundle.y[:n]
    r = ell[None, :] + bundle.x[:n] @ model.lam
    spreads = np.stack([np.exp(model.c(i, times)[None, :] + y[:, :, i]) for i in range(m)], axis=-1)
    header = ["path_id", "time"] + [f"Y{k + 1}" for k in range(m)] + ["r"] + [f"spread{k + 1}" for k in range(m)]
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for p in range(n):
            for k, t in enumerate(times):
                row = [p, repr(float(t))] + [repr(float(v)) for v in y[p, k]] + [repr(float(r[p, k]))]
                row += [repr(float(v)) for v in spreads[p, k]]
                wr.writerow(row)
