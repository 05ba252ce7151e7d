"""Reference parameter sets and synthetic market curves for tests and experiments."""

from __future__ import annotations

import numpy as np

from .curves import DiscountCurve, ForwardCurve, MarketCurves
from .mechanisms import MechanismParams
from .model import ModelParams

TABLE3 = {
    "b": 0.05353,
    "sigma": 0.00582,
    "eta": 0.04070,
    "theta": 0.05070,
    "alpha": 1.31753,
    "beta": [9.99999e-4, 0.00340],
    "mu": [1.49999, 1.00000],
    "y0": [0.00495, 0.00507],
    "tenors": [0.25, 0.5],
}

PILLARS = np.array([0.25, 0.5, 0.75, 1, 1.5, 2, 3, 4, 5, 7, 10, 12, 15, 20, 25, 30])


def table3_params(**overrides) -> ModelParams:
    """Calibrated reference parameters (3M and 6M tenors) with optional overrides."""
    d = dict(TABLE3)
    d.update(overrides)
    return ModelParams.from_dict(d)


def cir_mechanism(b: float = 1.0, sigma2: float = 2.0, beta=(0.0,)) -> MechanismParams:
    """Jump-free mechanism phi(y) = b y + sigma2 / 2 y^2."""
    return MechanismParams(b, float(np.sqrt(sigma2)), 0.0, 1.0, 1.5, tuple(beta))


def flat_curves(ois_rate: float = 0.01, forwards=(0.035, 0.04), tenors=(0.25, 0.5), pillars=PILLARS) -> MarketCurves:
    """Flat continuously compounded OIS curve and flat simple forward curves."""
    pillars = np.asarray(pillars, dtype=float)
    disc = DiscountCurve(pillars, np.exp(-ois_rate * pillars))
    fwd = tuple(ForwardCurve(d, pillars, np.full(pillars.shape, f)) for d, f in zip(tenors, forwards))
    return MarketCurves(disc, fwd)


def sloped_curves(tenors=(0.25, 0.5), pillars=PILLARS) -> MarketCurves:
    """Upward sloping curves with tenor-ordered spreads; rates start slightly negative."""
    pillars = np.asarray(pillars, dtype=float)
    zero = -0.003 + 0.012 * (1 - np.exp(-pillars / 5.0))
    disc = DiscountCurve(pillars, np.exp(-zero * pillars))
    fwd = []
    for k, d in enumerate(tenors):
        ois_fwd = disc.ois_forward(pillars, d)
        fwd.append(ForwardCurve(d, pillars, ois_fwd + 0.001 * (k + 1) + 0.0005 * np.sqrt(pillars)))
    return MarketCurves(disc, tuple(fwd))
