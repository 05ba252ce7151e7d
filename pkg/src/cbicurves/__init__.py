"""Multi-curve interest rate model driven by a flow of tempered alpha-stable CBI processes."""

__version__ = "0.1.0"

from .mechanisms import MechanismParams, phi, lifetime, ergodic_mean  # noqa: E402
from .model import ModelParams, MultiCurveModel  # noqa: E402
from .curves import DiscountCurve, ForwardCurve, MarketCurves, VolSurface  # noqa: E402

__all__ = [
    "MechanismParams",
    "phi",
    "lifetime",
    "ergodic_mean",
    "ModelParams",
    "MultiCurveModel",
    "DiscountCurve",
    "ForwardCurve",
    "MarketCurves",
    "VolSurface",
]
