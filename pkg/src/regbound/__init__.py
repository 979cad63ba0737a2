"""Cramér-Rao bounds and maximum-likelihood fitting for affine point-based
registration with heteroscedastic errors in both control-point sets."""

from regbound.errors import (
    AssumptionViolated,
    DegenerateDesign,
    InvalidScenario,
    NonConvergence,
    RegBoundError,
    SingularFim,
    SingularScatter,
)
from regbound.regmodel import (
    AffineTransform,
    ControlPointSet,
    FeatureSpec,
    GeneralCovariance,
    IsotropicWeightedCovariance,
    ParameterLayout,
    RegistrationScenario,
    WeightedCovariance,
    map_point,
    validate,
    weighted_summary,
)

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "AssumptionViolated",
    "ControlPointSet",
    "DegenerateDesign",
    "FeatureSpec",
    "GeneralCovariance",
    "InvalidScenario",
    "IsotropicWeightedCovariance",
    "NonConvergence",
    "ParameterLayout",
    "RegBoundError",
    "RegistrationScenario",
    "SingularFim",
    "SingularScatter",
    "WeightedCovariance",
    "map_point",
    "validate",
    "weighted_summary",
]
