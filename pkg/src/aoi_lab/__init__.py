"""Stationary age-of-information distributions for discrete-time status-update queues."""

from .core import (
    AoiError, EmptyCondition, IllConditioned, InvalidParameters, InvalidState,
    ModelSpec, NearSingular, NonNormalizable, NotConverged, Pmf, PreemptionPolicy,
    ServiceDistribution, StateSpaceTooLarge, StationaryTable, SystemParams, Unstable,
    pmf_mean, pmf_total_variation, validate_age_state,
)

__all__ = [
    "AoiError", "EmptyCondition", "IllConditioned", "InvalidParameters", "InvalidState",
    "ModelSpec", "NearSingular", "NonNormalizable", "NotConverged", "Pmf",
    "PreemptionPolicy", "ServiceDistribution", "StateSpaceTooLarge", "StationaryTable",
    "SystemParams", "Unstable", "pmf_mean", "pmf_total_variation", "validate_age_state",
]
