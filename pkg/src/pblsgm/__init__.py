"""Parallel bilinear spline growth models with unknown random knots."""
from .estimation import DegenerateData, FitOptions, FitResult, NonConvergence, detect_improper, fit, fit_indices
from .likelihood import FIMLObjective, NotPositiveDefinite, loglik_individual, loglik_sample
from .model import IndividualRecord, ModelSpec, OriginalParams, OutcomeParams, OutcomeSpec, ReparamParams, Shape
from .reparam import to_original, to_reparam
from .simulation import SimulationCondition, condition_grid, generate_dataset, run_condition

__all__ = [
    "DegenerateData",
    "FIMLObjective",
    "FitOptions",
    "FitResult",
    "IndividualRecord",
    "ModelSpec",
    "NonConvergence",
    "NotPositiveDefinite",
    "OriginalParams",
    "OutcomeParams",
    "OutcomeSpec",
    "ReparamParams",
    "Shape",
    "SimulationCondition",
    "condition_grid",
    "detect_improper",
    "fit",
    "fit_indices",
    "generate_dataset",
    "loglik_individual",
    "loglik_sample",
    "run_condition",
    "to_original",
    "to_reparam",
]
