"""Learned discrete-time contraction metrics with adaptive tracking control.

The package trains a pair of weight-shared networks mapping (state,
parameter) to a Riemannian metric and a differential feedback gain, checks
the contraction condition on a verification mesh, integrates geodesics under
the learned metric, and closes the loop on an uncertain exothermic reactor
with moving-horizon parameter identification.
"""

from .ctrl import (
    ControlResult,
    InfeasibleReferenceError,
    ReferencePoint,
    SaturatedReferenceError,
    SetpointSchedule,
    control,
    generate_reference,
)
from .dccm_net import (
    MetricGainPair,
    NetworkWeights,
    evaluate,
    evaluate_many,
    evaluate_siamese,
    init_weights,
    load_weights,
    save_weights,
)
from .diffcore import DomainError, Expr, Gradient, Graph, UnsupportedDimensionError
from .mhe import EstimationWindow, MheOptions, ParamEstimate, estimate
from .plant import Box, CstrParams, UncertainModel, cstr, grid, jacobians, step
from .riemann import GeodesicOptions, GeodesicPath, distance, geodesic
from .simloop import (
    ConfigError,
    RunSummary,
    ScenarioConfig,
    SimulationError,
    TrajectoryLog,
    load_config,
    run,
    summarize,
)
from .trainer import (
    TrainerConfig,
    TrainingSample,
    VerificationReport,
    fd_gradient,
    generate_dataset,
    load_dataset,
    loss,
    save_dataset,
    total_loss,
    train,
    verify,
)

__all__ = [
    "Box",
    "ConfigError",
    "ControlResult",
    "CstrParams",
    "DomainError",
    "EstimationWindow",
    "Expr",
    "GeodesicOptions",
    "GeodesicPath",
    "Gradient",
    "Graph",
    "InfeasibleReferenceError",
    "MetricGainPair",
    "MheOptions",
    "NetworkWeights",
    "ParamEstimate",
    "ReferencePoint",
    "RunSummary",
    "SaturatedReferenceError",
    "ScenarioConfig",
    "SetpointSchedule",
    "SimulationError",
    "TrainerConfig",
    "TrainingSample",
    "TrajectoryLog",
    "UncertainModel",
    "UnsupportedDimensionError",
    "VerificationReport",
    "control",
    "cstr",
    "distance",
    "estimate",
    "evaluate",
    "evaluate_many",
    "evaluate_siamese",
    "fd_gradient",
    "generate_dataset",
    "generate_reference",
    "geodesic",
    "grid",
    "init_weights",
    "jacobians",
    "load_config",
    "load_dataset",
    "load_weights",
    "loss",
    "run",
    "save_dataset",
    "save_weights",
    "step",
    "summarize",
    "total_loss",
    "train",
    "verify",
]

__version__ = "0.1.0"
