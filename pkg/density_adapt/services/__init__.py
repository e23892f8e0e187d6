"""Training, refinement and evaluation services."""

from density_adapt.services.evaluation import EvaluationService, evaluate, read_report, write_report
from density_adapt.services.refinement import RefinementResult, RefinerTrainer, coarse_maps, refiner_pipeline
from density_adapt.services.training import (
    CounterTrainer,
    TrainState,
    adapt_train,
    spr_supervised_train,
    supervised_train,
)

__all__ = [
    "CounterTrainer",
    "EvaluationService",
    "RefinementResult",
    "RefinerTrainer",
    "TrainState",
    "adapt_train",
    "coarse_maps",
    "evaluate",
    "read_report",
    "refiner_pipeline",
    "spr_supervised_train",
    "supervised_train",
    "write_report",
]
