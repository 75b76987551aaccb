"""Multi-modal population-graph learning for transductive subject
classification: reward-weighted affinity graphs, graph-transformer U-Net
encoders per modality, attention fusion, and a cross-validation harness."""

from .config import TrainConfig, resolve_config
from .data import (AttributeSpec, Cohort, CohortSchema, FoldPlan, SubjectRecord,
                   compute_fc_vector, encode_phenotypes, generate_synthetic_cohort,
                   load_cohort, make_fold_plan)
from .errors import PopfusionError, TrainingError, ValidationError
from .train import evaluate_metrics, run_cross_validation, train_fold

__version__ = "0.1.0"

__all__ = [
    "AttributeSpec", "Cohort", "CohortSchema", "FoldPlan", "SubjectRecord",
    "TrainConfig", "PopfusionError", "TrainingError", "ValidationError",
    "compute_fc_vector", "encode_phenotypes", "generate_synthetic_cohort",
    "load_cohort", "make_fold_plan", "evaluate_metrics", "run_cross_validation",
    "train_fold", "resolve_config", "__version__",
]
