"""Federated-learning simulation stack for multi-task perioperative risk models."""

__version__ = "0.1.0"

from .cohort import Cohort, FeatureSchema, OUTCOME_NAMES, Record  # noqa: E402,F401
from .metrics import ScoredSet, auprc, auroc, bootstrap_ci  # noqa: E402,F401
from .model import ModelConfig, ModelParams  # noqa: E402,F401
from .preprocess import CohortPreprocessor, chronological_split  # noqa: E402,F401
from .federation import ParadigmTrainer, TrainPlan, run_paradigm  # noqa: E402,F401
from .synth import SiteSpec, default_schema, generate_site  # noqa: E402,F401
