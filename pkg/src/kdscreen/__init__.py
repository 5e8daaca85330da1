"""Keystroke-dynamics screening for Parkinson's disease.

Typing logs become four timing channels (hold, flight, press-press and
release-release), are cut into standardized windows and fed to small neural
classifiers trained with subject-level cross-validation, class rebalancing and
transfer to new cohorts.
"""
from .balance import Strategy, ensemble_aggregate, imbalmed_plan, make_plan, undersample
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, Stage
from .evaluation import UndefinedMetricError, aggregate_patient, auc_roc, f1, make_folds
from .ingest import (Cohort, IngestError, SessionEvents, SignalSequence, TaskKind, parse_event_log,
                     parse_labels, parse_signal_log, validate_cohort)
from .nn import Arch, Classifier, ModelSpec
from .search import SearchSpace, default_space, forward_select
from .signals import CleaningConfig, derive_signals, preprocess_cohort
from .synth import SynthConfig, generate_cohort, shuffle_labels
from .training import FreezePolicy, TrainConfig, early_stop_check, fine_tune, train
from .windowing import LeakageError, WindowingConfig, cohort_windows, slide

__version__ = "0.1.0"

__all__ = [
    "Arch", "Checkpoint", "CleaningConfig", "Classifier", "Cohort", "ConfigError", "ExperimentConfig",
    "FreezePolicy", "IngestError", "LeakageError", "ModelSpec", "SearchSpace", "SessionEvents",
    "SignalSequence", "Stage", "Strategy", "SynthConfig", "TaskKind", "TrainConfig",
    "UndefinedMetricError", "WindowingConfig", "aggregate_patient", "auc_roc", "cohort_windows",
    "default_space", "derive_signals", "early_stop_check", "ensemble_aggregate", "f1", "fine_tune",
    "forward_select", "generate_cohort", "imbalmed_plan", "load_checkpoint", "make_folds", "make_plan",
    "parse_event_log", "parse_labels", "parse_signal_log", "preprocess_cohort", "save_checkpoint",
    "shuffle_labels", "slide", "train", "undersample", "validate_cohort",
]
