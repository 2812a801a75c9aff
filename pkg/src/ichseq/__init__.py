"""Per-slice intracranial hemorrhage classification with scan-level context.

Pipeline: raw CT slices -> Hounsfield units -> three-window channel stack ->
CNN slice features -> bidirectional LSTM over the scan -> per-slice sigmoid
probabilities for five hemorrhage subtypes plus the any-hemorrhage class.
"""

from .errors import ConfigError, DataError, IchSeqError, NonFiniteLossError, UndefinedMetricError
from .metrics import CLASS_NAMES, LossWeights, MetricReport, aggregate_scan, roc_auc, weighted_log_loss
from .model import ModelConfig, SequenceBatch, SliceSequenceModel, build_model
from .windowing import BONY_WINDOW, BRAIN_WINDOW, SUBDURAL_WINDOW, WindowSpec, WindowTriple, apply_window, stack_windows

__version__ = "0.1.0"

__all__ = [
    "BONY_WINDOW",
    "BRAIN_WINDOW",
    "CLASS_NAMES",
    "ConfigError",
    "DataError",
    "IchSeqError",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "NonFiniteLossError",
    "SUBDURAL_WINDOW",
    "SequenceBatch",
    "SliceSequenceModel",
    "UndefinedMetricError",
    "WindowSpec",
    "WindowTriple",
    "aggregate_scan",
    "apply_window",
    "build_model",
    "roc_auc",
    "stack_windows",
    "weighted_log_loss",
    "__version__",
]
