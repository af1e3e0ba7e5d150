"""
Errors
======

Exception hierarchy shared by every module. Messages name the operation and
the offending values so a failing run can be diagnosed from the log alone.
"""

from typing import Any, Dict, Optional


class MetaStabError(Exception):
    """Root of all errors raised by metastab"""


class ConfigError(MetaStabError):
    """Unknown or invalid configuration value"""


class ShapeError(MetaStabError, ValueError):
    """Operand shapes are not conformable for a tensor operation"""


class GradientError(MetaStabError):
    """Backward pass or optimizer step cannot proceed"""


class FrameSequenceError(MetaStabError):
    """Frames on disk or in memory violate sequence invariants"""


class SyntheticDataError(MetaStabError):
    """A shake profile or source cannot produce a valid training pair"""


class FlowEstimationError(MetaStabError):
    """Optical flow could not be estimated"""


class AlignmentError(MetaStabError):
    """Rigid transform fit failed (degenerate or ill-posed input)"""


class TrainingDivergedError(MetaStabError):
    """Loss grew instead of shrinking during training"""


class TrainingAbortedError(MetaStabError):
    """Too many consecutive skipped meta-batches"""


class MetricError(MetaStabError):
    """An evaluation metric could not be computed"""


class CheckpointFormatError(MetaStabError):
    """MSTB/MSFL file is malformed"""


class NonFiniteLossError(MetaStabError):
    """A loss evaluated to NaN or Inf; carries a diagnostic dump"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
