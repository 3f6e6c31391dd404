"""Exact mixed-precision training core for checking the speculative protocol."""

from offloadsim.numcore.adam import (
    DEFAULT_TILE_ELEMS,
    adam_step_bucket,
    adam_step_reference,
    adam_step_scalar,
)
from offloadsim.numcore.model import Batch, SyntheticStream, TinyModel, tiny_model_grads
from offloadsim.numcore.protocol import (
    FAULT_PATTERNS,
    Fault,
    FaultSpec,
    Mode,
    Mutation,
    Scheduler,
    TrainingResult,
    element_plan,
    element_ranges,
    fault_pattern,
    run_training,
    stv_iteration,
    sync_iteration,
)
from offloadsim.numcore.state import (
    AdamHyper,
    BucketSnapshot,
    IterationReport,
    LossScalePolicy,
    TrainState,
    ValidationVerdict,
    VerdictKind,
)
from offloadsim.numcore.validation import global_grad_norm, validate
from offloadsim.numcore.verify import VerifyReport, run_suite

__all__ = [
    "AdamHyper", "Batch", "BucketSnapshot", "DEFAULT_TILE_ELEMS", "FAULT_PATTERNS", "Fault",
    "FaultSpec", "IterationReport", "LossScalePolicy", "Mode", "Mutation", "Scheduler",
    "SyntheticStream", "TinyModel", "TrainState", "TrainingResult", "ValidationVerdict",
    "VerdictKind", "VerifyReport", "adam_step_bucket", "adam_step_reference",
    "adam_step_scalar", "element_plan", "element_ranges", "fault_pattern", "global_grad_norm",
    "run_suite", "run_training", "stv_iteration", "sync_iteration", "tiny_model_grads",
    "validate",
]
