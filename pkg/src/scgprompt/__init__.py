"""Co-optimisation of a semantic causal graph and two-stage LLM prompts."""

from .errors import (
    BackendError, CycleError, EnvelopeError, InsufficientData, LengthMismatch, MixedTarget,
    PreconditionError, RejectedEdit, ScgError, ScgSyntaxError, ScriptMiss, TransientError, UnknownNode,
)
from .metrics import Metrics, compute_metrics, weighted_f1
from .scg import CausalStatement, Scg, ScgEdit, apply_edit, diff_scg, parse_scg, render_scg

__version__ = "0.1.0"

__all__ = [
    "BackendError", "CycleError", "EnvelopeError", "InsufficientData", "LengthMismatch", "MixedTarget",
    "PreconditionError", "RejectedEdit", "ScgError", "ScgSyntaxError", "ScriptMiss", "TransientError",
    "UnknownNode", "Metrics", "compute_metrics", "weighted_f1", "CausalStatement", "Scg", "ScgEdit",
    "apply_edit", "diff_scg", "parse_scg", "render_scg",
]
