"""Tiny autoregressive language model used as teacher and student."""

from .checkpoint import load_params, save_params
from .codec import BOS, END, PAD, TaskCodec
from .generation import (
    STUDENT,
    TEACHER,
    Trace,
    annotate_with_teacher,
    attach_student,
    generate,
    pack,
    response_logits,
    sample_response,
    sample_traces,
    scatter_grads,
)
from .model import (
    ModelDims,
    TinyLMParams,
    backward,
    forward,
    forward_incremental,
    init_params,
    param_shapes,
)

__all__ = [
    "BOS", "END", "PAD", "STUDENT", "TEACHER",
    "ModelDims", "TaskCodec", "TinyLMParams", "Trace",
    "annotate_with_teacher", "attach_student", "backward", "forward", "generate",
    "forward_incremental", "init_params", "load_params", "pack", "param_shapes", "response_logits",
    "sample_response", "sample_traces", "save_params", "scatter_grads",
]
