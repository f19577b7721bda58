"""Small dense-tensor core with reverse-mode differentiation."""

from .gradcheck import GradcheckReport, gradcheck, gradcheck_many
from .lstm import bilstm, lstm_sequence
from .ops import (
    BatchNormState,
    LstmWeights,
    add,
    batch_norm,
    concat_last,
    conv_time,
    cross_entropy,
    dot_scores,
    lstm_step,
    matmul,
    mean_weighted,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_last,
    softmax,
    take,
    tanh,
    total,
)
from .tensor import Tape, Tensor, active_tape

__all__ = [
    "BatchNormState", "GradcheckReport", "LstmWeights", "Tape", "Tensor", "active_tape",
    "add", "batch_norm", "bilstm", "concat_last", "conv_time", "cross_entropy", "dot_scores",
    "gradcheck", "gradcheck_many", "lstm_sequence", "lstm_step", "matmul", "mean_weighted",
    "mul", "relu", "reshape", "scale", "sigmoid", "slice_last", "softmax", "take", "tanh", "total",
]
