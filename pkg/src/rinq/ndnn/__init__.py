"""Small reverse-mode differentiable array engine (float64, numpy-backed)."""

from .gradcheck import analytic_grads, finite_difference_check
from .layers import LSTM, BatchNorm, Conv1d, Linear
from .ops import (
    BatchNormState,
    TrainingError,
    affine,
    avg_pool1d,
    batch_norm,
    conv1d,
    conv_output_length,
    flatten,
    fully_connected,
    lstm_param_count,
    lstm_sequence,
    mse_loss,
    relu,
    reshape,
    transpose,
)
from .optim import Adam, AdamState, adam_step
from .tensor import ShapeError, Tape, TapeError, Tensor, current_tape, op_result, parameter
