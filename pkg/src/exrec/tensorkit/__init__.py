"""Small float64 neural toolkit with hand-written backward passes."""

from .attention import SelfAttention, self_attention
from .functional import log_sigmoid, relu, sigmoid, softmax, softplus
from .gradcheck import check_params, grad_check, noise_floor, numerical_gradient, relative_error
from .layers import MLP, Embedding, Linear, mlp_forward
from .optim import Adam
from .params import (
    FORMAT_VERSION,
    Parameter,
    ParameterSet,
    load_checkpoint,
    save_checkpoint,
)
from .recurrent import (
    LSTM,
    MLSTM,
    BiLSTM,
    LstmState,
    MlstmState,
    bilstm_forward,
    lengths_to_mask,
    lstm_forward,
    mlstm_step,
    mlstm_step_backward,
    pad_sequences,
)

__all__ = [
    "Adam",
    "BiLSTM",
    "Embedding",
    "FORMAT_VERSION",
    "LSTM",
    "Linear",
    "LstmState",
    "MLP",
    "MLSTM",
    "MlstmState",
    "Parameter",
    "ParameterSet",
    "SelfAttention",
    "bilstm_forward",
    "check_params",
    "grad_check",
    "lengths_to_mask",
    "load_checkpoint",
    "log_sigmoid",
    "lstm_forward",
    "mlp_forward",
    "mlstm_step",
    "mlstm_step_backward",
    "noise_floor",
    "numerical_gradient",
    "pad_sequences",
    "relative_error",
    "relu",
    "save_checkpoint",
    "self_attention",
    "sigmoid",
    "softmax",
    "softplus",
]
