from . import nn
from .gradcheck import finite_diff_grad, finite_diff_param_grad, rel_error
from .tensor import (
    DTYPE,
    ComputationRecord,
    ContractViolation,
    Tensor,
    as_tensor,
    backward,
    concat,
    conv1d,
    cumsum,
    dropout,
    embedding,
    exp,
    gather,
    layer_norm,
    log,
    masked_mean,
    matmul,
    mean,
    no_grad,
    power,
    relu,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    tanh,
    trace,
    tsum,
    where,
)
