"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .core import (
    ComputationRecord,
    Tensor,
    as_tensor,
    backward,
    debug_enabled,
    is_grad_enabled,
    no_grad,
    set_debug,
)
from .gradcheck import analytic_gradients, check_gradients, numerical_gradients
from .ops import (
    add,
    conv2d,
    elementwise_mul,
    gather,
    global_avg_pool,
    l2_normalize,
    linear,
    mean,
    neg_entropy,
    pairwise_distance,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    sub,
)
from .serialize import (
    FormatError,
    decode_array,
    encode_array,
    load_tensor,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
)

__all__ = [
    "ComputationRecord",
    "FormatError",
    "Tensor",
    "add",
    "analytic_gradients",
    "as_tensor",
    "backward",
    "check_gradients",
    "conv2d",
    "debug_enabled",
    "decode_array",
    "elementwise_mul",
    "encode_array",
    "gather",
    "global_avg_pool",
    "is_grad_enabled",
    "l2_normalize",
    "linear",
    "load_tensor",
    "mean",
    "neg_entropy",
    "no_grad",
    "numerical_gradients",
    "pairwise_distance",
    "relu",
    "reshape",
    "save_tensor",
    "scale",
    "set_debug",
    "softmax_cross_entropy",
    "sub",
    "tensor_from_bytes",
    "tensor_to_bytes",
]
