from .adam import AdamState, NonFiniteGradient, adam_step
from .autodiff import (
    ContractError,
    Tape,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    conv2d,
    conv2d_nhwc,
    diff,
    mul,
    relu,
    reshape,
    scale,
    square,
    sub,
    to_nchw,
    to_nhwc,
    total,
)

__all__ = [
    "AdamState",
    "ContractError",
    "NonFiniteGradient",
    "Tape",
    "Tensor",
    "absolute",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "conv2d",
    "conv2d_nhwc",
    "diff",
    "mul",
    "relu",
    "reshape",
    "scale",
    "square",
    "sub",
    "to_nchw",
    "to_nhwc",
    "total",
]
