"""Minimal float32 tensor engine with reverse-mode autodiff."""

from .tensor import (
    EngineError,
    GraphError,
    ParamError,
    ShapeError,
    Tensor,
    backward,
    debug_checks_enabled,
    parameter,
    set_debug_checks,
)
from .layers import BatchNormParams, ConvParams, glorot_uniform
from .functional import (
    activate,
    add,
    as_generator,
    as_tensor,
    batch_norm,
    bce,
    bn_act,
    clip,
    conv2d,
    crop,
    dice_loss,
    dropout,
    elu,
    gaussian_noise,
    hard_sigmoid,
    leaky_relu,
    loss,
    mask_compose,
    mirror_pad,
    mse,
    mul,
    piecewise_linear,
    sigmoid,
    stack,
    sub,
    take_channel,
    tmean,
    tsum,
)
from .optim import SGD, Adam, OptimError, clip_gradients, global_grad_norm, optimizer_step, zero_grads
from .checkpoint import FormatError, load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "BatchNormParams",
    "ConvParams",
    "EngineError",
    "FormatError",
    "GraphError",
    "OptimError",
    "ParamError",
    "SGD",
    "ShapeError",
    "Tensor",
    "activate",
    "add",
    "as_generator",
    "as_tensor",
    "backward",
    "batch_norm",
    "bce",
    "bn_act",
    "clip",
    "clip_gradients",
    "conv2d",
    "crop",
    "debug_checks_enabled",
    "dice_loss",
    "dropout",
    "elu",
    "gaussian_noise",
    "global_grad_norm",
    "glorot_uniform",
    "hard_sigmoid",
    "leaky_relu",
    "load_checkpoint",
    "loss",
    "mask_compose",
    "mirror_pad",
    "mse",
    "mul",
    "optimizer_step",
    "parameter",
    "piecewise_linear",
    "save_checkpoint",
    "set_debug_checks",
    "sigmoid",
    "stack",
    "sub",
    "take_channel",
    "tmean",
    "tsum",
    "zero_grads",
]
