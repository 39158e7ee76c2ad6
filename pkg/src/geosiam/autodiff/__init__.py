from .checkpoint import load_checkpoint, save_checkpoint
from .engine import (
    GraphError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    dense,
    getitem,
    global_avg_pool,
    matmul,
    maxpool2,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    softmax_ce_loss,
    square,
    tabs,
    tsum,
    upsample2,
)
from .optim import LrSchedule, Param, ParamStore, sgd_step

__all__ = [
    "GraphError", "LrSchedule", "Param", "ParamStore", "Tensor", "add", "concat_channels",
    "conv2d", "dense", "getitem", "global_avg_pool", "load_checkpoint", "matmul", "maxpool2",
    "mean", "mul", "relu", "reshape", "save_checkpoint", "sgd_step", "softmax",
    "softmax_ce_loss", "square", "tabs", "tsum", "upsample2",
]
