from .optim import clip_by_norm, finite_diff_grad, project_ball, sample_ball_weight, sgd_step
from .params import ParamLayout
from .tensor import (
    Tensor,
    as_tensor,
    avg_pool2d,
    concat,
    conv2d,
    exp,
    grad,
    log,
    log_softmax,
    relu,
    sigmoid,
    softplus,
    tanh,
)

__all__ = [
    "ParamLayout",
    "Tensor",
    "as_tensor",
    "avg_pool2d",
    "clip_by_norm",
    "concat",
    "conv2d",
    "exp",
    "finite_diff_grad",
    "grad",
    "log",
    "log_softmax",
    "project_ball",
    "relu",
    "sample_ball_weight",
    "sgd_step",
    "sigmoid",
    "softplus",
    "tanh",
]
