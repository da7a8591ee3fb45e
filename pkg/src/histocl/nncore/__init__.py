"""Self-contained differentiable classifier: model, losses, SGD, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .losses import (
    CrossEntropy,
    Distillation,
    EwcPenalty,
    LossTerm,
    PrototypePpp,
    cross_entropy_loss_and_grad,
    distillation_loss_and_grad,
    ewc_penalty_loss_and_grad,
    loss_and_backward,
    prototype_ppp_loss_and_grad,
    softmax_T,
)
from .model import (
    DEFAULT_CONV_BLOCKS,
    BatchOutput,
    ConvBlock,
    LayoutEntry,
    ModelSpec,
    ParamVector,
    as_batch,
    backward,
    build_layout,
    forward,
    head_logits,
    init_model,
    nearest_mean_classify,
    nearest_mean_classify_batch,
)
from .optim import DEFAULT_SCHEDULE, OptimizerState, sgd_step

__all__ = [
    "DEFAULT_CONV_BLOCKS",
    "DEFAULT_SCHEDULE",
    "BatchOutput",
    "ConvBlock",
    "CrossEntropy",
    "Distillation",
    "EwcPenalty",
    "LayoutEntry",
    "LossTerm",
    "ModelSpec",
    "OptimizerState",
    "ParamVector",
    "PrototypePpp",
    "as_batch",
    "backward",
    "build_layout",
    "cross_entropy_loss_and_grad",
    "distillation_loss_and_grad",
    "ewc_penalty_loss_and_grad",
    "forward",
    "head_logits",
    "init_model",
    "load_checkpoint",
    "loss_and_backward",
    "nearest_mean_classify",
    "nearest_mean_classify_batch",
    "prototype_ppp_loss_and_grad",
    "save_checkpoint",
    "sgd_step",
    "softmax_T",
]
