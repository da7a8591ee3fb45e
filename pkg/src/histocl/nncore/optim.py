"""SGD with momentum, weight decay and a stepped learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteUpdateError, ShapeMismatchError
from .model import ParamVector

DEFAULT_SCHEDULE = ((10, 0.1), (13, 0.1))


@dataclass
class OptimizerState:
    """Velocity buffer plus hyperparameters.

    ``epoch_schedule`` lists (epoch, multiplier) pairs; every pair whose
    epoch threshold is <= the current epoch contributes its multiplier to
    the effective learning rate.
    """

    velocity: np.ndarray
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epoch_schedule: tuple[tuple[int, float], ...] = DEFAULT_SCHEDULE

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @classmethod
    def for_params(cls, params: ParamVector, **kwargs) -> "OptimizerState":
        return cls(velocity=np.zeros_like(params.values), **kwargs)

    def effective_lr(self, epoch: int) -> float:
        lr = self.lr
        for threshold, mult in self.epoch_schedule:
            if threshold <= epoch:
                lr *= mult
        return lr


def sgd_step(
    params: ParamVector,
    grads: np.ndarray,
    state: OptimizerState,
    epoch: int,
) -> tuple[ParamVector, OptimizerState]:
    """One momentum-SGD update, in place on the parameter array.

    v <- momentum * v + grads + weight_decay * theta
    theta <- theta - effective_lr(epoch) * v
    """
    if grads.shape != params.values.shape:
        raise ShapeMismatchError(
            f"gradient shape {grads.shape} != parameter shape {params.values.shape}"
        )
    g = grads.astype(np.float32, copy=False)
    v = state.velocity
    v *= np.float32(state.momentum)
    v += g
    if state.weight_decay:
        v += np.float32(state.weight_decay) * params.values
    params.values -= np.float32(state.effective_lr(epoch)) * v
    if not np.isfinite(params.values).all():
        raise NonFiniteUpdateError("parameters became non-finite after SGD step")
    return params, state
