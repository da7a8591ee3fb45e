"""Continual-learning strategies and their memory structures."""

from .base import Batch, Finetune, Joint, Strategy, TrainContext, rng_for
from .memory import (
    BalancedBuffer,
    EpisodicBuffer,
    ExemplarMemory,
    PrototypeStore,
    herding_select,
    update_prototype,
)
from .methods import (
    AGEM,
    STRATEGY_DEFAULTS,
    CoPE,
    EWC,
    FisherDiag,
    ICaRL,
    LwF,
    OnlineEWC,
    agem_project,
    compute_fisher,
    make_strategy,
)

__all__ = [
    "AGEM",
    "STRATEGY_DEFAULTS",
    "BalancedBuffer",
    "Batch",
    "CoPE",
    "EWC",
    "EpisodicBuffer",
    "ExemplarMemory",
    "Finetune",
    "FisherDiag",
    "ICaRL",
    "Joint",
    "LwF",
    "OnlineEWC",
    "PrototypeStore",
    "Strategy",
    "TrainContext",
    "agem_project",
    "compute_fisher",
    "herding_select",
    "make_strategy",
    "rng_for",
    "update_prototype",
]
