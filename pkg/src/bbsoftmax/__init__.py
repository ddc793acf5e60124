"""Training engine for softmax-family losses over overlapping label baskets."""

from .losses import (
    Classifier,
    LossConfig,
    Method,
    similarity_g,
    target_f,
    unified_loss,
    unified_loss_grad,
)
from .baskets import (
    LabelSpace,
    MiningSchedule,
    NegativeMask,
    bbs_loss,
    bbs_loss_grad,
    build_label_space,
    full_negatives_mask,
    ignored_count,
    mining_mask,
    own_basket_mask,
    schedule_ratio,
)

__all__ = [
    "Classifier",
    "LossConfig",
    "Method",
    "similarity_g",
    "target_f",
    "unified_loss",
    "unified_loss_grad",
    "LabelSpace",
    "MiningSchedule",
    "NegativeMask",
    "bbs_loss",
    "bbs_loss_grad",
    "build_label_space",
    "full_negatives_mask",
    "ignored_count",
    "mining_mask",
    "own_basket_mask",
    "schedule_ratio",
]
