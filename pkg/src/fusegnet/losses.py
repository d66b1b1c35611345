"""Dice, focal and the equally weighted hybrid segmentation loss.

All three take probability maps (post-sigmoid) and binary targets of the same
shape and reduce over every pixel of the batch.
"""
from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError

LOG_CLIP = 1e-7


@dataclass(frozen=True)
class LossSettings:
    gamma: float = 2.0
    alpha: float = 0.25
    smooth_eps: float = 1.0
    dice_weight: float = 1.0
    focal_weight: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.smooth_eps <= 0:
            raise ConfigError(f"smooth_eps must be > 0, got {self.smooth_eps}")
        if self.dice_weight < 0 or self.focal_weight < 0:
            raise ConfigError("loss weights must be non-negative")


def _check(pred: torch.Tensor, gt: torch.Tensor):
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(gt.shape)}")
    with torch.no_grad():
        if pred.numel() and (pred.min() < 0 or pred.max() > 1):
            raise ValueError("predictions must be probabilities in [0, 1]")
        if not torch.all((gt == 0) | (gt == 1)):
            raise ValueError("targets must be binary {0, 1}")


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, s: LossSettings = LossSettings()) -> torch.Tensor:
    _check(pred, gt)
    gt = gt.to(pred.dtype)
    intersection = (pred * gt).sum()
    dsc = (2 * intersection + s.smooth_eps) / (pred.sum() + gt.sum() + s.smooth_eps)
    return 1 - dsc


def focal_loss(pred: torch.Tensor, gt: torch.Tensor, s: LossSettings = LossSettings()) -> torch.Tensor:
    """Mean of ``-alpha * (1 - p_t)**gamma * log(p_t)`` over all pixels.

    ``alpha`` weights both classes equally, so ``gamma=0, alpha=1`` is plain
    binary cross-entropy.
    """
    _check(pred, gt)
    gt = gt.to(pred.dtype)
    p = pred.clamp(LOG_CLIP, 1 - LOG_CLIP)
    p_t = torch.where(gt == 1, p, 1 - p)
    return (-s.alpha * (1 - p_t) ** s.gamma * torch.log(p_t)).mean()


def hybrid_loss(pred: torch.Tensor, gt: torch.Tensor, s: LossSettings = LossSettings()) -> torch.Tensor:
    return s.dice_weight * dice_loss(pred, gt, s) + s.focal_weight * focal_loss(pred, gt, s)
