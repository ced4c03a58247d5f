"""Hybrid Dice + cross-entropy objective on class probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_dice: float = 1.0
    lambda_ce: float = 0.5
    epsilon: float = 1e-5
    tumor_classes: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        problems = []
        if self.lambda_dice < 0 or self.lambda_ce < 0:
            problems.append("loss weights must be >= 0")
        if self.epsilon <= 0:
            problems.append("epsilon must be > 0")
        if 0 in self.tumor_classes or not self.tumor_classes:
            problems.append("tumor_classes must be non-empty and exclude background (0)")
        if problems:
            raise ConfigError(problems)


def one_hot(labels: np.ndarray, num_classes: int = 4) -> np.ndarray:
    """``[B, D, H, W]`` integer labels -> ``[B, K, D, H, W]`` float one-hot."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    eye = np.eye(num_classes)
    return np.moveaxis(eye[labels], -1, 1)


def _check(p: Tensor, y: Tensor):
    if p.shape != y.shape or p.ndim < 3:
        raise ShapeError(f"probabilities {p.shape} and targets {y.shape} must match as [B, K, ...]")


def dice_loss(p: Tensor, y: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """``1 - mean_c (2 sum p_c y_c + eps) / (sum p_c + sum y_c + eps)`` over tumor classes."""
    _check(p, y)
    axes = (0,) + tuple(range(2, p.ndim))
    classes = list(cfg.tumor_classes)
    inter = ops.take(ops.sum(ops.mul(p, y), axis=axes), classes, axis=0)
    p_sum = ops.take(ops.sum(p, axis=axes), classes, axis=0)
    y_sum = ops.take(ops.sum(y, axis=axes), classes, axis=0)
    num = ops.affine_scalar(inter, 2.0, cfg.epsilon)
    den = ops.affine_scalar(ops.add(p_sum, y_sum), 1.0, cfg.epsilon)
    return ops.affine_scalar(ops.mean(ops.div(num, den)), -1.0, 1.0)


def ce_loss(p: Tensor, y: Tensor) -> Tensor:
    """Mean over voxels of ``-log p_true``; probabilities clamped at 1e-12."""
    _check(p, y)
    n_vox = p.size // p.shape[1]
    return ops.affine_scalar(ops.sum(ops.mul(ops.log(p, PROB_FLOOR), y)), -1.0 / n_vox)


def total_loss(p: Tensor, y: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    return combine(dice_loss(p, y, cfg), ce_loss(p, y), cfg)


def combine(dice: Tensor, ce: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    if cfg.lambda_ce == 0:
        return ops.affine_scalar(dice, cfg.lambda_dice)
    if cfg.lambda_dice == 0:
        return ops.affine_scalar(ce, cfg.lambda_ce)
    return ops.add(ops.affine_scalar(dice, cfg.lambda_dice), ops.affine_scalar(ce, cfg.lambda_ce))
