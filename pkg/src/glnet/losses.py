"""Focal loss and the per-phase composite training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class LossConfig:
    """Focusing exponent, coupling coefficient, and per-term weights."""

    gamma: float = 6.0
    lam: float = 0.15
    weight_main: float = 1.0
    weight_local_aux: float = 1.0
    weight_global_aux: float = 1.0

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lam must be non-negative")
        if min(self.weight_main, self.weight_local_aux, self.weight_global_aux) <= 0:
            raise ValueError("loss weights must be positive")


def focal_loss(logits, target, gamma: float = 6.0) -> Tensor:
    """Mean focal loss over pixels.

    Accepts (H, W, K) or (N, H, W, K) logits with matching integer targets;
    class probabilities come from a softmax over the trailing axis.
    """
    t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    return ag.focal_from_logits(t, np.asarray(target), gamma)


def phase1_objective(global_logits, target_lr, cfg: LossConfig) -> Tensor:
    """Coarse-branch warmup: focal loss on downsampled pairs."""
    return focal_loss(global_logits, target_lr, cfg.gamma)


def phase2_objective(
    local_logits,
    agg_logits,
    target_hr,
    global_last_tap,
    local_last_tap,
    cfg: LossConfig,
) -> Tensor:
    """Fine-branch objective: main + auxiliary focal terms plus the coupling penalty.

    The coarse-side last tap enters as a constant, so the penalty pushes only
    the fine branch toward the shared representation.
    """
    aux = ag.scale(focal_loss(local_logits, target_hr, cfg.gamma), cfg.weight_local_aux)
    main = ag.scale(focal_loss(agg_logits, target_hr, cfg.gamma), cfg.weight_main)
    total = ag.add(aux, main)
    if cfg.lam > 0:
        ref = global_last_tap.data if isinstance(global_last_tap, Tensor) else np.asarray(global_last_tap)
        x = local_last_tap if isinstance(local_last_tap, Tensor) else Tensor(np.asarray(local_last_tap))
        if x.data.shape != ref.shape:
            raise ValueError("last-tap shapes differ in coupling penalty")
        total = ag.add(total, ag.scale(ag.frobenius_distance(x, ref), cfg.lam))
    return total


def phase3_objective(global_logits_at_patch, agg_logits, target_hr, cfg: LossConfig) -> Tensor:
    """Coarse-branch refinement objective, both terms against the patch target.

    The coarse logits are expected already mapped into the patch frame
    (cropped at the patch location and upsampled).
    """
    aux = ag.scale(focal_loss(global_logits_at_patch, target_hr, cfg.gamma), cfg.weight_global_aux)
    main = ag.scale(focal_loss(agg_logits, target_hr, cfg.gamma), cfg.weight_main)
    return ag.add(aux, main)
