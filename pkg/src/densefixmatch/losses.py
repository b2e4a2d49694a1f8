"""Training objective, consistency-weight warm-up, EMA teacher and SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .autodiff import Tensor, add, masked_ce, scale
from .model import ParamSet

LOSS_CSV_COLUMNS = ("step", "L_s", "L_u", "lambda_t", "total", "valid_pixel_fraction")


def supervised_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over labeled samples of the per-sample mean CE on valid pixels.

    Takes raw class scores; the cross-entropy of the softmax is taken
    internally. Samples with no valid pixel are dropped from the mean.
    """
    return masked_ce(logits, labels)


def consistency_loss(strong_logits: Tensor, matched_pls: np.ndarray) -> Tensor:
    """Same reduction as :func:`supervised_loss`, against matched pseudo-labels.

    The targets are integer arrays, so nothing flows back into whatever
    produced them.
    """
    return masked_ce(strong_logits, matched_pls)


def lambda_schedule(step: int, warmup_steps: int, lambda_max: float) -> float:
    if warmup_steps < 0:
        raise ValueError("warmup_steps must be >= 0")
    if warmup_steps == 0 or step >= warmup_steps:
        return float(lambda_max)
    z = 10.0 * step / warmup_steps - 5.0
    return float(lambda_max) / (1.0 + math.exp(-z))


def total_loss(l_s, l_u, lambda_t: float):
    if isinstance(l_s, Tensor) or isinstance(l_u, Tensor):
        return add(l_s, scale(l_u, lambda_t))
    return l_s + lambda_t * l_u


@dataclass
class LossBreakdown:
    L_s: float
    L_u: float
    lambda_t: float
    total: float
    valid_pixel_fraction: float
    no_labeled_pixels: bool = False

    def row(self, step: int) -> list:
        return [step, self.L_s, self.L_u, self.lambda_t, self.total, self.valid_pixel_fraction]


@dataclass
class TeacherState:
    params: ParamSet
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.decay}")


def ema_update(teacher: TeacherState, student: ParamSet) -> TeacherState:
    teacher.params.check_compatible(student)
    m = teacher.decay
    arrays = {
        k: (m * v + (1.0 - m) * student.arrays[k]).astype(v.dtype)
        for k, v in teacher.params.arrays.items()
    }
    return TeacherState(ParamSet(teacher.params.spec, arrays), m)


def sgd_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[Mapping[str, np.ndarray]] = None,
) -> tuple[ParamSet, dict]:
    """Heavy-ball SGD with decoupled weight decay.

    v <- momentum * v + g;  theta <- theta - lr * v - lr * weight_decay * theta
    """
    new, new_v = {}, {}
    for name, theta in params.arrays.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        v = g if velocity is None else momentum * velocity[name] + g
        new_v[name] = np.asarray(v, dtype=theta.dtype)
        new[name] = (theta - lr * new_v[name] - (lr * weight_decay) * theta).astype(theta.dtype)
    return ParamSet(params.spec, new), new_v
