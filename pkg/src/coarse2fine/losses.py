"""Training losses: focal, BCE plus Dice, and label-smoothed cross entropy.

All losses take probabilities or logits as Tensors, run on the tape, and
return scalar Tensors. Probabilities are clamped to [eps, 1 - eps] with
eps = 1e-7 before any log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

CLAMP_EPS = 1e-7
IGNORE_INDEX = 255


@dataclass(frozen=True)
class LossWeights:
    """Total loss mixing weights: coarse, refine, final."""

    lambda_c: float = 0.05
    lambda_r: float = 0.2
    lambda_f: float = 1.0

    def __post_init__(self):
        for name in ("lambda_c", "lambda_r", "lambda_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def _check_binary_pair(pred: Tensor, target: Tensor, op: str) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"{op}: pred {pred.shape} vs target {target.shape}")
    t = target.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError(f"{op}: target must be binary 0/1")


def focal_loss(pred: Tensor, target: Tensor, gamma: float = 2.0, alpha_bal: float = 0.25) -> Tensor:
    """Mean of -alpha_t * (1 - p_t)^gamma * log(p_t).

    p_t is pred where target is 1 and 1 - pred otherwise; alpha_t is
    alpha_bal on positives and 1 - alpha_bal on negatives. gamma = 0 and
    alpha_bal = 0.5 reduce it to half the usual BCE.
    """
    _check_binary_pair(pred, target, "focal_loss")
    gamma = float(gamma)
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if not 0.0 <= alpha_bal <= 1.0:
        raise ValueError(f"alpha_bal must sit in [0, 1], got {alpha_bal}")
    p = nx.clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    t = target
    one_m_t = nx.sub(1.0, t)
    pt = nx.add(nx.mul(t, p), nx.mul(one_m_t, nx.sub(1.0, p)))
    at = nx.add(nx.mul(t, alpha_bal), nx.mul(one_m_t, 1.0 - alpha_bal))
    focus = nx.power(nx.sub(1.0, pt), gamma)
    per_elem = nx.mul(nx.mul(at, focus), nx.log(pt))
    return nx.mul(nx.reduce_mean(per_elem), -1.0)


def bce_dice_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Equal-weight sum of mean BCE and soft Dice with additive smoothing.

    Dice uses global sums over every element: 1 - (2 * sum(p * t) + s) /
    (sum(p) + sum(t) + s).
    """
    _check_binary_pair(pred, target, "bce_dice_loss")
    p = nx.clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    t = target
    bce_terms = nx.add(nx.mul(t, nx.log(p)), nx.mul(nx.sub(1.0, t), nx.log(nx.sub(1.0, p))))
    bce = nx.mul(nx.reduce_mean(bce_terms), -1.0)

    inter = nx.reduce_sum(nx.mul(p, t))
    denom = nx.add(nx.add(nx.reduce_sum(p), nx.reduce_sum(t)), float(smooth))
    dice = nx.sub(1.0, nx.div(nx.add(nx.mul(inter, 2.0), float(smooth)), denom))
    return nx.add(bce, dice)


def ce_label_smoothing(
    logits: Tensor,
    labels: np.ndarray,
    eps_smooth: float = 0.1,
    ignore_index: int = IGNORE_INDEX,
) -> Tensor:
    """Label-smoothed cross entropy over B x K x H x W logits.

    labels is an integer B x H x W map; entries equal to ignore_index are
    excluded from the mean. The smoothed target puts 1 - eps_smooth on the
    true class and eps_smooth / K everywhere (standard uniform smoothing).
    With no valid pixels the loss is exactly 0.
    """
    if logits.ndim != 4:
        raise ShapeError(f"logits must be B x K x H x W, got {logits.shape}")
    if not 0.0 <= eps_smooth < 1.0:
        raise ValueError(f"eps_smooth must sit in [0, 1), got {eps_smooth}")
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    b, k, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits grid {(b, h, w)}")
    valid = labels != ignore_index
    if np.any((labels < 0) & valid) or np.any((labels >= k) & valid):
        raise ValueError(f"labels must sit in [0, {k}) or equal {ignore_index}")

    x = nx.transpose(logits, (0, 2, 3, 1))                       # B x H x W x K
    mx = nx.reduce_max(x, axis=-1, keepdims=True)
    shifted = nx.sub(x, mx)
    lse = nx.log(nx.reduce_sum(nx.exp(shifted), axis=-1, keepdims=True))
    logp = nx.sub(shifted, lse)

    safe = np.where(valid, labels, 0)
    onehot = np.zeros((b, h, w, k), dtype=logits.data.dtype)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    q = (1.0 - eps_smooth) * onehot + eps_smooth / k
    q *= valid[..., None]

    count = int(valid.sum())
    if count == 0:
        return nx.mul(nx.reduce_sum(logp), 0.0)
    per_pixel = nx.reduce_sum(nx.mul(logp, Tensor(q, dtype=logits.dtype)))
    return nx.mul(per_pixel, -1.0 / count)


def total_loss(coarse, refine, final, weights: LossWeights = LossWeights()) -> Tensor:
    """lambda_c * coarse + lambda_r * refine + lambda_f * final."""
    out = None
    for term, lam in ((coarse, weights.lambda_c), (refine, weights.lambda_r),
                      (final, weights.lambda_f)):
        part = nx.mul(nx.as_tensor(term), float(lam))
        out = part if out is None else nx.add(out, part)
    return out
