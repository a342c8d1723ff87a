from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor

DICE_EPS = 1e-5


def l1_loss(x, x_hat: Tensor) -> Tensor:
    """Mean absolute voxel difference between a target and its reconstruction."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.shape != x_hat.shape:
        raise ValueError(f"l1_loss shape mismatch {x.shape} vs {x_hat.shape}")
    return (x_hat - x).abs().mean()


def one_hot(labels: np.ndarray, num_classes: int = 4) -> np.ndarray:
    """N x D x H x W integer labels -> N x C x D x H x W float32 one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float32)
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def dice_loss(pred_probs: Tensor, target_onehot, eps: float = DICE_EPS) -> Tensor:
    """Negative soft Dice, per sample and class, averaged over both.

    Every class (background included) contributes
    -(2 sum(y*p) + eps) / (sum(y^2) + sum(p^2) + eps).
    """
    t = target_onehot.data if isinstance(target_onehot, Tensor) else np.asarray(target_onehot, np.float32)
    if pred_probs.shape != t.shape:
        raise ValueError(f"dice_loss shape mismatch {pred_probs.shape} vs {t.shape}")
    axes = tuple(range(2, pred_probs.ndim))
    inter = (pred_probs * t).sum(axes)
    denom = (pred_probs * pred_probs).sum(axes) + (t * t).sum(axis=axes) + eps
    return -((inter * 2.0 + eps) / denom).mean()


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"{n} logit rows but {labels.shape[0]} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in 0..{k - 1}")
    pick = np.zeros((n, k), dtype=logits.data.dtype)
    pick[np.arange(n), labels] = 1.0
    return -(F.log_softmax(logits) * pick).sum() * (1.0 / n)


@dataclass
class LossReport:
    l_rec: float | None
    l_seg: float | None
    l_total: float
    epoch: int = 0
    step: int = 0


def pretext_loss(rec_out, rec_target, seg_out, seg_target, tasks: str = "both") -> tuple[Tensor, LossReport]:
    """Combined pretext objective: unweighted sum of the active task losses.

    Returns the differentiable total and a report of the scalar terms; a
    task that is switched off is reported as ``None``.
    """
    terms = []
    l_rec = l_seg = None
    if tasks in ("both", "rec_only"):
        rec = l1_loss(rec_target, rec_out)
        l_rec = rec.item()
        terms.append(rec)
    if tasks in ("both", "seg_only"):
        seg = dice_loss(seg_out, seg_target)
        l_seg = seg.item()
        terms.append(seg)
    if not terms:
        raise ValueError(f"unknown pretext tasks {tasks!r}")
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return total, LossReport(l_rec, l_seg, total.item())


def combine(l_rec: float | None, l_seg: float | None) -> float:
    """Scalar version of the pretext sum, for reports assembled from parts."""
    parts = [v for v in (l_rec, l_seg) if v is not None]
    if not parts:
        return math.nan
    return float(sum(parts))
