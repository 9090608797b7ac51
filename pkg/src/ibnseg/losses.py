"""Segmentation losses for m independent binary tasks, and IoU evaluation.

Logits and targets are (N, m, H, W). Targets are binary and classes may
overlap, so every class channel is its own binary problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Var, as_var

__all__ = [
    "LossConfig",
    "bce_loss",
    "dice_loss",
    "lovasz_hinge",
    "lovasz_hinge_per_task",
    "jaccard_weights",
    "lovasz_extension_oracle",
    "hybrid_loss",
    "IoUAccumulator",
    "IoUResult",
    "miou",
]

ORACLE_MAX_LEN = 12


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0  # Dice weight
    lambda2: float = 1.0  # Lovasz weight
    per_image: bool = True
    delta: str = "labels"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"loss weights must be non-negative, got {self.lambda1}, {self.lambda2}")
        if self.delta not in ("labels", "margins"):
            raise ValueError(f"delta must be 'labels' or 'margins', got {self.delta!r}")


def _check(logits: Var, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ad.ShapeError(f"logits {logits.shape} and targets {targets.shape} differ in shape")
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("targets must be binary")
    return targets


def bce_loss(logits, targets) -> Var:
    """Mean binary cross-entropy over every pixel-task slot.

    With -log(1 - sigmoid(s)) = softplus(s) and -log(sigmoid(s)) = softplus(s) - s,
    the per-slot loss is softplus(s) - y * s; no probability is ever logged.
    """
    s = as_var(logits)
    y = _check(s, targets)
    sv = s.value
    n = sv.size
    value = np.sum(np.maximum(sv, 0.0) + np.log1p(np.exp(-np.abs(sv))) - sv * y) / n

    def rule(g):
        return ((expit(sv) - y) * (g / n),)

    return ad.custom_op(value, (s,), rule)


def dice_loss(logits, targets) -> Var:
    """Per-pixel Dice term averaged over all slots; lies in [-1, 0].

    Pixels labelled 0 contribute exactly zero.
    """
    s = as_var(logits)
    y = _check(s, targets)
    p = expit(s.value)
    n = p.size
    pos = y > 0
    denom = p + y
    # y = 0 slots are exactly 0 and skipped, so an underflowed p never meets 0/0
    term = np.divide(2.0 * p * y, denom, out=np.zeros_like(p), where=pos)
    value = 0.0 - np.sum(term) / n

    def rule(g):
        d = np.divide(2.0 * y * y, denom * denom, out=np.zeros_like(p), where=pos)
        return (-(g / n) * d * p * (1.0 - p),)

    return ad.custom_op(value, (s,), rule)


def jaccard_weights(sorted_labels: np.ndarray, positives=None) -> np.ndarray:
    """Lovasz weights for rows of labels sorted by decreasing error.

    Row-wise: delta_i = 1 - (positives after i) / (positives + negatives up to i),
    then first differences. ``sorted_labels`` may be a prefix of the full
    sorted row if ``positives`` carries each full row's positive count. Rows
    without positives get all-zero weights.
    """
    y = np.asarray(sorted_labels, dtype=np.float64)
    total = y.sum(axis=1) if positives is None else np.asarray(positives, dtype=np.float64).reshape(-1)
    total = total[:, None]
    intersection = total - np.cumsum(y, axis=1)
    union = total + np.cumsum(1.0 - y, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        jac = 1.0 - intersection / union
    jac[:, 1:] = jac[:, 1:] - jac[:, :-1]
    jac[total[:, 0] == 0] = 0.0
    return jac


def _margin_weights(sorted_margins: np.ndarray, total: float) -> np.ndarray:
    # literal variant built from sorted margins instead of labels; no correctness claim
    m = np.asarray(sorted_margins, dtype=np.float64)
    after = total - np.cumsum(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        jac = 1.0 - after / (total + np.cumsum(1.0 - m))
    jac = np.nan_to_num(jac, nan=0.0, posinf=0.0, neginf=0.0)
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def _lovasz_weights(margins: np.ndarray, labels: np.ndarray, delta: str) -> np.ndarray:
    """Weight of every entry in its original position, for each row.

    Entries with margin <= 0 sort after all positive ones and are zeroed by
    the ReLU, so only the positive prefix is ordered. Ties keep index order.
    """
    weights = np.zeros_like(margins)
    positives = labels.sum(axis=1)
    for r in np.flatnonzero(positives):
        active = np.flatnonzero(margins[r] > 0)
        if not active.size:
            continue
        order = active[ad.stable_desc_order(margins[r, active])]
        if delta == "labels":
            weights[r, order] = jaccard_weights(labels[r, order][None], positives[r])[0]
        else:
            weights[r, order] = _margin_weights(margins[r, order], margins[r].sum())
    return weights


def lovasz_hinge_per_task(logits, targets, per_image: bool = True, delta: str = "labels") -> Var:
    """Lovasz hinge value of every binary task, as a rank-1 Var.

    Tasks are (image, class) pairs when ``per_image`` is set, otherwise one
    task per class over the whole batch. The sort order and the weights it
    induces are constants of the backward pass.
    """
    if delta not in ("labels", "margins"):
        raise ValueError(f"delta must be 'labels' or 'margins', got {delta!r}")
    s = as_var(logits)
    y = _check(s, targets)
    n, m, h, w = s.shape
    if per_image:
        rows = ad.reshape(s, (n * m, h * w))
        labels = y.reshape(n * m, h * w)
    else:
        rows = ad.reshape(ad.transpose(s, (1, 0, 2, 3)), (m, n * h * w))
        labels = y.transpose(1, 0, 2, 3).reshape(m, n * h * w)
    signs = np.where(labels > 0, 1.0, -1.0)
    margins = 1.0 - rows * signs
    weights = _lovasz_weights(margins.value, labels, delta)
    return ad.sum(ad.relu(margins) * weights, axes=1)


def lovasz_hinge(logits, targets, per_image: bool = True, delta: str = "labels") -> Var:
    """Lovasz hinge averaged over tasks (empty-foreground tasks count as 0)."""
    return ad.mean(lovasz_hinge_per_task(logits, targets, per_image, delta))


def lovasz_extension_oracle(m, y) -> float:
    """Lovasz extension of the Jaccard set function at ReLU(m), from its definition.

    Evaluates the set function on explicit prefix sets of the greedy order, so
    it shares no code with :func:`jaccard_weights`. Returns 0 when ``y`` has no
    positives.
    """
    m = [float(v) for v in np.asarray(m).reshape(-1)]
    y = [int(v) for v in np.asarray(y).reshape(-1)]
    if len(m) != len(y):
        raise ValueError("m and y must have equal length")
    if len(m) > ORACLE_MAX_LEN:
        raise ValueError(f"oracle supports at most {ORACLE_MAX_LEN} entries, got {len(m)}")
    positives = {i for i, v in enumerate(y) if v == 1}
    if not positives:
        return 0.0

    def jaccard_loss(mispredicted: set[int]) -> float:
        return 1.0 - len(positives - mispredicted) / len(positives | mispredicted)

    plus = [max(v, 0.0) for v in m]
    order = sorted(range(len(m)), key=lambda i: -plus[i])
    chosen: set[int] = set()
    prev = jaccard_loss(chosen)
    total = 0.0
    for i in order:
        chosen.add(i)
        cur = jaccard_loss(chosen)
        total += plus[i] * (cur - prev)
        prev = cur
    return total


def hybrid_loss(logits, targets, cfg: LossConfig = LossConfig()) -> Var:
    """(BCE + lambda1 * Dice + lambda2 * Lovasz) / (1 + lambda1 + lambda2)."""
    total = bce_loss(logits, targets)
    if cfg.lambda1:
        total = total + dice_loss(logits, targets) * cfg.lambda1
    if cfg.lambda2:
        total = total + lovasz_hinge(logits, targets, cfg.per_image, cfg.delta) * cfg.lambda2
    return total / (1.0 + cfg.lambda1 + cfg.lambda2)


# ------------------------------------------------------------------ metrics


@dataclass
class IoUResult:
    per_class: np.ndarray
    miou: float
    empty: np.ndarray  # classes whose union was empty (reported as IoU 1)


class IoUAccumulator:
    """Dataset-level intersection and union counts per class."""

    def __init__(self, num_classes: int):
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred, target) -> IoUAccumulator:
        pred = np.asarray(pred).astype(bool)
        target = np.asarray(target).astype(bool)
        if pred.shape != target.shape:
            raise ad.ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
        if pred.ndim == 3:
            pred, target = pred[None], target[None]
        axes = (0, 2, 3)
        self.intersection += np.sum(pred & target, axis=axes)
        self.union += np.sum(pred | target, axis=axes)
        return self

    def result(self) -> IoUResult:
        empty = self.union == 0
        iou = np.where(empty, 1.0, self.intersection / np.maximum(self.union, 1))
        return IoUResult(iou, float(iou.mean()), empty)


def miou(pred, target) -> IoUResult:
    pred = np.asarray(pred)
    c = pred.shape[1] if pred.ndim == 4 else pred.shape[0]
    return IoUAccumulator(c).update(pred, target).result()
