"""Regular, marginal and exclusion losses with analytic logit gradients.

All losses take per-pixel probabilities of shape ``(..., N)`` (every leading
axis is treated as a pixel axis) and integer targets of shape ``(...)``.
They return a :class:`LossReport` whose gradient is taken with respect to
the pre-softmax logits, so it can be chained straight into a model.

Cross-entropy terms are averaged over pixels. Dice terms use batch soft
Dice: numerator and denominator are summed over every pixel first, giving
one ratio per class, and the per-class terms are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from partialseg.errors import NonFiniteInput, SpaceMismatch
from partialseg.label_space import ExclusionMap, MergePartition

DICE_SMOOTH = 1e-5
PROB_FLOOR = 1e-12
EXCLUSION_CE_EPS = 1.0

TERM_NAMES = ("rce", "rdice", "mce", "mdice", "ece", "edice")


@dataclass
class LossReport:
    value: float
    gradient: np.ndarray
    terms: dict = field(default_factory=dict)

    def __add__(self, other: "LossReport") -> "LossReport":
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms.get(k, 0.0) + v
        return LossReport(self.value + other.value, self.gradient + other.gradient, terms)

    def scaled(self, w: float) -> "LossReport":
        return LossReport(w * self.value, w * self.gradient, {k: w * v for k, v in self.terms.items()})


@dataclass(frozen=True)
class LossWeights:
    """Weights for :func:`combined_loss`.

    ``marginal_weight:exclusion_weight`` is the mLoss:eLoss ratio applied to
    partially labeled samples; ``regular_weight`` scales the loss of fully
    labeled samples. ``ce_dice_mix`` weights the CE and Dice member of each
    family.
    """

    marginal_weight: float = 1.0
    exclusion_weight: float = 2.0
    regular_weight: float = 1.0
    ce_dice_mix: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "ce_dice_mix", tuple(float(x) for x in self.ce_dice_mix))
        vals = (self.marginal_weight, self.exclusion_weight, self.regular_weight) + self.ce_dice_mix
        if len(self.ce_dice_mix) != 2:
            raise ValueError("ce_dice_mix must be a pair")
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"loss weights must be finite and non-negative: {vals}")
        if not any(vals[:3]) or not any(self.ce_dice_mix):
            raise ValueError("loss weights cannot all be zero")

    @classmethod
    def from_ratio(cls, ratio: str, **kw) -> "LossWeights":
        """Build from an ``"m:e"`` string such as ``"1:2"``."""
        m, e = (float(x) for x in ratio.split(":"))
        return cls(marginal_weight=m, exclusion_weight=e, **kw)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise NonFiniteInput("logits contain NaN or inf")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain dL/dp through the softmax: dL/da_j = p_j (g_j - sum_k p_k g_k)."""
    return probs * (grad_probs - (probs * grad_probs).sum(axis=-1, keepdims=True))


def marginal_prob(probs: np.ndarray, partition: MergePartition) -> np.ndarray:
    """q_m = sum of p_n over the classes n merged into group m."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != partition.space.num_classes:
        raise SpaceMismatch(
            f"probabilities have {probs.shape[-1]} classes, partition expects "
            f"{partition.space.num_classes}"
        )
    return probs @ partition.membership().T


def _flatten(probs, target, num_labels):
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target)
    if probs.shape[:-1] != target.shape:
        raise SpaceMismatch(f"probs {probs.shape} and target {target.shape} disagree on pixels")
    if not np.issubdtype(target.dtype, np.integer):
        raise SpaceMismatch(f"target must hold integer labels, got {target.dtype}")
    t = target.reshape(-1).astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= num_labels):
        raise SpaceMismatch(f"target labels must lie in [0, {num_labels})")
    return probs.reshape(-1, probs.shape[-1]), t


def _one_hot(t, k):
    out = np.zeros((t.size, k))
    out[np.arange(t.size), t] = 1.0
    return out


def _soft_dice(x, y):
    """Sum over columns of 1 - soft DSC and its derivative w.r.t. ``x``."""
    inter = (x * y).sum(axis=0)
    denom = y.sum(axis=0) + x.sum(axis=0) + DICE_SMOOTH
    num = 2.0 * inter + DICE_SMOOTH
    value = float(np.sum(1.0 - num / denom))
    grad = -2.0 * y / denom + num / denom**2
    return value, grad


def regular_ce(probs: np.ndarray, target: np.ndarray) -> LossReport:
    shape = np.shape(probs)
    p, t = _flatten(probs, target, shape[-1])
    rows = np.arange(t.size)
    value = float(np.mean(-np.log(np.maximum(p[rows, t], PROB_FLOOR))))
    grad = p.copy()
    grad[rows, t] -= 1.0
    grad /= t.size
    return LossReport(value, grad.reshape(shape), {"rce": value})


def regular_dice(probs: np.ndarray, target: np.ndarray) -> LossReport:
    shape = np.shape(probs)
    p, t = _flatten(probs, target, shape[-1])
    value, dp = _soft_dice(p, _one_hot(t, shape[-1]))
    return LossReport(value, softmax_backward(p, dp).reshape(shape), {"rdice": value})


def marginal_ce(probs: np.ndarray, target: np.ndarray, partition: MergePartition) -> LossReport:
    """Cross-entropy on merged probabilities.

    For a pixel whose merged label is group g, the logit gradient is
    ``p_j (1 - 1/q_g)`` for classes j inside g and ``p_j`` elsewhere.
    """
    shape = np.shape(probs)
    q = marginal_prob(probs, partition)
    p, t = _flatten(probs, target, partition.num_groups)
    q = q.reshape(-1, partition.num_groups)
    q_true = q[np.arange(t.size), t]
    value = float(np.mean(-np.log(np.maximum(q_true, PROB_FLOOR))))
    in_group = partition.lookup[None, :] == t[:, None]
    # p_j / q <= 1 for j in the group, so only q == 0 (total underflow) needs a guard
    ratio = np.divide(p, q_true[:, None], out=np.zeros_like(p), where=q_true[:, None] > 0)
    grad = p - np.where(in_group, ratio, 0.0)
    grad /= t.size
    return LossReport(value, grad.reshape(shape), {"mce": value})


def marginal_dice(probs: np.ndarray, target: np.ndarray, partition: MergePartition) -> LossReport:
    shape = np.shape(probs)
    q = marginal_prob(probs, partition)
    p, t = _flatten(probs, target, partition.num_groups)
    q = q.reshape(-1, partition.num_groups)
    value, dq = _soft_dice(q, _one_hot(t, partition.num_groups))
    dp = dq @ partition.membership()
    return LossReport(value, softmax_backward(p, dp).reshape(shape), {"mdice": value})


def _exclusion_targets(target, exmap, partition):
    if partition is None:
        return exmap.matrix().astype(np.float64), exmap.space.num_classes
    return exmap.merged_matrix(partition), partition.num_groups


def exclusion_dice(
    probs: np.ndarray,
    target: np.ndarray,
    exmap: ExclusionMap,
    partition: MergePartition | None = None,
) -> LossReport:
    """Dice-style overlap between predictions and excluded classes.

    ``target`` is global when ``partition`` is None, otherwise merged under
    ``partition`` (merged-background pixels then carry no exclusion).
    """
    shape = np.shape(probs)
    if shape[-1] != exmap.space.num_classes:
        raise SpaceMismatch("probabilities and exclusion map disagree on class count")
    table, num_labels = _exclusion_targets(target, exmap, partition)
    p, t = _flatten(probs, target, num_labels)
    e = table[t]
    overlap = (e * p).sum(axis=0)
    denom = e.sum(axis=0) + p.sum(axis=0) + DICE_SMOOTH
    value = float(np.sum(2.0 * overlap / denom))
    dp = 2.0 * e / denom - 2.0 * overlap / denom**2
    return LossReport(value, softmax_backward(p, dp).reshape(shape), {"edice": value})


def exclusion_ce(
    probs: np.ndarray,
    target: np.ndarray,
    exmap: ExclusionMap,
    partition: MergePartition | None = None,
) -> LossReport:
    """Mean over pixels of sum_n e_n log(p_n + 1); zero iff no excluded mass."""
    shape = np.shape(probs)
    if shape[-1] != exmap.space.num_classes:
        raise SpaceMismatch("probabilities and exclusion map disagree on class count")
    table, num_labels = _exclusion_targets(target, exmap, partition)
    p, t = _flatten(probs, target, num_labels)
    e = table[t]
    value = float(np.sum(e * np.log(p + EXCLUSION_CE_EPS)) / t.size)
    dp = e / (p + EXCLUSION_CE_EPS) / t.size
    return LossReport(value, softmax_backward(p, dp).reshape(shape), {"ece": value})


def combined_loss(
    logits: np.ndarray,
    target: np.ndarray,
    descriptor,
    weights: LossWeights,
    exmap: ExclusionMap | None = None,
) -> LossReport:
    """Dispatch on provenance: regular losses for fully labeled data,
    weighted marginal + exclusion losses for partially labeled data.

    ``descriptor`` is a :class:`MergePartition` or any object with a
    ``partition`` attribute; ``target`` lives in that partition's space.
    """
    partition = descriptor if isinstance(descriptor, MergePartition) else descriptor.partition
    probs = softmax(logits)
    w_ce, w_dice = weights.ce_dice_mix
    parts: list[LossReport] = []

    def add(w, fn, *args):
        if w > 0:
            parts.append(fn(probs, target, *args).scaled(w))

    if partition.is_identity:
        add(weights.regular_weight * w_ce, regular_ce)
        add(weights.regular_weight * w_dice, regular_dice)
    else:
        if exmap is None:
            exmap = ExclusionMap.full(partition.space)
        add(weights.marginal_weight * w_ce, marginal_ce, partition)
        add(weights.marginal_weight * w_dice, marginal_dice, partition)
        add(weights.exclusion_weight * w_ce, exclusion_ce, exmap, partition)
        add(weights.exclusion_weight * w_dice, exclusion_dice, exmap, partition)

    total = LossReport(0.0, np.zeros(probs.shape), {k: 0.0 for k in TERM_NAMES})
    for part in parts:
        total = total + part
    return total
