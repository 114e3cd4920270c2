"""Classification losses with hand-derived gradients.

Three terms are combined during training: cross entropy on every proposal,
the uncertainty-weighted unknown-probability loss on mined proposals, and
the instance contrastive loss between anchor embeddings and the memory bank.
All gradients are analytic; ``gradcheck`` compares them with central
differences.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .latent_core import ClassSpace, entropy, log_softmax, softmax


class WeightingVariant(str, enum.Enum):
    IDENTITY = "identity"
    ENTROPY_OF_GT = "entropy_of_gt"
    POLYNOMIAL = "polynomial"
    POLYNOMIAL_MAXPROB = "polynomial_maxprob"
    NORMALIZED_ENTROPY = "normalized_entropy"


class DenominatorMode(str, enum.Enum):
    SUPCON = "supcon"
    AS_WRITTEN = "as_written"


@dataclass
class UPLConfig:
    alpha: float = 1.0
    beta: float = 0.5
    weighting_variant: WeightingVariant = WeightingVariant.POLYNOMIAL
    # stop the gradient through w(p_gt) and treat it as a constant
    detach_weight: bool = False

    def __post_init__(self):
        self.weighting_variant = WeightingVariant(self.weighting_variant)
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass
class ICConfig:
    tau: float = 0.1
    gamma_0: float = 0.1
    denominator_mode: DenominatorMode = DenominatorMode.SUPCON

    def __post_init__(self):
        self.denominator_mode = DenominatorMode(self.denominator_mode)
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.gamma_0 < 0:
            raise ValueError(f"gamma_0 must be >= 0, got {self.gamma_0}")


@dataclass
class LossValueWithGrad:
    value: float
    grad: np.ndarray
    skipped: bool = False


def _check_gt(gt, space: ClassSpace):
    gt = np.asarray(gt)
    if np.any(gt == space.unknown_index):
        raise ValueError(
            "ground truth may not be the unknown class during training")
    if np.any((gt < 0) | (gt >= space.num_classes)):
        raise ValueError(f"ground truth index out of range for {space}")


# ---------------------------------------------------------------- CE

def ce_loss_batch(logits, gt) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross entropy and its gradient w.r.t. the logits."""
    s = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    gt = np.atleast_1d(np.asarray(gt, dtype=np.int64))
    _check_gt(gt, ClassSpace.from_num_classes(s.shape[1]))
    rows = np.arange(len(gt))
    values = -log_softmax(s)[rows, gt]
    grad = softmax(s)
    grad[rows, gt] -= 1.0
    return values, grad


def ce_loss(logits, gt_class: int) -> LossValueWithGrad:
    values, grad = ce_loss_batch(logits, [gt_class])
    return LossValueWithGrad(float(values[0]), grad[0])


# ---------------------------------------------------------------- UP

def conditional_unknown_prob(logits, gt_class: int) -> float:
    """Softmax probability of the unknown class once the gt logit is removed."""
    s = np.asarray(logits, dtype=np.float64)
    space = ClassSpace.from_num_classes(len(s))
    _check_gt([gt_class], space)
    rest = np.delete(s, gt_class)
    u = space.unknown_index - (1 if gt_class < space.unknown_index else 0)
    return float(softmax(rest)[u])


def up_weight(p_gt: float, config: UPLConfig, probs=None) -> float:
    """Weight ``w`` applied to the unknown-probability loss.

    ``probs`` (the whole probability vector) is needed by the max-probability
    and normalized-entropy variants.
    """
    v = config.weighting_variant
    if v is WeightingVariant.IDENTITY:
        return 1.0
    if v is WeightingVariant.ENTROPY_OF_GT:
        return float(-p_gt * np.log(p_gt)) if p_gt > 0 else 0.0
    if v is WeightingVariant.POLYNOMIAL:
        return float((1.0 - p_gt) ** config.alpha * p_gt)
    if probs is None:
        raise ValueError(f"variant {v.value} needs the full probability vector")
    probs = np.asarray(probs, dtype=np.float64)
    if v is WeightingVariant.POLYNOMIAL_MAXPROB:
        pm = float(probs.max())
        return (1.0 - pm) ** config.alpha * pm
    return float(entropy(probs) / _entropy_normalizer(len(probs)))


def _entropy_normalizer(num_classes: int) -> float:
    # normalized by log of the number of known classes
    num_known = num_classes - 2
    if num_known < 2:
        raise ValueError("normalized_entropy needs at least two known classes")
    return float(np.log(num_known))


def _weight_and_grad(s, p, gt, config: UPLConfig):
    """Row-wise w and dw/ds for a batch of logits ``s`` with softmax ``p``."""
    n, C = s.shape
    rows = np.arange(n)
    v = config.weighting_variant
    if v is WeightingVariant.IDENTITY:
        return np.ones(n), np.zeros_like(s)

    if v is WeightingVariant.NORMALIZED_ENTROPY:
        norm = _entropy_normalizer(C)
        logp = log_softmax(s)
        h = -np.sum(p * logp, axis=1)
        return h / norm, -p * (logp + h[:, None]) / norm

    if v is WeightingVariant.POLYNOMIAL_MAXPROB:
        idx = np.argmax(p, axis=1)
    else:
        idx = gt
    pc = p[rows, idx]
    dpc = -pc[:, None] * p
    dpc[rows, idx] += pc
    if v is WeightingVariant.ENTROPY_OF_GT:
        logpc = log_softmax(s)[rows, idx]
        w = -pc * logpc
        return w, -(logpc + 1.0)[:, None] * dpc

    # polynomial: w = (1-p)^a p. Writing p_j = (1-p) r_j for j != c, with r the
    # softmax over the remaining classes, removes the (1-p)^(a-1) singularity.
    a = config.alpha
    masked = s.copy()
    masked[rows, idx] = -np.inf
    r = softmax(masked)
    others = p.copy()
    others[rows, idx] = 0.0
    one_minus = others.sum(axis=1)
    om_a = one_minus ** a
    w = om_a * pc
    dw = (-pc * om_a)[:, None] * p + (a * pc ** 2 * om_a)[:, None] * r
    dw[rows, idx] = pc * one_minus * om_a - a * pc ** 2 * om_a
    return w, dw


def up_loss_batch(logits, gt, config: UPLConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-row weighted unknown-probability loss and its logit gradient."""
    s = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    gt = np.atleast_1d(np.asarray(gt, dtype=np.int64))
    n, C = s.shape
    space = ClassSpace.from_num_classes(C)
    _check_gt(gt, space)
    rows = np.arange(n)
    u = space.unknown_index

    # softmax restricted to j != gt
    masked = s.copy()
    masked[rows, gt] = -np.inf
    q = softmax(masked)
    neg_log_pu = -log_softmax(masked)[:, u]
    dg = q.copy()
    dg[:, u] -= 1.0
    dg[rows, gt] = 0.0

    p = softmax(s)
    w, dw = _weight_and_grad(s, p, gt, config)
    values = w * neg_log_pu
    grad = w[:, None] * dg
    if not config.detach_weight:
        grad = grad + neg_log_pu[:, None] * dw
    return values, grad


def up_loss(logits, gt_class: int, config: UPLConfig) -> LossValueWithGrad:
    values, grad = up_loss_batch(logits, [gt_class], config)
    return LossValueWithGrad(float(values[0]), grad[0])


# ---------------------------------------------------------------- IC

def _ic_rows(z, classes, bank_vecs, bank_labels, config: ICConfig):
    """Per-anchor IC loss against flat bank arrays (columns grouped by class).

    Anchors without a same-class exemplar get value 0, zero gradient and
    ``skipped=True``.
    """
    tau = config.tau
    n = len(z)
    values = np.zeros(n)
    grads = np.zeros_like(z)
    if n == 0 or len(bank_vecs) == 0:
        return values, grads, np.ones(n, dtype=bool)
    present, starts, counts = np.unique(bank_labels, return_index=True, return_counts=True)
    if np.any(np.diff(bank_labels) < 0):
        raise ValueError("bank columns must be grouped by class")
    col = np.searchsorted(present, classes)
    col = np.minimum(col, len(present) - 1)
    ok = present[col] == classes
    skipped = ~ok
    if not np.any(ok):
        return values, grads, skipped
    z, col = z[ok], col[ok]
    rows = np.arange(len(z))
    as_written = config.denominator_mode is DenominatorMode.AS_WRITTEN
    if as_written and len(present) < 2:
        raise ValueError("as_written mode needs at least one exemplar of another class")

    sims = (z @ bank_vecs.T) / tau
    class_max = np.maximum.reduceat(sims, starts, axis=1)
    if as_written:
        class_max[rows, col] = -np.inf
    m = class_max.max(axis=1, keepdims=True)
    e = np.exp(sims - m)
    if as_written:
        e[bank_labels[None, :] == classes[ok][:, None]] = 0.0
    total = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(total[:, 0])

    # mean similarity to the positives is the similarity to their mean
    class_means = np.add.reduceat(bank_vecs, starts, axis=0) / counts[:, None]
    pos_mean = class_means[col]
    values[ok] = lse - np.sum(z * pos_mean, axis=1) / tau
    grads[ok] = ((e / total) @ bank_vecs - pos_mean) / tau
    return values, grads, skipped


def ic_loss(anchor, anchor_class: int, bank, config: ICConfig) -> LossValueWithGrad:
    """Instance contrastive loss of one unit-norm anchor embedding."""
    z = np.asarray(anchor, dtype=np.float64)[None, :]
    vecs, labels = bank.flat()
    values, grads, skipped = _ic_rows(z, np.array([anchor_class]), vecs, labels, config)
    return LossValueWithGrad(float(values[0]), grads[0], bool(skipped[0]))


def ic_loss_batch(anchors, anchor_classes, bank, config: ICConfig) -> LossValueWithGrad:
    """Mean IC loss over anchors; skipped anchors count as zero."""
    z = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    classes = np.asarray(anchor_classes, dtype=np.int64)
    if len(classes) == 0:
        return LossValueWithGrad(0.0, np.zeros((0, z.shape[1] if z.ndim == 2 else 0)), True)
    vecs, labels = bank.flat()
    values, grads, skipped = _ic_rows(z, classes, vecs, labels, config)
    n = len(classes)
    return LossValueWithGrad(float(values.sum() / n), grads / n, bool(skipped.all()))


# ---------------------------------------------------------------- joint

def gamma_at(t: int, total_iterations: int, gamma_0: float) -> float:
    """IC loss weight, decayed linearly from ``gamma_0`` to zero at ``T``."""
    if t < 0 or t > total_iterations:
        raise ValueError(f"iteration {t} outside schedule [0, {total_iterations}]")
    return gamma_0 * (1.0 - t / total_iterations)


@dataclass
class JointLoss:
    value: float
    grad_logits: np.ndarray
    grad_embeddings: np.ndarray
    ce: float
    up: float
    ic: float
    gamma_t: float
    up_weight: float
    components: dict = field(default_factory=dict)


def joint_loss(logits, gt, upl: UPLConfig, ic: ICConfig, t: int,
               total_iterations: int, warmup: int = 100, up_indices=None,
               anchors=None, anchor_classes=None, bank=None) -> JointLoss:
    """CE + beta * UP + gamma_t * IC for one mini-batch.

    CE is averaged over every row of ``logits``; UP over ``up_indices``
    (all rows when None) and only once ``t >= warmup``; IC over ``anchors``.
    """
    s = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    gt = np.asarray(gt, dtype=np.int64)
    gamma_t = gamma_at(t, total_iterations, ic.gamma_0)
    n = len(s)

    ce_vals, ce_grad = ce_loss_batch(s, gt)
    ce = float(ce_vals.mean())
    grad_logits = ce_grad / n

    up_w = upl.beta if t >= warmup else 0.0
    up = 0.0
    if up_w > 0:
        idx = np.arange(n) if up_indices is None else np.asarray(up_indices, dtype=np.int64)
        if len(idx):
            vals, g = up_loss_batch(s[idx], gt[idx], upl)
            up = float(vals.mean())
            np.add.at(grad_logits, idx, up_w * g / len(idx))

    ic_val = 0.0
    if anchors is None:
        grad_emb = np.zeros((0, 0))
    else:
        anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
        grad_emb = np.zeros_like(anchors)
        if gamma_t > 0 and bank is not None and len(anchors):
            res = ic_loss_batch(anchors, anchor_classes, bank, ic)
            ic_val = res.value
            grad_emb = gamma_t * res.grad

    value = ce + up_w * up + gamma_t * ic_val
    return JointLoss(value, grad_logits, grad_emb, ce, up, ic_val, gamma_t, up_w)
