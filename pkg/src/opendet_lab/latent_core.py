"""Numeric primitives shared by the losses, the toy model and the evaluator.

Class index layout used everywhere in the package: known classes occupy
``0..K-1``, the merged unknown class is ``K`` and background is ``K+1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateVectorError(ValueError):
    """A zero-norm vector reached an operation that needs a direction."""


@dataclass(frozen=True)
class ClassSpace:
    num_known: int

    def __post_init__(self):
        if self.num_known < 1:
            raise ValueError(f"num_known must be positive, got {self.num_known}")

    @property
    def unknown_index(self) -> int:
        return self.num_known

    @property
    def background_index(self) -> int:
        return self.num_known + 1

    @property
    def num_classes(self) -> int:
        return self.num_known + 2

    @classmethod
    def from_num_classes(cls, num_classes: int) -> "ClassSpace":
        return cls(num_classes - 2)

    def is_known(self, index: int) -> bool:
        return 0 <= index < self.num_known


@dataclass
class ClassifierWeights:
    """One weight vector per class (rows) plus the cosine scale factor."""

    weights: np.ndarray
    scale: float = 20.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a (num_classes, dim) matrix")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def _norms(x: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise DegenerateVectorError(f"zero-norm {what} vector")
    return n


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` (or every row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries in vector")
    return v / _norms(v, "input")


def cosine_logits(features, weights: ClassifierWeights) -> np.ndarray:
    """Scaled cosine similarity of ``features`` against every class weight.

    ``features`` may be a single vector or a batch of row vectors; the result
    has a trailing axis of size ``num_classes``.
    """
    f = np.asarray(features, dtype=np.float64)
    w = weights.weights
    if f.shape[-1] != w.shape[1]:
        raise ValueError(
            f"feature dim {f.shape[-1]} does not match weight dim {w.shape[1]}")
    fn = f / _norms(f, "feature")
    wn = w / _norms(w, "weight")
    cos = fn @ wn.T
    return weights.scale * np.clip(cos, -1.0, 1.0)


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis using max subtraction.

    ``-inf`` entries are allowed and produce exact zeros (masked classes);
    NaN and ``+inf`` are rejected.
    """
    s = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(s)) or np.any(s == np.inf):
        raise ValueError("softmax input contains NaN or +inf")
    m = np.max(s, axis=-1, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise ValueError("softmax input has no finite logit")
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    s = np.asarray(logits, dtype=np.float64)
    m = np.max(s, axis=-1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=-1, keepdims=True))


def entropy(p) -> np.ndarray | float:
    """Shannon entropy in nats over the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    h = -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h
