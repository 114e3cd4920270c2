"""Uncertainty-guided selection of proposals for the unknown-probability loss."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .latent_core import entropy


class MiningMethod(str, enum.Enum):
    MAX_ENTROPY = "max_entropy"
    MIN_MAX_PROBABILITY = "min_max_probability"
    RANDOM = "random"


class MiningMode(str, enum.Enum):
    BALANCED_FG_BG = "balanced_fg_bg"
    FG_ONLY = "fg_only"
    ALL = "all"


@dataclass
class MiningConfig:
    k: int = 3
    method: MiningMethod = MiningMethod.MIN_MAX_PROBABILITY
    mode: MiningMode = MiningMode.BALANCED_FG_BG

    def __post_init__(self):
        self.method = MiningMethod(self.method)
        self.mode = MiningMode(self.mode)
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


def uncertainty_order(probs: np.ndarray, method: MiningMethod) -> np.ndarray:
    """Indices sorted from most to least uncertain; ties go to the lower index."""
    if method is MiningMethod.MAX_ENTROPY:
        key = -entropy(probs)
    elif method is MiningMethod.MIN_MAX_PROBABILITY:
        key = probs.max(axis=1)
    else:
        raise ValueError(f"{method} has no uncertainty order")
    return np.argsort(key, kind="stable")


def _pick(pool: np.ndarray, count: int, probs, method, rng) -> np.ndarray:
    count = min(count, len(pool))
    if count == 0:
        return pool[:0]
    if method is MiningMethod.RANDOM:
        return np.sort(rng.choice(pool, size=count, replace=False))
    return pool[uncertainty_order(probs[pool], method)[:count]]


def mine_hard_examples(probs, is_foreground, config: MiningConfig, seed=None) -> np.ndarray:
    """Indices of the proposals selected for the unknown-probability loss.

    Foreground picks come first, then background picks, each in selection
    order. ``seed`` may be an int or a ``numpy.random.Generator`` and is only
    consulted by the random method.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    fg_mask = np.asarray(is_foreground, dtype=bool)
    fg = np.flatnonzero(fg_mask)
    bg = np.flatnonzero(~fg_mask)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k, method = config.k, config.method

    if config.mode is MiningMode.FG_ONLY:
        return _pick(fg, k, probs, method, rng)
    if config.mode is MiningMode.ALL:
        return np.concatenate([fg, _pick(bg, len(fg), probs, method, rng)])
    return np.concatenate([_pick(fg, k, probs, method, rng), _pick(bg, k, probs, method, rng)])


def mine_proposals(proposals, probs, config: MiningConfig, seed=None) -> list:
    idx = mine_hard_examples(probs, [p.is_foreground for p in proposals], config, seed)
    return [proposals[i] for i in idx]
