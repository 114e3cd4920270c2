"""Finite-difference verification of every analytic gradient in the package."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latent_core import l2_normalize
from .losses import (DenominatorMode, ICConfig, UPLConfig, WeightingVariant, ce_loss, ic_loss,
                     up_loss)
from .memory_bank import MemoryBank, MemoryBankConfig
from .trainer import (PARAM_ORDER, ProposalBatch, ToyModel, TrainerConfig, compute_batch_loss)

STEP = 1e-5
TOLERANCE = 1e-4


def central_difference(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + step
        fp = f(x)
        x[i] = old - step
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def _random_logits(rng, num_known):
    return 3.0 * rng.standard_normal(num_known + 2)


def _random_gt(rng, num_known):
    # any known class or background, never unknown
    c = int(rng.integers(0, num_known + 1))
    return num_known + 1 if c == num_known else c


def check_ce(rng) -> float:
    K = int(rng.integers(2, 8))
    s, gt = _random_logits(rng, K), _random_gt(rng, K)
    return relative_error(ce_loss(s, gt).grad, central_difference(lambda v: ce_loss(v, gt).value, s))


def make_up_check(variant: WeightingVariant):
    def check(rng) -> float:
        K = int(rng.integers(2, 8))
        s, gt = _random_logits(rng, K), _random_gt(rng, K)
        cfg = UPLConfig(alpha=float(rng.uniform(0.0, 3.0)), weighting_variant=variant)
        return relative_error(up_loss(s, gt, cfg).grad,
                              central_difference(lambda v: up_loss(v, gt, cfg).value, s))
    return check


def _random_bank(rng, num_known, dim, per_class):
    bank = MemoryBank(num_known, dim, MemoryBankConfig(capacity=max(per_class, 1), sample_size=max(per_class, 1)))
    for c in range(num_known):
        z = l2_normalize(rng.standard_normal((per_class, dim)))
        bank.enqueue_arrays(z, np.full(per_class, c), np.ones(per_class))
    return bank


def make_ic_check(mode: DenominatorMode):
    def check(rng) -> float:
        K, d = int(rng.integers(2, 5)), int(rng.integers(2, 9))
        bank = _random_bank(rng, K, d, int(rng.integers(1, 6)))
        cfg = ICConfig(tau=float(rng.uniform(0.1, 1.0)), denominator_mode=mode)
        z = l2_normalize(rng.standard_normal(d))
        c = int(rng.integers(0, K))
        return relative_error(ic_loss(z, c, bank, cfg).grad,
                              central_difference(lambda v: ic_loss(v, c, bank, cfg).value, z))
    return check


def check_joint_model(rng) -> float:
    """Whole-model gradient of the joint loss on a frozen batch, bank and mining."""
    K, D = 3, 3
    cfg = TrainerConfig(total_iterations=50, warmup_iterations=5, hidden_dim=6, latent_dim=5,
                        head_hidden_dim=5, embed_dim=4,
                        upl=UPLConfig(alpha=float(rng.uniform(0.5, 2.0)), beta=0.5),
                        ic=ICConfig(tau=0.5, gamma_0=0.3),
                        bank=MemoryBankConfig(capacity=8, sample_size=4, memory_iou=0.7, batch_iou=0.5))
    model = ToyModel.initialize(D, K, cfg, rng)
    for k in ("b0", "b1", "c1", "c2"):
        # nonzero biases keep every ReLU layer away from an all-dead output
        model.params[k] = 0.5 * rng.standard_normal(model.params[k].shape)
    bank = _random_bank(rng, K, cfg.embed_dim, 3)
    n = 10
    labels = np.concatenate([rng.integers(0, K, size=7), np.full(3, K + 1)])
    batch = ProposalBatch(2.0 * rng.standard_normal((n, D)), labels,
                          np.concatenate([rng.uniform(0.5, 1.0, 7), rng.uniform(0.0, 0.3, 3)]),
                          labels < K)
    t = int(rng.integers(cfg.warmup_iterations, cfg.total_iterations))
    up_idx = np.array([0, 1, 7, 8])
    _, grads, _ = compute_batch_loss(model, bank, batch, cfg, t, up_indices=up_idx)

    shapes = [(k, model.params[k].shape) for k in PARAM_ORDER]
    flat0 = np.concatenate([model.params[k].ravel() for k in PARAM_ORDER])

    def loss(flat):
        m = model.copy()
        off = 0
        for k, shp in shapes:
            size = int(np.prod(shp))
            m.params[k] = flat[off:off + size].reshape(shp)
            off += size
        return compute_batch_loss(m, bank, batch, cfg, t, up_indices=up_idx)[0].value

    analytic = np.concatenate([grads[k].ravel() for k in PARAM_ORDER])
    return relative_error(analytic, central_difference(loss, flat0))


def default_checks() -> dict:
    checks = {"ce": check_ce}
    for v in WeightingVariant:
        checks[f"up[{v.value}]"] = make_up_check(v)
    for m in DenominatorMode:
        checks[f"ic[{m.value}]"] = make_ic_check(m)
    checks["joint[model]"] = check_joint_model
    return checks


@dataclass
class GradcheckRow:
    name: str
    trials: int
    max_relative_error: float
    passed: bool


def run_gradcheck(seed: int = 0, trials: int = 100, checks: dict | None = None,
                  tolerance: float = TOLERANCE) -> list[GradcheckRow]:
    if trials <= 0:
        return []
    checks = default_checks() if checks is None else checks
    rows = []
    for i, (name, fn) in enumerate(checks.items()):
        rng = np.random.default_rng([seed, i])
        worst = max(fn(rng) for _ in range(trials))
        rows.append(GradcheckRow(name, trials, worst, bool(worst < tolerance)))
    return rows


def format_table(rows: list[GradcheckRow]) -> str:
    lines = [f"{'loss':<28}{'trials':>8}{'max rel err':>14}  status"]
    for r in rows:
        lines.append(f"{r.name:<28}{r.trials:>8}{r.max_relative_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
