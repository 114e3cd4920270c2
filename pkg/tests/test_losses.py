import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opendet_lab.gradcheck import central_difference, relative_error, run_gradcheck
from opendet_lab.latent_core import l2_normalize
from opendet_lab.losses import (DenominatorMode, ICConfig, UPLConfig, WeightingVariant, ce_loss,
                                conditional_unknown_prob, gamma_at, ic_loss, ic_loss_batch,
                                joint_loss, up_loss, up_weight)
from opendet_lab.memory_bank import MemoryBank, MemoryBankConfig

S = np.array([2.0, 0.0, 0.0, 0.0])  # (known, known, unknown, background)


def bank_of(per_class: dict, dim: int, num_known: int | None = None) -> MemoryBank:
    k = num_known or (max(per_class) + 1)
    bank = MemoryBank(k, dim, MemoryBankConfig(capacity=64, sample_size=64))
    for c, vecs in per_class.items():
        v = np.atleast_2d(np.asarray(vecs, dtype=float))
        bank.enqueue_arrays(v, np.full(len(v), c), np.ones(len(v)))
    return bank


def logits_and_gt(num_known=st.integers(2, 6)):
    @st.composite
    def draw(d):
        k = d(num_known)
        s = d(arrays(np.float64, k + 2, elements=st.floats(-15, 15)))
        gt = d(st.sampled_from(list(range(k)) + [k + 1]))
        return s, gt
    return draw()


# ------------------------------------------------------------------ CE

def test_ce_examples():
    assert ce_loss(S, 0).value == pytest.approx(0.3409, abs=1e-3)
    assert ce_loss(np.array([1.0, 1.0, -50, -50]), 1).value == pytest.approx(math.log(2), abs=1e-12)
    assert ce_loss(np.array([200.0, 0, 0, 0]), 0).value == pytest.approx(0.0, abs=1e-12)


def test_unknown_gt_is_rejected():
    with pytest.raises(ValueError):
        ce_loss(S, 2)
    with pytest.raises(ValueError):
        up_loss(S, 2, UPLConfig())
    with pytest.raises(ValueError):
        ce_loss(S, 7)


@given(logits_and_gt())
def test_ce_nonnegative_and_gradient_sums_to_zero(sg):
    s, gt = sg
    r = ce_loss(s, gt)
    assert r.value >= 0
    assert abs(r.grad.sum()) < 1e-12


# ------------------------------------------------------------------ UP

def test_conditional_unknown_prob_examples():
    assert conditional_unknown_prob(S, 0) == pytest.approx(1 / 3)
    assert conditional_unknown_prob(np.zeros(6), 1) == pytest.approx(1 / 5)
    assert conditional_unknown_prob(np.array([0.0, 0, 200, 0]), 3) == pytest.approx(1.0)


def test_up_weight_examples():
    cfg1, cfg2 = UPLConfig(alpha=1.0), UPLConfig(alpha=2.0)
    assert up_weight(0.0, cfg1) == 0.0 and up_weight(1.0, cfg1) == 0.0
    assert up_weight(0.5, cfg1) == pytest.approx(0.25)
    assert up_weight(0.5, cfg2) == pytest.approx(0.125)


def test_up_loss_example():
    r = up_loss(S, 0, UPLConfig(alpha=1.0))
    p = math.exp(2) / (math.exp(2) + 3)
    assert (1 - p) * p == pytest.approx(0.2054, abs=1e-4)
    assert r.value == pytest.approx(0.2257, abs=1e-3)
    assert r.value == pytest.approx((1 - p) * p * math.log(3), abs=1e-12)


def test_up_loss_vanishes_for_confident_gt():
    s = np.array([500.0, 3.0, -2.0, 7.0])
    assert up_loss(s, 0, UPLConfig()).value == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 3.0])
def test_polynomial_weight_maximum(alpha):
    cfg = UPLConfig(alpha=alpha)
    p_star = 1 / (1 + alpha)
    peak = alpha ** alpha / (1 + alpha) ** (1 + alpha)
    assert up_weight(p_star, cfg) == pytest.approx(peak, abs=1e-12)
    grid = np.linspace(0, 1, 2001)
    assert max(up_weight(p, cfg) for p in grid) <= peak + 1e-12


def test_entropy_of_gt_and_identity_weights():
    assert up_weight(0.3, UPLConfig(weighting_variant="identity")) == 1.0
    assert up_weight(0.3, UPLConfig(weighting_variant="entropy_of_gt")) == pytest.approx(-0.3 * math.log(0.3))


def test_full_vector_variants():
    probs = np.array([0.5, 0.2, 0.1, 0.1, 0.1])
    mp = UPLConfig(alpha=1.0, weighting_variant="polynomial_maxprob")
    assert up_weight(0.2, mp, probs) == pytest.approx(0.25)
    ne = UPLConfig(weighting_variant="normalized_entropy")
    h = -np.sum(probs * np.log(probs))
    assert up_weight(0.2, ne, probs) == pytest.approx(h / math.log(3))
    with pytest.raises(ValueError):
        up_weight(0.2, mp)


@given(logits_and_gt(), st.sampled_from(list(WeightingVariant)), st.floats(0, 3))
def test_up_loss_nonnegative(sg, variant, alpha):
    s, gt = sg
    assert up_loss(s, gt, UPLConfig(alpha=alpha, weighting_variant=variant)).value >= 0


@given(logits_and_gt())
def test_up_gradient_ignores_nothing_but_flows_through_weight(sg):
    s, gt = sg
    full = up_loss(s, gt, UPLConfig(detach_weight=False))
    det = up_loss(s, gt, UPLConfig(detach_weight=True))
    assert full.value == det.value
    num = central_difference(lambda v: up_loss(v, gt, UPLConfig()).value, s)
    assert relative_error(full.grad, num) < 1e-4 or np.linalg.norm(num) < 1e-9


def test_up_gradient_example_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = 3 * rng.standard_normal(6)
        cfg = UPLConfig(alpha=float(rng.uniform(0, 3)))
        num = central_difference(lambda v: up_loss(v, 1, cfg).value, s)
        assert relative_error(up_loss(s, 1, cfg).grad, num) < 1e-5


# ------------------------------------------------------------------ IC

def test_ic_examples():
    bank = bank_of({0: [[1.0, 0.0]], 1: [[0.0, 1.0]]}, 2)
    anchor = np.array([1.0, 0.0])
    sup = ic_loss(anchor, 0, bank, ICConfig(tau=1.0))
    assert sup.value == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-4)
    assert sup.value == pytest.approx(0.3133, abs=1e-4)
    lit = ic_loss(anchor, 0, bank, ICConfig(tau=1.0, denominator_mode="as_written"))
    assert lit.value == pytest.approx(-1.0, abs=1e-12)


def test_ic_decreases_toward_own_class():
    bank = bank_of({0: [[1.0, 0.0]], 1: [[0.0, 1.0]]}, 2)
    cfg = ICConfig(tau=0.5)
    vals = [ic_loss(l2_normalize(np.array([1 - a, a])), 0, bank, cfg).value for a in (0.9, 0.6, 0.3, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ic_empty_class_queue_is_skipped():
    bank = bank_of({1: [[0.0, 1.0]]}, 2, num_known=2)
    r = ic_loss(np.array([1.0, 0.0]), 0, bank, ICConfig())
    assert r.skipped and r.value == 0.0 and not np.any(r.grad)


def _ic_direct(z, c, bank, tau, mode):
    """Straight loop over positives and the chosen denominator set."""
    vals = []
    pos = bank.exemplars(c)
    for m in pos:
        if mode == "supcon":
            den = sum(math.exp(z @ v / tau) for j in range(bank.num_known) for v in bank.exemplars(j))
        else:
            den = sum(math.exp(z @ v / tau) for j in range(bank.num_known) if j != c for v in bank.exemplars(j))
        vals.append(-math.log(math.exp(z @ m / tau) / den))
    return sum(vals) / len(vals)


@given(st.integers(0, 10_000), st.sampled_from(["supcon", "as_written"]), st.floats(0.05, 2.0))
def test_ic_matches_direct_summation(seed, mode, tau):
    rng = np.random.default_rng(seed)
    K, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    bank = bank_of({c: l2_normalize(rng.standard_normal((int(rng.integers(1, 5)), d))) for c in range(K)}, d)
    z = l2_normalize(rng.standard_normal(d))
    c = int(rng.integers(0, K))
    got = ic_loss(z, c, bank, ICConfig(tau=tau, denominator_mode=mode)).value
    assert got == pytest.approx(_ic_direct(z, c, bank, tau, mode), rel=1e-9, abs=1e-9)


@given(st.integers(0, 10_000))
def test_ic_supcon_nonnegative(seed):
    rng = np.random.default_rng(seed)
    d = 3
    bank = bank_of({c: l2_normalize(rng.standard_normal((3, d))) for c in range(3)}, d)
    z = l2_normalize(rng.standard_normal(d))
    assert ic_loss(z, int(rng.integers(0, 3)), bank, ICConfig(tau=0.1)).value >= 0


def test_ic_batch_is_mean_of_rows_with_skips_as_zero():
    rng = np.random.default_rng(0)
    bank = bank_of({0: l2_normalize(rng.standard_normal((3, 4)))}, 4, num_known=2)
    z = l2_normalize(rng.standard_normal((3, 4)))
    cls = np.array([0, 1, 0])
    single = [ic_loss(z[i], cls[i], bank, ICConfig()).value for i in range(3)]
    assert ic_loss_batch(z, cls, bank, ICConfig()).value == pytest.approx(sum(single) / 3)


# ------------------------------------------------------------------ joint

def test_gamma_schedule():
    assert gamma_at(0, 1000, 0.1) == 0.1
    assert gamma_at(1000, 1000, 0.1) == 0.0
    assert gamma_at(500, 1000, 0.1) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        gamma_at(1001, 1000, 0.1)


def test_joint_warmup_gates_up_term():
    rng = np.random.default_rng(1)
    s = rng.standard_normal((6, 5))
    gt = np.array([0, 1, 2, 4, 4, 0])
    before = joint_loss(s, gt, UPLConfig(beta=1.0), ICConfig(gamma_0=0.0), t=99, total_iterations=1000)
    plain = joint_loss(s, gt, UPLConfig(beta=0.0), ICConfig(gamma_0=0.0), t=99, total_iterations=1000)
    assert before.up_weight == 0.0 and before.value == plain.value
    assert np.array_equal(before.grad_logits, plain.grad_logits)
    after = joint_loss(s, gt, UPLConfig(beta=1.0), ICConfig(gamma_0=0.0), t=100, total_iterations=1000)
    assert after.up_weight == 1.0 and after.value > plain.value


@given(st.integers(0, 10_000))
def test_joint_reduces_to_ce(seed):
    rng = np.random.default_rng(seed)
    s = 3 * rng.standard_normal((5, 6))
    gt = rng.choice([0, 1, 2, 3, 5], size=5)
    j = joint_loss(s, gt, UPLConfig(beta=0.0), ICConfig(gamma_0=0.0), t=500, total_iterations=1000)
    ce = [ce_loss(s[i], gt[i]) for i in range(5)]
    assert j.value == pytest.approx(np.mean([c.value for c in ce]), abs=1e-12)
    assert np.allclose(j.grad_logits, np.array([c.grad for c in ce]) / 5, atol=1e-15)


@given(st.integers(0, 10_000), st.floats(0, 5), st.floats(0, 1))
def test_joint_linear_in_beta_and_gamma(seed, beta, gamma_0):
    rng = np.random.default_rng(seed)
    s = 3 * rng.standard_normal((4, 5))
    gt = np.array([0, 1, 2, 4])
    bank = bank_of({c: l2_normalize(rng.standard_normal((2, 3))) for c in range(3)}, 3)
    z = l2_normalize(rng.standard_normal((2, 3)))
    kw = dict(t=300, total_iterations=1000, anchors=z, anchor_classes=[0, 2], bank=bank)
    j = joint_loss(s, gt, UPLConfig(beta=beta), ICConfig(gamma_0=gamma_0), **kw)
    assert j.value == pytest.approx(j.ce + beta * j.up + j.gamma_t * j.ic, abs=1e-12)
    assert j.gamma_t == pytest.approx(gamma_0 * 0.7)


# ------------------------------------------------------------------ gradcheck harness

def test_gradcheck_quick_run_passes():
    rows = run_gradcheck(seed=11, trials=5)
    assert rows and all(r.passed for r in rows)


def test_gradcheck_detects_sign_error():
    def broken(rng):
        s = rng.standard_normal(5)
        return relative_error(-ce_loss(s, 0).grad, central_difference(lambda v: ce_loss(v, 0).value, s))
    rows = run_gradcheck(seed=0, trials=3, checks={"ce_flipped": broken})
    assert not rows[0].passed


def test_gradcheck_zero_trials_is_empty():
    assert run_gradcheck(trials=0) == []
