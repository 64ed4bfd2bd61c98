import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from surgmamba.losses import (
    PhaseTargets,
    bce,
    ce_masked,
    confidence,
    smooth_loss,
    total_loss,
    trans_loss,
    transition_target,
)
from surgmamba.model import ModelOutputs

E_HALF = math.exp(-0.5)


def targets(labels, mask=None):
    return PhaseTargets.from_labels(torch.tensor(labels), None if mask is None else torch.tensor(mask),
                                    dtype=torch.float64)


def brute_force_target(labels, sl=2.0, sr=12.0):
    T = len(labels)
    changes = [t for t in range(1, T) if labels[t] != labels[t - 1]]
    g = [0.0] * T
    for t in range(T):
        for ts in changes:
            s = sl if t < ts else sr
            g[t] = max(g[t], math.exp(-0.5 * ((t - ts) / s) ** 2))
    return np.array(g)


# --- cross-entropy ----------------------------------------------------------------

def test_uniform_ce_is_log_c():
    probs = torch.full((6, 7), 1 / 7, dtype=torch.float64)
    assert float(ce_masked(probs, targets([0, 1, 2, 3, 4, 5]), 0.0)) == pytest.approx(math.log(7), rel=1e-12)


def test_perfect_prediction_ce_is_zero():
    labels = [0, 2, 1, 1]
    probs = torch.nn.functional.one_hot(torch.tensor(labels), 3).double()
    assert float(ce_masked(probs, targets(labels), 0.0)) == pytest.approx(0.0, abs=1e-12)


def test_ce_matches_per_frame_formula(gen):
    probs = torch.softmax(torch.randn(9, 5, generator=gen, dtype=torch.float64), -1)
    labels = [0, 1, 2, 3, 4, 0, 1, 2, 3]
    mask = [1, 1, 0, 1, 1, 1, 0, 1, 1]
    eps = 0.1
    total = 0.0
    for t in range(9):
        if mask[t]:
            q = np.full(5, eps / 5)
            q[labels[t]] += 1 - eps
            total += -float(np.sum(q * np.log(probs[t].numpy())))
    expect = total / sum(mask)
    assert float(ce_masked(probs, targets(labels, mask), eps)) == pytest.approx(expect, rel=1e-12)


def test_empty_mask_gives_zero_with_warning():
    probs = torch.full((3, 4), 0.25, dtype=torch.float64)
    with pytest.warns(RuntimeWarning):
        assert float(ce_masked(probs, targets([0, 1, 2], [0, 0, 0]))) == 0.0


# --- smoothness --------------------------------------------------------------------

def test_confidence_bounds():
    assert float(confidence(torch.full((4,), 0.25))) == pytest.approx(0.0, abs=1e-7)
    assert float(confidence(torch.tensor([1.0, 0.0, 0.0, 0.0]))) == pytest.approx(1.0)


def test_constant_distribution_has_no_smoothness_cost(gen):
    p = torch.softmax(torch.randn(1, 4, generator=gen, dtype=torch.float64), -1).expand(6, 4)
    assert float(smooth_loss(p, torch.ones(6))) == 0.0
    assert float(smooth_loss(torch.full((6, 4), 0.25, dtype=torch.float64), torch.ones(6))) == 0.0


def test_smoothness_hand_computed():
    p = torch.tensor([[0.9, 0.05, 0.05], [0.05, 0.9, 0.05]], dtype=torch.float64)
    ln3 = math.log(3)
    ent = -(0.9 * math.log(0.9) + 2 * 0.05 * math.log(0.05))
    c = 1 - ent / ln3
    kl = 0.9 * math.log(0.9 / 0.05) + 0.05 * math.log(0.05 / 0.9)
    assert float(smooth_loss(p, torch.ones(2))) == pytest.approx(c * c * kl, rel=1e-12)


def test_smoothness_skips_pairs_touching_padding():
    p = torch.tensor([[0.9, 0.1], [0.1, 0.9], [0.1, 0.9]], dtype=torch.float64)
    with pytest.warns(RuntimeWarning):  # no valid adjacent pair left
        assert float(smooth_loss(p, torch.tensor([1.0, 0.0, 1.0]))) == 0.0
    only_last = smooth_loss(p, torch.tensor([0.0, 1.0, 1.0]))
    assert float(only_last) == 0.0  # frames 1 and 2 are identical


# --- transition target --------------------------------------------------------------

def test_asymmetric_bump_values():
    labels = [0] * 30 + [1] * 30
    g = transition_target(labels)
    assert g[30] == 1.0
    assert abs(g[28] - E_HALF) < 1e-9
    assert abs(g[42] - E_HALF) < 1e-9
    assert g[28] == pytest.approx(0.6065306597, abs=1e-9)


def test_close_transitions_take_pointwise_max():
    labels = [0] * 20 + [1] * 4 + [2] * 20
    g = transition_target(labels)
    one = transition_target([0] * 20 + [1] * 24)
    two = transition_target([1] * 24 + [2] * 20)
    np.testing.assert_array_equal(g, np.maximum(one, two))


@given(st.lists(st.integers(0, 3), min_size=1, max_size=60))
def test_target_matches_brute_force(labels):
    np.testing.assert_allclose(transition_target(labels), brute_force_target(labels), atol=1e-15)


def test_previous_clip_label_marks_frame_zero():
    assert transition_target([1, 1, 1])[0] == 0.0
    assert transition_target([1, 1, 1], prev_label=0)[0] == 1.0


# --- intensity BCE and total ----------------------------------------------------------

def test_bce_at_target_is_binary_entropy():
    g = torch.tensor(transition_target([0] * 10 + [1] * 10), dtype=torch.float64)
    tg = PhaseTargets(torch.zeros(20, dtype=torch.long), torch.ones(20, dtype=torch.float64), g)
    lam = g.clamp(1e-12, 1 - 1e-12).expand(3, 20)
    p = g.clamp(1e-8, 1 - 1e-8)
    ent = -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean()
    assert float(trans_loss(lam, tg)) == pytest.approx(float(ent), abs=1e-9)


def test_bce_clamps_extremes():
    assert torch.isfinite(bce(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))).all()


def test_total_weights(gen):
    logits = torch.randn(12, 4, generator=gen, dtype=torch.float64)
    lam = torch.rand(2, 12, generator=gen, dtype=torch.float64)
    out = ModelOutputs(logits, lam, [])
    tg = targets([0] * 6 + [1] * 6)
    only_ce = total_loss(out, tg, w_sm=0.0, w_trans=0.0)
    assert float(only_ce.total) == float(only_ce.ce)
    full = total_loss(out, tg)
    assert (full.w_sm, full.w_trans) == (1.0, 1.0)
    assert float(full.total) == pytest.approx(float(full.ce + full.smooth + full.trans), rel=1e-14)
    assert set(full.as_floats()) == {"ce", "smooth", "trans", "total"}
