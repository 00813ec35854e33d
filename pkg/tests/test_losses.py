import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsdkd.checks import random_tiny_model
from tsdkd.errors import InvalidInputError, InvalidParameterError
from tsdkd.losses import (
    ObjectiveConfig,
    baseline_loss,
    direct_loss,
    entropy_min_loss,
    gate_weights,
    indirect_loss,
    pl_log_likelihood,
    pl_value_and_grad,
    proposition1_oracle,
    rank_position,
    rescaling_factor,
    select_tokens,
    total_loss,
)
from tsdkd.numerics import finite_difference_check, generalized_jsd, softmax, token_entropy
from tsdkd.selection import CoverageHistory, uncertainty_gate


def _pair(seed, L=6, V=12, scale=2.0):
    rng = np.random.default_rng(seed)
    return rng.normal(0, scale, (L, V)), rng.normal(0, scale, (L, V))


# -- Plackett-Luce -----------------------------------------------------------

def test_pl_reference_value():
    # mpmath, 40 digits
    assert pl_log_likelihood([2.0, 0.5, -1.0, 0.3]) == pytest.approx(-2.6302887620142631609, abs=1e-14)


def test_pl_two_items_is_bradley_terry():
    a, b = 1.3, -0.4
    assert math.exp(pl_log_likelihood([a, b])) == pytest.approx(1 / (1 + math.exp(b - a)))


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_pl_normalises_over_rankings(k):
    rng = np.random.default_rng(k)
    for _ in range(100):
        s = rng.normal(0, 3, k)
        total = sum(math.exp(pl_log_likelihood(s[list(p)])) for p in itertools.permutations(range(k)))
        assert total == pytest.approx(1.0, abs=1e-9)


def test_pl_gradient():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.normal(0, 2, rng.integers(2, 10))
        assert finite_difference_check(pl_value_and_grad, s) <= 1e-6


def test_pl_rejects_single_item():
    with pytest.raises(InvalidParameterError):
        pl_log_likelihood([1.0])


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.floats(-50, 50))
def test_pl_shift_invariant(scores, delta):
    s = np.array(scores)
    assert pl_log_likelihood(s + delta) == pytest.approx(pl_log_likelihood(s), abs=1e-9)


# -- indirect ----------------------------------------------------------------

def test_indirect_uses_teacher_order_of_student_candidates():
    s = np.array([[3.0, 2.0, 1.0, 0.0]])
    t = np.array([[0.0, 5.0, 4.0, 9.0]])
    perm = rank_position(s[0], t[0], 3)
    np.testing.assert_array_equal(perm.candidate_ids, [0, 1, 2])
    np.testing.assert_array_equal(perm.ranked_ids, [1, 2, 0])
    v, _ = indirect_loss(s, t, k=3, coverage=100)
    assert v == pytest.approx(-pl_log_likelihood([2.0, 1.0, 3.0]))


def test_indirect_sums_over_opener_only():
    s, t = _pair(1)
    h = token_entropy(s)
    m = 3
    v, g = indirect_loss(s, t, k=5, opener_len=m)
    expected = sum(-pl_log_likelihood(s[i, rank_position(s[i], t[i], 5).ranked_ids]) for i in range(m))
    assert v == pytest.approx(expected)
    assert np.all(g[m:] == 0)
    assert h.shape == (6,)


def test_indirect_zero_gradient_outside_candidates():
    s, t = _pair(2, V=12)
    _, g = indirect_loss(s, t, k=4, coverage=100)
    assert np.all(np.count_nonzero(g, axis=1) <= 4)


def test_indirect_adaptive_updates_history():
    s, t = _pair(3)
    hist = CoverageHistory()
    indirect_loss(s, t, k=5, history=hist)
    assert len(hist.scores) == 1


# -- direct ------------------------------------------------------------------

def test_direct_matches_composition():
    s, t = _pair(4, L=4, V=8)
    v, _ = direct_loss(s, t, beta=0.9, tau=1.0)
    expected = np.mean([uncertainty_gate(token_entropy(s[i]), token_entropy(t[i]))
                        * generalized_jsd(softmax(t[i]), softmax(s[i]), 0.9) for i in range(4)])
    assert v == pytest.approx(expected, abs=1e-14)


def test_direct_gradient_holds_gates_fixed():
    s, t = _pair(5, L=4, V=8)
    gates = gate_weights(s, t)
    err = finite_difference_check(lambda z: direct_loss(z, t, 0.9, gates=gates), s, dtype=np.longdouble)
    assert err <= 1e-5


def test_gkd_is_direct_with_unit_gates():
    s, t = _pair(6)
    v_gkd, g_gkd = baseline_loss("gkd_jsd", s, t, beta=0.9)
    v_dir, g_dir = direct_loss(s, t, 0.9, gates=np.ones(s.shape[0]))
    assert v_gkd == pytest.approx(v_dir, abs=1e-15)
    np.testing.assert_allclose(g_gkd, g_dir, atol=1e-16)
    manual = np.mean([generalized_jsd(softmax(t[i]), softmax(s[i]), 0.9) for i in range(s.shape[0])])
    assert v_gkd == pytest.approx(manual, abs=1e-14)


def test_direct_zero_when_student_equals_teacher():
    s, _ = _pair(7)
    v, g = direct_loss(s, s)
    assert v == pytest.approx(0, abs=1e-12)
    np.testing.assert_allclose(g, 0, atol=1e-10)


# -- entropy minimisation ----------------------------------------------------

def test_entropy_min_selects_top_fraction():
    s = np.zeros((10, 4))
    s[:, 0] += 0.5 + np.arange(10)  # later rows get more confident
    v, g = entropy_min_loss(s, 0.2)
    h = token_entropy(s)
    assert v == pytest.approx(np.mean(h[:2]))
    assert set(np.flatnonzero(np.abs(g).sum(axis=1))) == {0, 1}


def test_entropy_min_gradient():
    s, _ = _pair(8)
    idx = np.array([1, 4])
    assert finite_difference_check(lambda z: entropy_min_loss(z, indices=idx), s) <= 1e-5


# -- combined ----------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0, 2), st.booleans())
def test_total_is_linear_combination(seed, alpha, adaptive):
    s, t = _pair(seed, L=5, V=10)
    cfg = ObjectiveConfig(alpha=alpha, adaptive=adaptive)
    bd, g = total_loss(s, t, cfg, history=CoverageHistory())
    assert bd.total == pytest.approx(bd.alpha * bd.indirect + bd.direct + bd.entropy_min, abs=1e-12)
    assert np.all(np.isfinite(g))
    assert bd.indirect >= 0 and bd.direct >= 0 and bd.entropy_min >= 0


def test_total_alpha_zero_drops_indirect():
    s, t = _pair(9)
    bd, g = total_loss(s, t, ObjectiveConfig(alpha=0.0))
    sel = select_tokens(s, t, ObjectiveConfig(alpha=0.0))
    _, g_dir = direct_loss(s, t, gates=sel.gates)
    _, g_em = entropy_min_loss(s, indices=sel.em_indices)
    np.testing.assert_allclose(g, g_dir + g_em)


def test_total_gradient_with_frozen_selection():
    s, t = _pair(10, L=8, V=16)
    cfg = ObjectiveConfig()
    sel = select_tokens(s, t, cfg)
    err = finite_difference_check(lambda z: (lambda bd, gr: (bd.total, gr))(*total_loss(z, t, cfg, selection=sel)),
                                  s, dtype=np.longdouble)
    assert err <= 1e-5


def test_top_k_capped_at_vocabulary():
    s, t = _pair(11, V=4)
    bd, _ = total_loss(s, t, ObjectiveConfig(top_k=10))
    assert np.isfinite(bd.total)


def test_adaptive_requires_history():
    s, t = _pair(12)
    with pytest.raises(InvalidInputError):
        select_tokens(s, t, ObjectiveConfig(adaptive=True))


@pytest.mark.parametrize("kw", [dict(alpha=-1), dict(beta=1.0), dict(tau=0), dict(top_k=1),
                                dict(coverage=0), dict(em_fraction=0)])
def test_objective_config_rejects(kw):
    with pytest.raises(InvalidParameterError):
        ObjectiveConfig(**kw)


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidInputError):
        total_loss(np.zeros((3, 4)), np.zeros((3, 5)))


# -- baselines ---------------------------------------------------------------

def test_baselines_known_values():
    s = np.zeros((2, 4))
    t = np.zeros((2, 4))
    for kind in ("forward_kl", "reverse_kl", "gkd_jsd"):
        v, g = baseline_loss(kind, s, t)
        assert v == pytest.approx(0, abs=1e-15)
    v, g = baseline_loss("sequence_ce", s, response=np.array([0, 3]))
    assert v == pytest.approx(math.log(4))


def test_baseline_rejects():
    with pytest.raises(InvalidParameterError):
        baseline_loss("nope", np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(InvalidInputError):
        baseline_loss("sequence_ce", np.zeros((1, 3)))


# -- analysis oracles --------------------------------------------------------

def test_rescaling_identity():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        hp, hq, hq2 = rng.uniform(0, 5, 3)
        ratio, closed = rescaling_factor(hp, hq, hq2)
        assert abs(ratio - closed) <= 1e-12
        if hq > hq2:
            assert closed > 1


def test_rescaling_equal_students():
    assert rescaling_factor(1.0, 2.0, 2.0) == (pytest.approx(1.0), pytest.approx(1.0))


def test_pairwise_preference_instance():
    rng = np.random.default_rng(0)
    st_, te = random_tiny_model(rng), random_tiny_model(rng)
    chk = proposition1_oracle(st_, te, [1, 2, 3], [4, 5])
    assert chk.deviation <= 1e-10
    assert chk.label_by_logit == chk.label_by_reward
    assert chk.candidates[0] != chk.candidates[1]


def test_pairwise_preference_empty_prefix():
    rng = np.random.default_rng(1)
    st_, te = random_tiny_model(rng), random_tiny_model(rng)
    chk = proposition1_oracle(st_, te, [0], [])
    assert chk.deviation <= 1e-10
