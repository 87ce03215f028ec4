"""Metrics, batched evaluation vs environment rollouts, t statistics."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as scipy_stats
from scipy.special import betainc as scipy_betainc

from skipdqn.agent import QNetwork
from skipdqn.env import EnvMode, rollout
from skipdqn.evaluation import (EvalReport, confidence_interval, evaluate,
                                maa, paired_t_test,
                                regularized_incomplete_beta, split_session,
                                student_t_cdf, student_t_ppf)
from skipdqn.schema import SchemaError


def test_maa_oracle_values():
    assert maa([1, 0, 1, 1]) == pytest.approx((1 + 0 + 2/3 + 3/4) / 4,
                                              abs=1e-15)
    assert maa([1] * 7) == 1.0
    assert maa([0] * 7) == 0.0
    assert maa([1]) == 1.0


def test_maa_input_validation():
    with pytest.raises(ValueError):
        maa([])
    with pytest.raises(ValueError):
        maa([0.5, 1.0])


def test_split_session_second_half():
    assert split_session(10) == (6, 7, 8, 9, 10)
    assert split_session(11) == (7, 8, 9, 10, 11)
    assert split_session(20) == tuple(range(11, 21))
    assert split_session(2) == (2,)
    with pytest.raises(ValueError):
        split_session(1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=30))
def test_maa_bounded_and_flip_monotone(bits):
    value = maa(bits)
    assert 0.0 <= value <= 1.0
    if 1 in bits:
        flipped = list(bits)
        flipped[flipped.index(1)] = 0
        assert maa(flipped) < value  # losing a correct guess always hurts


def test_evaluate_equals_env_rollout(small_corpus):
    """Batched evaluation must reproduce greedy EVAL-mode traversals."""
    net = QNetwork(70, (16, 16), rng=np.random.default_rng(4),
                   dtype=np.float64)
    report = evaluate(net, small_corpus.sessions, small_corpus.encoder)
    for k, session in enumerate(small_corpus.sessions):
        policy = lambda s: int(np.argmax(net.forward(s)))
        transitions = rollout(policy, session, small_corpus.encoder,
                              EnvMode.EVAL)
        correct = [t.reward for t in transitions]
        first = math.ceil(len(session) / 2)
        assert report.maa_scores[k] == pytest.approx(maa(correct[first:]),
                                                     abs=1e-12)
        assert report.fpa_scores[k] == correct[first]
    assert report.mean_maa == pytest.approx(float(report.maa_scores.mean()))


def test_evaluate_rejects_width_mismatch(small_corpus):
    net = QNetwork(57, (8,), rng=np.random.default_rng(0))
    with pytest.raises(SchemaError, match="width"):
        evaluate(net, small_corpus.sessions, small_corpus.encoder)


def test_evaluate_rejects_empty(small_corpus):
    net = QNetwork(70, (8,), rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        evaluate(net, [], small_corpus.encoder)


def test_eval_report_json_round_trip(small_corpus):
    net = QNetwork(70, (8,), rng=np.random.default_rng(1))
    report = evaluate(net, small_corpus.sessions[:5], small_corpus.encoder)
    doc = report.to_json()
    back = EvalReport.from_json(doc)
    assert back.mean_maa == report.mean_maa
    assert back.session_ids == report.session_ids
    assert np.array_equal(back.fpa_scores, report.fpa_scores)


# ---------------------------------------------------------------------------
# statistics against the scipy oracle

def test_incomplete_beta_matches_scipy():
    worst = 0.0
    for a in (0.5, 1.0, 2.5, 7.0, 40.0, 150.0):
        for b in (0.5, 1.3, 5.0, 22.0):
            for x in np.linspace(0.001, 0.999, 67):
                mine = regularized_incomplete_beta(float(x), a, b)
                ref = float(scipy_betainc(a, b, x))
                worst = max(worst, abs(mine - ref) / max(abs(ref), 1e-12))
    assert worst < 1e-10


def test_incomplete_beta_edges_and_validation():
    assert regularized_incomplete_beta(0.0, 2.0, 3.0) == 0.0
    assert regularized_incomplete_beta(1.0, 2.0, 3.0) == 1.0
    with pytest.raises(ValueError):
        regularized_incomplete_beta(1.5, 2.0, 3.0)
    with pytest.raises(ValueError):
        regularized_incomplete_beta(0.5, -1.0, 3.0)


def test_t_cdf_matches_scipy():
    for dof in (1, 2, 5, 30, 200):
        for t in np.linspace(-8, 8, 33):
            assert student_t_cdf(float(t), dof) == pytest.approx(
                scipy_stats.t.cdf(t, dof), abs=1e-12)


def test_t_ppf_matches_scipy():
    for dof in (1, 3, 10, 50):
        for q in (0.6, 0.9, 0.95, 0.975, 0.995):
            assert student_t_ppf(q, dof) == pytest.approx(
                scipy_stats.t.ppf(q, dof), rel=1e-9, abs=1e-9)
    assert student_t_ppf(0.025, 7) == pytest.approx(-student_t_ppf(0.975, 7))


def test_confidence_interval_oracle():
    lo, hi = confidence_interval([0.80, 0.82, 0.84])
    tcrit = scipy_stats.t.ppf(0.975, 2)
    half = tcrit * np.std([0.80, 0.82, 0.84], ddof=1) / np.sqrt(3)
    assert (hi - lo) / 2 == pytest.approx(half, rel=1e-9)
    assert (lo + hi) / 2 == pytest.approx(0.82)


def test_confidence_interval_degenerate_and_validation():
    assert confidence_interval([0.5, 0.5, 0.5]) == (0.5, 0.5)
    with pytest.raises(ValueError):
        confidence_interval([1.0])
    with pytest.raises(ValueError):
        confidence_interval([1.0, 2.0], level=1.0)


def test_paired_t_oracle_values():
    a = np.array([0.9, 1.0, 0.95, 1.05])
    b = a - np.array([0.1, 0.2, 0.15, 0.25])
    r = paired_t_test(a, b)
    ref = scipy_stats.ttest_rel(a, b)
    assert r.t_statistic == pytest.approx(float(ref.statistic), abs=1e-10)
    assert r.p_value == pytest.approx(float(ref.pvalue), abs=1e-12)
    assert r.dof == 3
    assert r.mean_diff == pytest.approx(0.175)
    assert not r.degenerate


def test_paired_t_degenerate_cases():
    same = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert same.degenerate and same.t_statistic == 0.0 and same.p_value == 1.0
    shifted = paired_t_test([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
    assert shifted.degenerate and shifted.p_value == 0.0
    assert shifted.t_statistic == math.inf


def test_paired_t_validation():
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=12),
       st.integers(0, 10**6))
def test_paired_t_antisymmetric(xs, seed):
    rng = np.random.default_rng(seed)
    ys = [x + float(rng.normal()) for x in xs]
    fwd = paired_t_test(xs, ys)
    rev = paired_t_test(ys, xs)
    assert fwd.t_statistic == pytest.approx(-rev.t_statistic, rel=1e-9,
                                            abs=1e-12)
    assert fwd.p_value == pytest.approx(rev.p_value, rel=1e-9, abs=1e-12)
