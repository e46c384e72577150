import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bimu.uncertainty import (
    PredictionSet,
    entropy,
    roc_auc,
    score,
    score_batch,
    vr_true,
    vr_true_batch,
)


def random_sets(np_rng, n, K, C, sharpness=3.0):
    z = np_rng.normal(size=(K, n, C)) * sharpness
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    return p / p.sum(axis=-1, keepdims=True)


def auc_rank(a, b):
    """Mann-Whitney statistic: P(out > in) + P(tie) / 2."""
    a = np.asarray(a)[:, None]
    b = np.asarray(b)[None, :]
    return float(((b > a).sum() + 0.5 * (b == a).sum()) / (a.size * b.size))


def test_prediction_set_validation():
    with pytest.raises(ValueError):
        PredictionSet(np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        PredictionSet(np.array([[0.6, 0.6]]))
    with pytest.raises(ValueError):
        PredictionSet(np.array([[1.2, -0.2]]))
    v = PredictionSet([[0.25, 0.75], [0.5, 0.5]])
    assert (v.K, v.C) == (2, 2)


def test_identical_uniform_vectors():
    C = 4
    r = score(PredictionSet(np.full((5, C), 1 / C)))
    assert r.predictive == pytest.approx(math.log(C), abs=1e-15)
    assert r.aleatoric == pytest.approx(math.log(C), abs=1e-15)
    assert abs(r.epistemic) < 1e-15


def test_confident_disagreement_is_epistemic():
    # two one-hot members pointing at different classes
    r = score(PredictionSet([[1.0, 0.0], [0.0, 1.0]]))
    assert r.aleatoric == 0.0
    assert r.predictive == pytest.approx(math.log(2))
    assert r.epistemic == pytest.approx(math.log(2))
    assert r.vr == 0.5


def test_entropy_zero_log_zero():
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2))


def test_vr_counts_and_ties():
    v = PredictionSet([[0.9, 0.1, 0.0]] * 8 + [[0.1, 0.9, 0.0]] * 2)
    r = score(v)
    assert r.vr == 0.2
    assert r.mode_class == 0
    tie = score(PredictionSet([[0.1, 0.9], [0.9, 0.1]]))
    assert tie.mode_class == 0  # lowest class wins ties


def test_vr_is_exact_multiple_of_one_over_k(np_rng):
    probs = random_sets(np_rng, 500, 10, 5)
    vr = score_batch(probs)["vr"]
    assert np.array_equal(vr * 10, np.round(vr * 10))
    assert np.all(vr[vr * 10 == 2] >= 0.2)


def test_decomposition_on_random_sets(np_rng):
    for K, C in ((1, 2), (5, 10), (20, 3)):
        s = score_batch(random_sets(np_rng, 2000, K, C))
        assert np.max(np.abs(s["predictive"] - s["aleatoric"] - s["epistemic"])) < 1e-9
        assert np.min(s["epistemic"]) >= -1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_epistemic_nonnegative_property(K, C, seed):
    s = score_batch(random_sets(np.random.default_rng(seed), 4, K, C, sharpness=10.0))
    assert np.all(s["epistemic"] >= -1e-9)
    assert np.all(s["predictive"] <= math.log(C) + 1e-12)


def test_batch_matches_single(np_rng):
    probs = random_sets(np_rng, 6, 4, 3)
    s = score_batch(probs)
    for i in range(6):
        r = score(PredictionSet(probs[:, i]))
        assert r.predictive == s["predictive"][i]
        assert r.vr == s["vr"][i]
        assert r.mode_class == s["mode_class"][i]


def test_vr_true():
    v = PredictionSet([[0.9, 0.1]] * 3 + [[0.2, 0.8]])
    assert vr_true(v, 0) == 0.25
    assert vr_true(v, 1) == 0.75
    with pytest.raises(ValueError):
        vr_true(v, 2)
    assert np.array_equal(vr_true_batch(v.vectors[:, None, :], [1]), [0.75])


def test_score_batch_shape_check():
    with pytest.raises(ValueError):
        score_batch(np.ones((3, 2)))


# --- ROC-AUC ---------------------------------------------------------------------------


def test_auc_perfect_and_reversed():
    assert roc_auc([0.0, 0.1, 0.2], [0.8, 0.9, 1.0]) == pytest.approx(1.0)
    assert roc_auc([0.8, 0.9, 1.0], [0.0, 0.1, 0.2]) == pytest.approx(0.0, abs=1e-12)


def test_auc_identical_scores_is_half():
    assert roc_auc([0.3] * 10, [0.3] * 7) == pytest.approx(0.5)


def test_auc_matches_rank_oracle(np_rng):
    worst = 0.0
    for _ in range(100):
        n_in, n_out = np_rng.integers(50, 400, size=2)
        shift = np_rng.uniform(-1, 2)
        a = np_rng.normal(size=n_in)
        b = np_rng.normal(size=n_out) * np_rng.uniform(0.5, 2) + shift
        worst = max(worst, abs(roc_auc(a, b, 1000) - auc_rank(a, b)))
    assert worst < 2e-3


def test_auc_on_discrete_scores(np_rng):
    # VR-style scores: many ties on a grid of multiples of 1/K
    for _ in range(20):
        a = np_rng.integers(0, 6, size=300) / 10
        b = np_rng.integers(2, 11, size=300) / 10
        assert roc_auc(a, b) == pytest.approx(auc_rank(a, b), abs=2e-3)


def test_auc_errors():
    with pytest.raises(ValueError):
        roc_auc([], [1.0])
    with pytest.raises(ValueError):
        roc_auc([1.0], [2.0], thresholds=1)
