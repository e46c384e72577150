import math

import numpy as np
import pytest

from bimu.binnet import (
    IDENTITY,
    RBG,
    SIGN_HARDTANH,
    NetworkSpec,
    activate,
    activation_grad,
    backward,
    forward,
    grad_from_sample,
    grad_lambda_mc,
    loss_ce,
    mc_predictive,
)
from bimu.numkit import RngStream
from bimu.posterior import BernoulliPosterior, sample_relaxed

from gradcheck import check


def small_post(spec, rng, scale=1.0):
    return BernoulliPosterior([rng.normal(size=s) * scale for s in spec.weight_shapes])


# --- NetworkSpec / forward-----------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec((4,))
    with pytest.raises(ValueError):
        NetworkSpec((4, 0, 2))
    with pytest.raises(ValueError):
        NetworkSpec((4, 2), activation="relu")
    with pytest.raises(ValueError):
        NetworkSpec((4, 2), rbg_width=0.0)
    spec = NetworkSpec((784, 100, 10))
    assert spec.weight_shapes == [(100, 784), (10, 100)]
    assert spec.n_weights == 79400
    assert NetworkSpec((784, 100, 10), bias=True).n_params == 79400 + 110


def test_identity_hand_sum():
    spec = NetworkSpec((2, 1), activation=IDENTITY, output_scale=1.0)
    logits, tape = forward(spec, [np.ones((1, 2))], np.array([1.0, 1.0]))
    assert logits.shape == (1,)
    assert logits[0] == 2.0
    assert len(tape.pres) == 1


def test_sign_of_zero_is_zero():
    assert activate(SIGN_HARDTANH, np.array([0.0]))[0] == 0.0
    assert np.array_equal(activate(SIGN_HARDTANH, np.array([-2.0, 3.0])), [-1.0, 1.0])


def test_rbg_examples():
    out = activate(RBG, np.array([0.2, 1.0, -1.0, -0.2, 5.0]), a=1.0)
    assert np.array_equal(out, [0.0, 1.0, 1.0, 0.0, 1.0])


def test_srbg_piecewise():
    x = np.array([-2.0, -1.0, -0.2, 0.2, 1.0, 2.0])
    assert np.allclose(activate(RBG, x, 1.0, surrogate=True), [1.0, 1.0, 0.0, 0.0, 1.0, 1.0])
    assert np.allclose(activation_grad(RBG, x, 1.0), [0, -1, 0, 0, 1, 0])


def test_sign_backward_uses_hardtanh_mask():
    x = np.array([-1.5, -1.0, -0.3, 0.0, 1.0, 1.0001])
    assert np.array_equal(activation_grad(SIGN_HARDTANH, x), [0, 1, 1, 1, 1, 0])


def test_forward_shape_errors():
    spec = NetworkSpec((3, 2))
    with pytest.raises(ValueError):
        forward(spec, [np.ones((2, 3))], np.ones(4))
    with pytest.raises(ValueError):
        forward(spec, [np.ones((3, 2))], np.ones(3))
    with pytest.raises(ValueError):
        forward(spec, [np.ones((2, 3)), np.ones((2, 2))], np.ones(3))


def test_forward_batch_matches_single(np_rng):
    spec = NetworkSpec((5, 4, 3), activation=SIGN_HARDTANH)
    W = [np.sign(np_rng.normal(size=s)) for s in spec.weight_shapes]
    X = np_rng.normal(size=(6, 5))
    batch, _ = forward(spec, W, X)
    for i in range(6):
        single, _ = forward(spec, W, X[i])
        assert np.array_equal(single, batch[i])


def test_hidden_scaling_by_fan_in():
    spec = NetworkSpec((4, 1, 2), activation=IDENTITY, output_scale=3.0)
    _, tape = forward(spec, [np.ones((1, 4)), np.ones((2, 1))], np.ones(4))
    assert tape.pres[0][0, 0] == pytest.approx(4 / 2)
    assert tape.pres[1][0, 0] == pytest.approx(2 * 3.0)


# --- loss -----------------------------------------------------------------------


@pytest.mark.parametrize("C", [2, 3, 10])
def test_uniform_logits_loss_is_log_c(C):
    loss, grad = loss_ce(np.zeros(C), 0)
    assert loss == pytest.approx(math.log(C), abs=1e-15)
    assert abs(grad.sum()) < 1e-15


def test_confident_loss():
    loss, _ = loss_ce(np.array([10.0, 0.0]), 0)
    assert loss == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
    assert loss == pytest.approx(4.54e-5, rel=1e-3)


def test_loss_nonneg_and_gradient_sums_to_zero(np_rng):
    for _ in range(50):
        z = np_rng.normal(size=7) * 20
        y = int(np_rng.integers(7))
        loss, grad = loss_ce(z, y)
        assert loss >= 0
        assert abs(grad.sum()) < 1e-12


def test_loss_label_range():
    with pytest.raises(ValueError):
        loss_ce(np.zeros(3), 3)
    with pytest.raises(ValueError):
        loss_ce(np.zeros(1), 0)


def test_backward_matches_finite_difference_on_weights(np_rng):
    # plain real-valued weights, identity activations: ordinary backprop check
    spec = NetworkSpec((5, 4, 3), activation=IDENTITY, output_scale=0.5)
    W = [np_rng.normal(size=s) for s in spec.weight_shapes]
    x = np_rng.normal(size=5)
    logits, tape = forward(spec, W, x)
    _, dl = loss_ce(logits, 2)
    dW, _ = backward(spec, tape, dl)
    h = 1e-6
    for l in range(2):
        for idx in np.ndindex(W[l].shape):
            Wp = [w.copy() for w in W]
            Wm = [w.copy() for w in W]
            Wp[l][idx] += h
            Wm[l][idx] -= h
            fd = (loss_ce(forward(spec, Wp, x)[0], 2)[0] - loss_ce(forward(spec, Wm, x)[0], 2)[0]) / (2 * h)
            assert dW[l][idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


# --- gradient w.r.t. lambda -----------------------------------------------------------


@pytest.mark.parametrize("activation", [IDENTITY, SIGN_HARDTANH, RBG])
@pytest.mark.parametrize("seed", [0, 7])
def test_lambda_gradient_finite_difference(activation, seed):
    rel, small_abs, n = check(activation, seed=seed)
    assert n == 8 * 4 + 4 * 3
    assert rel < 1e-4
    assert small_abs < 1e-7


def test_lambda_gradient_at_other_temperature():
    rel, small_abs, _ = check(SIGN_HARDTANH, seed=3, T=0.5)
    assert rel < 1e-4 and small_abs < 1e-7


def test_grad_mc_equals_sample_path(np_rng):
    # grad_lambda_mc draws the same noise words as sample_relaxed with the same stream
    spec = NetworkSpec((6, 5, 3), activation=SIGN_HARDTANH)
    post = BernoulliPosterior([np_rng.normal(size=s) for s in spec.weight_shapes])
    x = np_rng.normal(size=6)
    fast = grad_lambda_mc(spec, post, x, 1, K=4, T=1.0, rng=RngStream(5))
    sample = sample_relaxed(post, 1.0, RngStream(5), k=4)
    ref = grad_from_sample(spec, post, sample, x, 1)
    assert fast.loss == pytest.approx(ref.loss, rel=1e-12)
    for a, b in zip(fast.grads, ref.grads):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-14)


def test_grad_mc_deterministic(np_rng):
    spec = NetworkSpec((6, 5, 3))
    post = small_post(spec, np_rng)
    x = np_rng.normal(size=6) * 3
    a = grad_lambda_mc(spec, post, x, 0, 5, 1.0, RngStream(9))
    b = grad_lambda_mc(spec, post, x, 0, 5, 1.0, RngStream(9))
    for ga, gb in zip(a.grads, b.grads):
        assert np.array_equal(ga, gb)
    assert a.loss == b.loss


def test_grad_shapes_and_finite(np_rng):
    spec = NetworkSpec((6, 5, 3))
    post = small_post(spec, np_rng)
    g = grad_lambda_mc(spec, post, np_rng.normal(size=6), 2, 3, 1.0, RngStream(1))
    assert [a.shape for a in g.grads] == spec.weight_shapes
    assert all(np.isfinite(a).all() for a in g.grads)
    assert g.loss >= 0


def test_saturated_posterior_has_vanishing_gradient(np_rng):
    spec = NetworkSpec((6, 5, 3), activation=SIGN_HARDTANH)
    post = BernoulliPosterior([np.sign(np_rng.normal(size=s)) * 40.0 for s in spec.weight_shapes])
    g = grad_lambda_mc(spec, post, np_rng.normal(size=6), 0, 3, 1.0, RngStream(2))
    assert max(np.abs(a).max() for a in g.grads) < 1e-20


def test_omega_zero_chain_factor_is_one():
    # lam + delta = 0 gives omega = 0, so dL/dlam equals dL/domega there
    spec = NetworkSpec((2, 2), activation=IDENTITY)
    post = BernoulliPosterior([np.array([[0.3, -0.2], [0.1, 0.5]])])
    sample = sample_relaxed(post, 1.0, RngStream(0))
    sample.delta[0] = -post.lam[0]
    sample.omega[0] = np.tanh(post.lam[0] + sample.delta[0])
    x = np.array([1.0, -2.0])
    g = grad_from_sample(spec, post, sample, x, 0).grads[0]
    logits, tape = forward(spec, sample.omega, x)
    dW, _ = backward(spec, tape, loss_ce(logits, 0)[1])
    assert np.allclose(g, dW[0])


def test_grad_mc_rejects_bad_k(np_rng):
    spec = NetworkSpec((3, 2))
    post = small_post(spec, np_rng)
    with pytest.raises(ValueError):
        grad_lambda_mc(spec, post, np.ones(3), 0, 0, 1.0, RngStream(0))


# --- predictive -------------------------------------------------------------------------


def test_mc_predictive_single_sums_to_one(np_rng):
    spec = NetworkSpec((6, 5, 4))
    post = small_post(spec, np_rng)
    v = mc_predictive(spec, post, np_rng.normal(size=6), 1, RngStream(3))
    assert v.shape == (1, 4)
    assert abs(v.sum() - 1.0) < 1e-12


def test_mc_predictive_saturated_identical(np_rng):
    spec = NetworkSpec((6, 5, 4), activation=SIGN_HARDTANH)
    post = BernoulliPosterior([np.sign(np_rng.normal(size=s)) * 1e3 for s in spec.weight_shapes])
    v = mc_predictive(spec, post, np_rng.normal(size=6), 8, RngStream(3))
    assert np.all(v == v[0])


def test_mc_predictive_flat_posterior_disagrees(np_rng):
    spec = NetworkSpec((10, 20, 5), activation=SIGN_HARDTANH)
    post = BernoulliPosterior([np.zeros(s) for s in spec.weight_shapes])
    v = mc_predictive(spec, post, np_rng.normal(size=10), 100, RngStream(4))
    assert len(set(v.argmax(axis=1).tolist())) >= 2


def test_mc_predictive_batch_matches_single(np_rng):
    spec = NetworkSpec((6, 5, 4))
    post = small_post(spec, np_rng)
    X = np_rng.normal(size=(7, 6)) * 2
    batch = mc_predictive(spec, post, X, 3, RngStream(8), chunk=3)
    assert batch.shape == (3, 7, 4)
    for i in range(7):
        single = mc_predictive(spec, post, X[i], 3, RngStream(8))
        assert np.allclose(single, batch[:, i])
