"""Finite-difference check of dL/dlam with frozen relaxation noise."""

import numpy as np

from bimu.binnet import IDENTITY, RBG, NetworkSpec, forward, grad_from_sample, loss_ce
from bimu.numkit import RngStream
from bimu.posterior import BernoulliPosterior, sample_relaxed

H = 1e-5


def _breakpoints(kind, a):
    if kind == IDENTITY:
        return np.array([])
    if kind == RBG:
        return np.array([-1.5 * a, -0.5 * a, 0.5 * a, 1.5 * a])
    return np.array([-1.0, 1.0])


def frozen_loss(spec, lam, delta, T, x, y):
    omega = [np.tanh((l + d) / T) for l, d in zip(lam, delta)]
    logits, tape = forward(spec, omega, x, surrogate=True)
    loss, _ = loss_ce(logits, y)
    return float(np.mean(loss)), tape


def min_kink_margin(spec, tape):
    bp = _breakpoints(spec.activation, spec.rbg_width)
    if bp.size == 0:
        return np.inf
    hidden = np.concatenate([p.ravel() for p in tape.pres[:-1]])
    return float(np.min(np.abs(hidden[:, None] - bp[None, :])))


def setup(activation, seed, K=3, T=1.0, sizes=(8, 4, 3)):
    """A seeded network, input and frozen noise whose hidden pre-activations keep
    away from the surrogate's breakpoints (so central differences stay on one piece)."""
    spec = NetworkSpec(sizes, activation=activation)
    for s in range(seed, seed + 1000):
        rng = RngStream(s)
        post = BernoulliPosterior([rng.normal(size=shape) for shape in spec.weight_shapes])
        x = rng.normal(size=sizes[0]) * 2.0
        y = int(rng.integers(0, sizes[-1]))
        sample = sample_relaxed(post, T, rng.child("noise"), k=K)
        _, tape = frozen_loss(spec, post.lam, sample.delta, T, x, y)
        if min_kink_margin(spec, tape) > 1e-3:
            return spec, post, sample, x, y
    raise RuntimeError("no kink-free configuration found")


def check(activation, seed=0, K=3, T=1.0):
    """Returns (max relative error over large entries, max abs error over small ones, n entries)."""
    spec, post, sample, x, y = setup(activation, seed, K, T)
    analytic = grad_from_sample(spec, post, sample, x, y, surrogate=True).grads
    worst_rel, worst_abs, n = 0.0, 0.0, 0
    for l, lam in enumerate(post.lam):
        for idx in np.ndindex(lam.shape):
            plus = [m.copy() for m in post.lam]
            minus = [m.copy() for m in post.lam]
            plus[l][idx] += H
            minus[l][idx] -= H
            fp, _ = frozen_loss(spec, plus, sample.delta, T, x, y)
            fm, _ = frozen_loss(spec, minus, sample.delta, T, x, y)
            fd = (fp - fm) / (2 * H)
            g = analytic[l][idx]
            if abs(g) < 1e-5:
                worst_abs = max(worst_abs, abs(g - fd))
            else:
                worst_rel = max(worst_rel, abs(g - fd) / abs(fd))
            n += 1
    return worst_rel, worst_abs, n

