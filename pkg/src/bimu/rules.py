"""Online update rules: BiMU, a cumulative (no-forgetting) baseline, and STE+Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .binnet import LossGradient, NetworkSpec, backward, forward, loss_ce
from .posterior import BernoulliPosterior

BIMU = "bimu"
CUMULATIVE = "cumulative"
STE = "ste"
METHODS = (BIMU, CUMULATIVE, STE)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(FloatingPointError):
    """A non-finite gradient reached an update rule."""


@dataclass(frozen=True)
class BiMUConfig:
    """BiMU hyperparameters; defaults are the Permuted-MNIST preset."""

    N: float = 700.0
    alpha_max: float = 0.0023
    beta_L: float = 161.3
    beta_KL: float = 3.76
    gamma_grad: float = 4.9
    K: int = 5
    T: float = 1.0

    def __post_init__(self):
        for name in ("alpha_max", "beta_L", "beta_KL", "gamma_grad", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def _check_finite(grads):
    # checked before any write so a failed step leaves the state untouched
    for i, g in enumerate(grads):
        if not _all_finite(np.asarray(g, dtype=np.float64)):
            raise DivergenceError(f"non-finite gradient in layer {i}")


def step_size(lam_prev, g, beta_L, beta_KL, alpha_max):
    """Metaplastic step size, broadcasting over all arguments.

    ``1/eta = beta_KL (1 - tanh^2 lam) + 2 beta_L tanh(lam) g + 2 beta_L |g| + 1/alpha_max``.
    The two gradient terms sum to ``2 beta_L |g| (1 +/- |tanh lam|) >= 0``, so
    ``0 < eta <= alpha_max``.
    """
    th = np.tanh(lam_prev)
    inv = beta_KL * (1.0 - th * th) + 2.0 * beta_L * (th * g + np.abs(g)) + 1.0 / alpha_max
    # 1 / (1 / a) can round one ulp above a when the other terms vanish
    return np.minimum(1.0 / inv, alpha_max)


def bimu_eta(lam_prev, g, cfg: BiMUConfig):
    return step_size(lam_prev, g, cfg.beta_L, cfg.beta_KL, cfg.alpha_max)


def bimu_delta(lam_prev, lam_prior, g, cfg: BiMUConfig):
    """The BiMU increment ``lam_t - lam_{t-1}`` for one layer."""
    var = 1.0 - np.tanh(lam_prev) ** 2
    drive = cfg.gamma_grad * cfg.beta_L * g + (cfg.beta_KL / cfg.N) * (lam_prev - lam_prior) * var
    return -bimu_eta(lam_prev, g, cfg) * drive


@numba.njit(cache=True)
def _bimu_inplace(lam, prior, g, gamma, beta_L, beta_KL, alpha, N):
    lf = lam.reshape(lam.size)
    pf = prior.ravel()
    inv_alpha = 1.0 / alpha
    gf = g.ravel()
    for i in range(lf.size):
        gi = gf[i]
        # tanh through one exp; within an ulp of np.tanh and ~3x cheaper
        e = np.exp(-2.0 * abs(lf[i]))
        th = (1.0 - e) / (1.0 + e)
        if lf[i] < 0.0:
            th = -th
        var = 1.0 - th * th
        eta = 1.0 / (beta_KL * var + 2.0 * beta_L * (th * gi + abs(gi)) + inv_alpha)
        if eta > alpha:
            eta = alpha
        drive = gamma * beta_L * gi + (beta_KL / N) * (lf[i] - pf[i]) * var
        lf[i] = lf[i] - eta * drive


@numba.njit(cache=True)
def _all_finite(g):
    for v in g.ravel():
        if not np.isfinite(v):
            return False
    return True


def bimu_step(post: BernoulliPosterior, grad: LossGradient, cfg: BiMUConfig) -> BernoulliPosterior:
    """Apply one BiMU update in place and return the posterior."""
    if len(grad.grads) != len(post.lam):
        raise ValueError("gradient and posterior have different layer counts")
    for i, (lam, g) in enumerate(zip(post.lam, grad.grads)):
        if g.shape != lam.shape:
            raise ValueError(f"layer {i}: gradient shape {g.shape} != {lam.shape}")
    _check_finite(grad.grads)
    for lam, prior, g in zip(post.lam, post.lam_prior, grad.grads):
        _bimu_inplace(lam, prior, np.ascontiguousarray(g, dtype=np.float64), cfg.gamma_grad, cfg.beta_L,
                      cfg.beta_KL, cfg.alpha_max, float(cfg.N))
    return post


def cumulative_step(post: BernoulliPosterior, grad: LossGradient, lr: float) -> BernoulliPosterior:
    """Constant-step gradient descent on ``lam`` with no pull back to the prior."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    _check_finite(grad.grads)
    for lam, g in zip(post.lam, grad.grads):
        lam -= lr * g
    return post


@dataclass
class STEState:
    """Latent real weights trained through sign() with a straight-through mask."""

    latent: list[np.ndarray]
    m: list[np.ndarray] = field(default=None)
    v: list[np.ndarray] = field(default=None)
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 2.2e-9

    def __post_init__(self):
        self.latent = [np.asarray(w, dtype=np.float64) for w in self.latent]
        if self.m is None:
            self.m = [np.zeros_like(w) for w in self.latent]
        if self.v is None:
            self.v = [np.zeros_like(w) for w in self.latent]

    @classmethod
    def init_uniform(cls, spec: NetworkSpec, rng, radius: float = 0.1, **kw) -> "STEState":
        return cls([rng.uniform(-radius, radius, size=s) for s in spec.weight_shapes], **kw)

    def binary_weights(self) -> list[np.ndarray]:
        # sign(0) would drop a synapse; ties go to +1
        return [np.where(w >= 0, 1.0, -1.0) for w in self.latent]


def adam_update(state: STEState, grads) -> None:
    state.step += 1
    t = state.step
    for w, m, v, g in zip(state.latent, state.m, state.v, grads):
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        w -= state.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        np.clip(w, -1.0, 1.0, out=w)


def ste_grads(state: STEState, x, label: int, spec: NetworkSpec):
    """Loss and latent-weight gradients (weight decay included)."""
    logits, tape = forward(spec, state.binary_weights(), x)
    loss, dlogits = loss_ce(logits, label)
    dW, _ = backward(spec, tape, dlogits)
    grads = []
    for d, w in zip(dW, state.latent):
        grads.append(d * (np.abs(w) <= 1.0) + state.weight_decay * w)
    return float(loss), grads


def ste_step(state: STEState, x, label: int, spec: NetworkSpec) -> float:
    """One STE+Adam update in place; returns the loss."""
    loss, grads = ste_grads(state, x, label, spec)
    _check_finite(grads)
    adam_update(state, grads)
    return loss


# per-parameter state words: lam | lam + previous posterior | latent + two Adam moments
_STATE_WIDTH = {BIMU: 1, CUMULATIVE: 2, STE: 3}


def training_state_bytes(method: str, spec: NetworkSpec) -> int:
    """Persistent training-state memory at 4 bytes per stored value."""
    if method not in _STATE_WIDTH:
        raise ValueError(f"unknown method {method!r}")
    return spec.n_params * _STATE_WIDTH[method] * 4
