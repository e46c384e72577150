"""Binary MLP over sampled weights with hand-written backpropagation.

Weights of layer ``l`` have shape ``(..., out, in)``; any leading axes (for
example ``K`` Monte-Carlo draws) broadcast through the whole pass. Hidden
pre-activations are divided by ``sqrt(fan_in)``; logits are multiplied by
``spec.output_scale``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .numkit import RngStream, log_sum_exp, softmax
from .posterior import BernoulliPosterior, RelaxedSample, relaxed_weights, sample_hard

SIGN_HARDTANH = "sign"
RBG = "rbg"
IDENTITY = "identity"
ACTIVATIONS = (SIGN_HARDTANH, RBG, IDENTITY)


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]
    activation: str = RBG
    rbg_width: float = 1.0
    bias: bool = False
    output_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least one weight layer")
        if min(self.layer_sizes) < 1:
            raise ValueError("layer sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.rbg_width <= 0:
            raise ValueError("rbg_width must be positive")
        if self.output_scale <= 0:
            raise ValueError("output_scale must be positive")

    @property
    def weight_shapes(self) -> list[tuple[int, int]]:
        s = self.layer_sizes
        return [(s[i + 1], s[i]) for i in range(len(s) - 1)]

    @property
    def n_weights(self) -> int:
        return sum(o * i for o, i in self.weight_shapes)

    @property
    def n_params(self) -> int:
        return self.n_weights + (sum(self.layer_sizes[1:]) if self.bias else 0)

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def layer_scale(self, l: int) -> float:
        if l == len(self.layer_sizes) - 2:
            return self.output_scale
        return 1.0 / np.sqrt(self.layer_sizes[l])


@dataclass
class ForwardTape:
    x: np.ndarray
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pres: list[np.ndarray] = field(default_factory=list)  # scaled pre-activations
    weights: list[np.ndarray] = field(default_factory=list)
    surrogate: bool = False


@dataclass
class LossGradient:
    grads: list[np.ndarray]
    loss: float
    bias_grads: list[np.ndarray] | None = None


def activate(kind: str, x, a: float = 1.0, surrogate: bool = False):
    """Forward activation; ``surrogate=True`` evaluates the smooth stand-in
    (hardtanh for sign, sRBG for RBG) whose derivative backprop uses."""
    if kind == IDENTITY:
        return x
    if kind == SIGN_HARDTANH:
        return np.clip(x, -1.0, 1.0) if surrogate else np.sign(x)
    ax = np.abs(x)
    if not surrogate:
        return (ax >= 0.5 * a).astype(np.float64)
    band = (ax > 0.5 * a) & (ax < 1.5 * a)
    return np.where(band, ax, np.where(ax < 0.5 * a, 0.0, 1.0))


def activation_grad(kind: str, x, a: float = 1.0):
    """Surrogate derivative used on the backward pass."""
    if kind == IDENTITY:
        return np.ones_like(x)
    if kind == SIGN_HARDTANH:
        return (np.abs(x) <= 1.0).astype(np.float64)
    ax = np.abs(x)
    return np.where((ax > 0.5 * a) & (ax < 1.5 * a), np.sign(x), 0.0)


def forward(spec: NetworkSpec, weights, x, biases=None, surrogate: bool = False):
    """Run the MLP; returns ``(logits, tape)``.

    ``x`` is one example ``(in,)`` or a batch ``(B, in)``; logits come back as
    ``(..., C)`` or ``(..., B, C)`` where ``...`` are the weights' sample axes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.layer_sizes[0]:
        raise ValueError(f"input shape {x.shape} does not match {spec.layer_sizes[0]} features")
    if len(weights) != len(spec.weight_shapes):
        raise ValueError("wrong number of weight layers")
    tape = ForwardTape(x=x, weights=list(weights), surrogate=surrogate)
    h = x[None, :] if x.ndim == 1 else x
    last = len(weights) - 1
    for l, W in enumerate(weights):
        if W.shape[-2:] != spec.weight_shapes[l]:
            raise ValueError(f"layer {l} weights {W.shape[-2:]} != {spec.weight_shapes[l]}")
        tape.inputs.append(h)
        pre = np.matmul(h, np.swapaxes(W, -1, -2)) * spec.layer_scale(l)
        if biases is not None:
            pre = pre + biases[l]
        tape.pres.append(pre)
        h = pre if l == last else activate(spec.activation, pre, spec.rbg_width, surrogate)
    return (h[..., 0, :] if x.ndim == 1 else h), tape


def backward(spec: NetworkSpec, tape: ForwardTape, dlogits):
    """Gradients of the loss w.r.t. each layer's weights and biases.

    Batch rows are summed; sample axes carried by the weights are kept.
    """
    n = len(tape.weights)
    dW = [None] * n
    db = [None] * n
    delta = np.asarray(dlogits, dtype=np.float64)
    if tape.x.ndim == 1:
        delta = delta[..., None, :]
    for l in range(n - 1, -1, -1):
        if l != n - 1:
            delta = delta * activation_grad(spec.activation, tape.pres[l], spec.rbg_width)
        db[l] = delta.sum(axis=-2)
        dpre = delta * spec.layer_scale(l)
        dW[l] = np.matmul(np.swapaxes(dpre, -1, -2), tape.inputs[l])
        if l > 0:
            delta = np.matmul(dpre, tape.weights[l])
    return dW, db


def loss_ce(logits, label: int):
    """Softmax cross-entropy; returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ValueError("classification needs >= 2 outputs")
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range")
    loss = log_sum_exp(logits, axis=-1) - logits[..., label]
    grad = softmax(logits, axis=-1)
    grad[..., label] -= 1.0
    return loss, grad


def grad_from_sample(
    spec: NetworkSpec, post: BernoulliPosterior, sample: RelaxedSample, x, label: int, biases=None, surrogate: bool = False
):
    """dL/dlam for fixed relaxation noise, averaged over any leading sample axis.

    With ``surrogate=True`` the forward pass also uses the surrogate activations,
    making the result the exact derivative of the evaluated loss.
    """
    logits, tape = forward(spec, sample.omega, x, biases, surrogate)
    loss, dlogits = loss_ce(logits, label)
    dW, db = backward(spec, tape, dlogits)
    T = sample.temperature
    grads = []
    for d, w in zip(dW, sample.omega):
        g = d * (1.0 - w * w) / T
        grads.append(g.mean(axis=0) if g.ndim == 3 else g)
    bias_grads = None
    if biases is not None:
        bias_grads = [b.mean(axis=0) if b.ndim == 2 else b for b in db]
    return LossGradient(grads, float(np.mean(loss)), bias_grads)


@numba.njit(cache=True)
def _chain_mean(dpre, h, chain, out):
    # out[o, i] = mean_k dpre[k, o] * h[k, i] * chain[k, o, i], summed in k order
    K, O, I = chain.shape
    out[:] = 0.0
    for k in range(K):
        for o in range(O):
            d = dpre[k, o]
            if d == 0.0:
                continue
            for i in range(I):
                out[o, i] += d * h[k, i] * chain[k, o, i]
    out /= K


def grad_lambda_mc(spec: NetworkSpec, post: BernoulliPosterior, x, label: int, K: int, T: float, rng: RngStream, biases=None) -> LossGradient:
    """Monte-Carlo estimate of dL/dlam from K relaxed weight draws.

    Each draw is backpropagated, multiplied by ``(1 - omega^2) / T`` and the
    K results are averaged in draw order.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("grad_lambda_mc takes one example")
    draws = [relaxed_weights(lam, K, T, rng, reuse=True) for lam in post.lam]
    omegas = [w for w, _ in draws]
    logits, tape = forward(spec, omegas, x, biases)
    loss, dlogits = loss_ce(logits, label)
    n = len(omegas)
    grads = [None] * n
    bias_grads = [None] * n
    delta = dlogits[:, None, :]
    for l in range(n - 1, -1, -1):
        if l != n - 1:
            delta = delta * activation_grad(spec.activation, tape.pres[l], spec.rbg_width)
        bias_grads[l] = delta[:, 0, :].mean(axis=0)
        dpre = delta * spec.layer_scale(l)
        h = np.broadcast_to(tape.inputs[l][..., 0, :], (K, tape.inputs[l].shape[-1]))
        grads[l] = np.empty(post.lam[l].shape)
        _chain_mean(np.ascontiguousarray(dpre[:, 0, :]), np.ascontiguousarray(h), draws[l][1], grads[l])
        if l > 0:
            delta = np.matmul(dpre, omegas[l])
    return LossGradient(grads, float(np.mean(loss)), bias_grads if biases is not None else None)


def mc_predictive(spec: NetworkSpec, post: BernoulliPosterior, x, K: int, rng: RngStream, biases=None, chunk: int = 4096):
    """Softmax outputs of K hard-sampled networks.

    Returns shape ``(K, C)`` for one example or ``(K, B, C)`` for a batch.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    weights = sample_hard(post, rng, k=K)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        logits, _ = forward(spec, weights, x, biases)
        return softmax(logits)
    parts = [softmax(forward(spec, weights, x[i : i + chunk], biases)[0]) for i in range(0, len(x), chunk)]
    return np.concatenate(parts, axis=1)
