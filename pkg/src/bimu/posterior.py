"""Mean-field Bernoulli posterior over signed binary weights.

Each synapse ``w in {-1, +1}`` has natural parameter ``lam`` with
``q(w) = exp(lam * w) / (2 cosh(lam))``, hence ``p(w = +1) = sigmoid(2 lam)``.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .numkit import RngStream, log_cosh, sigmoid, uniform01

CHECKPOINT_MAGIC = b"BIMU"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated posterior checkpoint."""


@dataclass
class BernoulliPosterior:
    """Per-layer natural parameters ``lam`` and prior natural parameters."""

    lam: list[np.ndarray]
    lam_prior: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.lam = [np.ascontiguousarray(l, dtype=np.float64) for l in self.lam]
        if self.lam_prior is None:
            self.lam_prior = [np.zeros_like(l) for l in self.lam]
        else:
            self.lam_prior = [np.ascontiguousarray(l, dtype=np.float64) for l in self.lam_prior]
        if [l.shape for l in self.lam] != [l.shape for l in self.lam_prior]:
            raise ValueError("lam and lam_prior shapes differ")

    @classmethod
    def init_uniform(cls, shapes, rng: RngStream, radius: float = 0.1, prior: float = 0.0):
        """Near-maximal-uncertainty start: ``lam ~ U[-radius, radius]``."""
        lam = [rng.uniform(-radius, radius, size=s) for s in shapes]
        return cls(lam, [np.full(s, float(prior)) for s in shapes])

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [l.shape for l in self.lam]

    @property
    def n_synapses(self) -> int:
        return int(sum(l.size for l in self.lam))

    def copy(self) -> "BernoulliPosterior":
        return BernoulliPosterior([l.copy() for l in self.lam], [l.copy() for l in self.lam_prior])


@dataclass
class RelaxedSample:
    """Concrete relaxation of a posterior draw: ``omega = tanh((lam + delta) / T)``."""

    omega: list[np.ndarray]
    delta: list[np.ndarray]
    temperature: float


def probability(post: BernoulliPosterior) -> list[np.ndarray]:
    return [sigmoid(2.0 * l) for l in post.lam]


def variance(post: BernoulliPosterior) -> list[np.ndarray]:
    """``Var_q(w) = 1 - tanh(lam)**2``."""
    return [1.0 - np.tanh(l) ** 2 for l in post.lam]


def sample_hard(post: BernoulliPosterior, rng: RngStream, k: int | None = None) -> list[np.ndarray]:
    """Draw signed binary weights; with ``k`` the draws gain a leading axis of size k."""
    out = []
    for l in post.lam:
        size = l.shape if k is None else (k, *l.shape)
        u = uniform01(rng, size)
        out.append(np.where(u < sigmoid(2.0 * l), 1.0, -1.0))
    return out


def logistic_noise(eps):
    """``delta = (log(eps) - log(1 - eps)) / 2`` for ``eps`` in (0, 1)."""
    eps = np.asarray(eps, dtype=np.float64)
    return 0.5 * (np.log(eps) - np.log1p(-eps))


def relax(lam, delta, temperature: float):
    return np.tanh((lam + delta) / temperature)


def sample_relaxed(
    post: BernoulliPosterior, temperature: float, rng: RngStream, k: int | None = None
) -> RelaxedSample:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    omegas, deltas = [], []
    for l in post.lam:
        size = l.shape if k is None else (k, *l.shape)
        d = logistic_noise(uniform01(rng, size))
        deltas.append(d)
        omegas.append(relax(l, d, temperature))
    return RelaxedSample(omegas, deltas, float(temperature))


@numba.njit(cache=True)
def _relax_kernel(lam, K, T, words, omega, chain):
    # element (k, i) uses word k * n + i, the order uniform01 draws them in
    n = lam.size
    lf = lam.ravel()
    of = omega.reshape(K * n)
    cf = chain.reshape(K * n)
    if T == 1.0:
        # tanh(lam + delta) with exp(2 delta) = u / (1 - u), rearranged to a
        # single division: omega = 1 - 2 v / (v + e u), v = 1 - u, e = exp(2 lam)
        e2 = np.exp(2.0 * np.minimum(np.maximum(lf, -350.0), 350.0))
        for k in range(K):
            for i in range(n):
                e = k * n + i
                u = (words[e] + 0.5) * 2.3283064365386963e-10
                v = 1.0 - u
                inv = 1.0 / (v + e2[i] * u)
                of[e] = 1.0 - 2.0 * v * inv
                cf[e] = 4.0 * e2[i] * u * v * inv * inv
    else:
        for k in range(K):
            for i in range(n):
                e = k * n + i
                u = (words[e] + 0.5) * 2.3283064365386963e-10
                w = np.tanh((lf[i] + 0.5 * (np.log(u) - np.log1p(-u))) / T)
                of[e] = w
                cf[e] = (1.0 - w * w) / T


_workspace = threading.local()


def _buffers(shape):
    cache = _workspace.__dict__.setdefault("bufs", {})
    if shape not in cache:
        n = int(np.prod(shape))
        cache[shape] = (np.empty(shape), np.empty(shape), np.empty(n, dtype=np.uint32))
    return cache[shape]


def relaxed_weights(lam: np.ndarray, K: int, temperature: float, rng: RngStream, reuse: bool = False):
    """K relaxed draws of one layer and their chain factors ``(1 - omega^2) / T``.

    Consumes the same stream words, in the same order, as
    ``sample_relaxed(..., k=K)`` and agrees with it to rounding error. With
    ``reuse=True`` the returned arrays are per-thread scratch buffers that the
    next call with the same shape overwrites.
    """
    shape = (K, *lam.shape)
    if reuse:
        omega, chain, words = _buffers(shape)
        rng.words(words.size, out=words)
    else:
        omega, chain = np.empty(shape), np.empty(shape)
        words = rng.words(omega.size)
    _relax_kernel(np.ascontiguousarray(lam), K, float(temperature), words, omega, chain)
    return omega, chain


def kl_bernoulli(theta, xi):
    """KL(q(.|theta) || q(.|xi)) = (theta - xi) tanh(theta) - log cosh(theta) + log cosh(xi)."""
    theta = np.asarray(theta, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    kl = (theta - xi) * np.tanh(theta) - log_cosh(theta) + log_cosh(xi)
    # roundoff can leave tiny negatives when theta ~ xi
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def probability_histogram(post: BernoulliPosterior, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Counts of ``p(w=+1)`` over ``bins`` uniform bins on [0, 1]; returns (counts, edges)."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    p = np.concatenate([x.ravel() for x in probability(post)])
    counts, edges = np.histogram(p, bins=bins, range=(0.0, 1.0))
    return counts, edges


def saturated_fraction(post: BernoulliPosterior, margin: float = 0.49) -> float:
    """Fraction of synapses with ``|p - 0.5| > margin``."""
    p = np.concatenate([x.ravel() for x in probability(post)])
    return float(np.mean(np.abs(p - 0.5) > margin))


def save_checkpoint(post: BernoulliPosterior, path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(post.lam))]
    for lam, prior in zip(post.lam, post.lam_prior):
        rows, cols = lam.shape if lam.ndim == 2 else (1, lam.size)
        parts.append(struct.pack("<II", rows, cols))
        parts.append(lam.astype("<f8").tobytes())
        parts.append(prior.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> BernoulliPosterior:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} in {path}")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, n_layers = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    lam, prior = [], []
    for _ in range(n_layers):
        if off + 8 > len(buf):
            raise CheckpointError("truncated layer header")
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        n = rows * cols
        if off + 16 * n > len(buf):
            raise CheckpointError("truncated layer payload")
        lam.append(np.frombuffer(buf, "<f8", n, off).reshape(rows, cols).astype(np.float64))
        off += 8 * n
        prior.append(np.frombuffer(buf, "<f8", n, off).reshape(rows, cols).astype(np.float64))
        off += 8 * n
    if off != len(buf):
        raise CheckpointError("trailing bytes after last layer")
    return BernoulliPosterior(lam, prior)
