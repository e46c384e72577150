"""Deterministic numeric substrate: keyed counter-based random streams and
numerically stable scalar kernels.

Random streams use Philox4x32-10 (Salmon et al., SC'11). A stream is the pair
``(seed, stream_id)``: the seed is the 64-bit Philox key and the stream id
occupies the upper 64 bits of the 128-bit counter, leaving the lower 64 bits
as the block position. Distinct stream ids therefore never share a counter
value, and every output is a pure function of ``(seed, stream_id, position)``.
"""

from __future__ import annotations

import hashlib
import math

import numba
import numpy as np

_U64 = (1 << 64) - 1
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_LO32 = np.uint64(0xFFFFFFFF)
_SH32 = np.uint64(32)
# uniform01 maps a 32-bit word w to (w + 1/2) / 2**32, strictly inside (0, 1)
_INV32 = 2.0**-32


@numba.njit(inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on one 128-bit counter block; all args uint32."""
    for r in range(10):
        if r > 0:
            k0 = np.uint32(k0 + _W0)
            k1 = np.uint32(k1 + _W1)
        p0 = _M0 * np.uint64(c0)
        p1 = _M1 * np.uint64(c2)
        c0, c1, c2, c3 = (
            np.uint32(np.uint32(p1 >> _SH32) ^ c1 ^ k0),
            np.uint32(p1 & _LO32),
            np.uint32(np.uint32(p0 >> _SH32) ^ c3 ^ k1),
            np.uint32(p0 & _LO32),
        )
    return c0, c1, c2, c3


@numba.njit(inline="always")
def block_words(key, sid, block):
    """The four words of counter block ``block`` for a (key, stream id) pair."""
    return philox4x32(
        np.uint32(block & _LO32),
        np.uint32(block >> _SH32),
        np.uint32(sid & _LO32),
        np.uint32(sid >> _SH32),
        np.uint32(key & _LO32),
        np.uint32(key >> _SH32),
    )


@numba.njit(cache=True)
def _fill_words(key, sid, block, out):
    n = out.size
    for b in range((n + 3) // 4):
        w0, w1, w2, w3 = block_words(key, sid, np.uint64(block + np.uint64(b)))
        j = 4 * b
        out[j] = w0
        if j + 1 < n:
            out[j + 1] = w1
        if j + 2 < n:
            out[j + 2] = w2
        if j + 3 < n:
            out[j + 3] = w3


@numba.njit(cache=True)
def _fisher_yates(n, u):
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(u[i] * (i + 1))
        if j > i:
            j = i
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def derive_stream_id(*labels: object) -> int:
    """Hash a tuple of labels (purpose, step, ...) to a 64-bit stream id."""
    text = "\x1f".join(repr(x) for x in labels).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


class RngStream:
    """A reproducible random stream keyed by ``(seed, stream_id)``.

    Each request consumes whole 4-word counter blocks, so the outputs depend
    only on the sequence of requests, never on timing or thread layout.
    """

    def __init__(self, seed: int, stream_id: int = 0, position: int = 0):
        if not (0 <= seed <= _U64 and 0 <= stream_id <= _U64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.position = int(position)

    def child(self, *labels: object) -> "RngStream":
        """Independent sub-stream for a purpose label, e.g. ``child("mc", step)``."""
        return RngStream(self.seed, derive_stream_id(self.stream_id, *labels))

    def reserve(self, n_words: int) -> tuple[np.uint64, np.uint64, np.uint64]:
        """Claim blocks for ``n_words`` words; returns (key, stream id, first block)."""
        start = self.position
        self.position += (n_words + 3) // 4
        return np.uint64(self.seed), np.uint64(self.stream_id), np.uint64(start)

    def words(self, n: int, out=None) -> np.ndarray:
        if out is None:
            out = np.empty(int(n), dtype=np.uint32)
        elif out.size != n or out.dtype != np.uint32:
            raise ValueError("out must be a uint32 array of n words")
        if n:
            _fill_words(*self.reserve(n), out)
        return out

    def uniform01(self, size=None):
        return uniform01(self, size)

    def uniform53(self, size=None):
        """Uniform on [0, 1) with 53-bit resolution (two words per draw)."""
        n = int(np.prod(size)) if size is not None else 1
        w = self.words(2 * n).astype(np.uint64).reshape(n, 2)
        u = ((w[:, 0] >> np.uint64(5)) * 67108864.0 + (w[:, 1] >> np.uint64(6))) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low: float, high: float, size=None):
        return low + (high - low) * self.uniform53(size)

    def normal(self, size=None):
        """Standard normal draws by the Box-Muller transform."""
        n = int(np.prod(size)) if size is not None else 1
        m = (n + 1) // 2
        u1 = uniform01(self, m)
        u2 = uniform01(self, m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low: int, high: int | None = None, size=None):
        """Integers in ``[low, high)``."""
        if high is None:
            low, high = 0, low
        out = low + np.floor(self.uniform53(size if size is not None else 1) * (high - low)).astype(np.int64)
        return int(out[0]) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        return _fisher_yates(int(n), self.uniform53(max(int(n), 1)))

    def bernoulli(self, p: float) -> bool:
        return bool(uniform01(self) < p)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, position={self.position})"


def uniform01(rng: RngStream, size=None):
    """Uniform draws strictly inside (0, 1), one Philox word each."""
    n = int(np.prod(size)) if size is not None else 1
    u = (rng.words(n).astype(np.float64) + 0.5) * _INV32
    return float(u[0]) if size is None else u.reshape(size)


def log_sum_exp(v, axis: int = -1):
    """Numerically stable ``log(sum(exp(v)))`` along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    out = np.squeeze(out, axis=axis)
    return float(out) if out.ndim == 0 else out


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_cosh(x):
    """``log(cosh(x))`` as ``|x| + log((1 + exp(-2|x|)) / 2)``; no overflow."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    return a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
