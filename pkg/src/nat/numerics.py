"""Dense kernels, stable nonlinearities, and counter-based random streams.

Matrices are 2-D float64 C-order arrays, vectors 1-D float64. Random streams
are Philox generators keyed by (seed, stream id): the same key always replays
the same draws, and distinct stream ids are statistically independent, which
is what keeps parallel and resumed consumers reproducible.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    """Counter-based random stream addressed by (seed, stream).

    `derive` hashes extra integer ids into the stream key, giving a tree of
    independent substreams (per purpose, per step, per epoch ...) that can be
    reconstructed statelessly from the run seed alone.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = seed & _MASK64
        self.stream = stream & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=[self.seed, self.stream])
        )

    def derive(self, *ids: int) -> "Rng":
        s = self.stream
        for i in ids:
            s = _splitmix64(s ^ (int(i) & _MASK64))
        return Rng(self.seed, s)

    def uniform(self, size=None):
        """Draws in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def affine(w: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """w @ x + b with explicit operand-shape validation."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise ValueError(
            f"affine expects matrix, vector, vector; got shapes "
            f"W{w.shape}, x{x.shape}, b{b.shape}"
        )
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ValueError(
            f"affine shape mismatch: W{w.shape} @ x{x.shape} + b{b.shape}"
        )
    return w @ x + b


def softmax_stable(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; safe for inputs out to +-1e3 and beyond."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of empty input")
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_sigmoid(z):
    """log(sigmoid(z)), elementwise, without overflow at either tail."""
    return -np.logaddexp(0.0, np.negative(z))


def sigmoid(z):
    """Logistic function; underflows cleanly to 0/1 at the tails."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(np.negative(z)))


def sample_bernoulli(p: float, rng: Rng) -> int:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"bernoulli probability {p!r} outside [0, 1]")
    return int(rng.uniform() < p)


def sample_gaussian(mean: float, std: float, rng: Rng) -> float:
    if std < 0.0:
        raise ValueError(f"negative standard deviation {std!r}")
    if std == 0.0:
        return float(mean)
    return float(mean + std * rng.normal())
