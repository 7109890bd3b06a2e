"""Dense float64 primitives and seeded random streams.

Tensors are plain ``numpy.ndarray`` objects in float64. Every public
operation here validates that its output is finite and raises
:class:`~dualloss.errors.NumericError` otherwise.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError, ParameterError

EPS_NORM = 1e-12


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(x)))[0]
        raise NumericError(f"non-finite value in {what} at index {tuple(int(i) for i in bad)}")
    return x


def as_tensor(x, ndim: int | None = None, what: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{what}: expected rank {ndim}, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a, 2, "matmul lhs")
    b = as_tensor(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ ({a.shape} x {b.shape})")
    return check_finite(a @ b, "matmul output")


def l2_normalize(v: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    """Normalize a vector, or each row of a matrix, to unit L2 norm."""
    v = as_tensor(v)
    if v.ndim not in (1, 2):
        raise DimensionError(f"l2_normalize expects a vector or matrix, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    small = norms[..., 0] < eps
    if np.any(small):
        where = int(np.argmax(small)) if v.ndim == 2 else 0
        raise DegenerateInputError(f"cannot normalize near-zero vector (row {where}, norm < {eps:g})")
    return check_finite(v / norms, "l2_normalize output")


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilized by subtracting the row max."""
    z = check_finite(as_tensor(z), "log_softmax input")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return check_finite(shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True)), "log_softmax output")


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


class RngStream:
    """Counter-based random stream identified by ``(seed, *stream_id)``.

    Backed by Philox keyed through ``numpy.random.SeedSequence`` so any
    child stream (say, per epoch and sample index) can be derived without
    touching shared state. Normals use the Box-Muller transform on pairs
    of uniforms so the mapping from bits to values is fixed here rather
    than by the numpy sampler.
    """

    def __init__(self, seed: int, *stream_id: int):
        if seed < 0 or any(k < 0 for k in stream_id):
            raise ParameterError("seed and stream ids must be non-negative")
        self.seed = int(seed)
        self.stream_id = tuple(int(k) for k in stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, *self.stream_id, *keys)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if not lo < hi:
            raise ParameterError(f"uniform bounds must satisfy lo < hi, got [{lo}, {hi})")
        u = self._gen.random(size)
        out = lo + (hi - lo) * u
        # lo + (hi - lo) * u can round up to hi when u is just below 1
        return np.minimum(out, np.nextafter(hi, lo)) if size is not None else min(float(out), math.nextafter(hi, lo))

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None):
        if std < 0:
            raise ParameterError(f"std must be non-negative, got {std}")
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        out = mean + std * z
        return float(out[0]) if size is None else out.reshape(size)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self._gen.random(size) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size)


def rng_uniform(stream: RngStream, lo: float, hi: float) -> float:
    return stream.uniform(lo, hi)


def rng_normal(stream: RngStream, mean: float, std: float) -> float:
    return stream.normal(mean, std)
