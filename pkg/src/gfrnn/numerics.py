"""Numeric primitives: seeded RNG, stable softmax, sampling, shape-checked ops.

Matrices are 2-D float ndarrays, vectors 1-D. Shapes are validated at the
boundaries; nothing here relies on implicit alignment. Batched variants take
one column per stream and say so in their names.

All randomness flows through Rng, a counter-based SplitMix64 generator. Draws
are a pure function of (seed, counter), so sequences are identical across
runs and platforms. Instances are not thread-safe; concurrent use requires
independent instances (see Rng.child).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError, NumericError

DEFAULT_DTYPE = np.float64

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer on a uint64 array; wrapping arithmetic intended.
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream.

    Output i of a stream is mix64((seed+1)*GAMMA + (i+1)*GAMMA); the counter
    records how many outputs have been consumed.
    """

    def __init__(self, seed: int, counter: int = 0):
        if not isinstance(seed, (int, np.integer)):
            raise ConfigError(f"rng seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            base = (np.uint64(self.seed) + np.uint64(1)) * _GAMMA
            idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
            out = _mix64(base + idx * _GAMMA)
        self.counter += n
        return out

    def uniform(self, n: int | None = None):
        """Uniform float64 in [0, 1); scalar if n is None, else shape (n,)."""
        if n is None:
            return float(self._raw(1)[0] >> np.uint64(11)) * 2.0**-53
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_signed(self, shape, scale: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
        """Uniform in [-scale, +scale) with the given shape."""
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform(n) * 2.0 - 1.0
        return (u * scale).astype(dtype).reshape(shape)

    def integers(self, lo: int, hi: int, n: int | None = None):
        """Uniform integers in [lo, hi). Scalar if n is None."""
        if hi <= lo:
            raise ConfigError(f"integers: empty range [{lo}, {hi})")
        span = hi - lo
        if n is None:
            return lo + int(self.uniform() * span)
        vals = np.floor(self.uniform(n) * span).astype(np.int64)
        return lo + np.minimum(vals, span - 1)

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates with draws from this stream."""
        out = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def child(self, key) -> "Rng":
        """Independent stream derived from (seed, key); does not advance self.

        key is an int or a label string (folded to 64 bits with FNV-1a so the
        derivation never depends on interpreter hash randomization).
        """
        if isinstance(key, str):
            acc = 0xCBF29CE484222325
            for byte in key.encode("utf-8"):
                acc = ((acc ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
            key = acc
        with np.errstate(over="ignore"):
            derived = _mix64(np.asarray([np.uint64(self.seed) ^ _mix64(
                np.asarray([np.uint64(key) + _GAMMA]))[0]], dtype=np.uint64))[0]
        return Rng(int(derived))

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["counter"])


def check_matrix(name: str, a: np.ndarray, rows: int | None = None, cols: int | None = None):
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise ConfigError(f"{name}: expected a 2-D array")
    if rows is not None and a.shape[0] != rows:
        raise ConfigError(f"{name}: expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ConfigError(f"{name}: expected {cols} cols, got {a.shape[1]}")


def check_vector(name: str, a: np.ndarray, length: int | None = None):
    if not isinstance(a, np.ndarray) or a.ndim != 1:
        raise ConfigError(f"{name}: expected a 1-D array")
    if length is not None and a.shape[0] != length:
        raise ConfigError(f"{name}: expected length {length}, got {a.shape[0]}")


def affine(w: np.ndarray, x: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """w @ x (+ b) with explicit shape validation. x may be (n,) or (n, batch)."""
    check_matrix("affine w", w)
    if x.ndim == 1:
        check_vector("affine x", x, w.shape[1])
    elif x.ndim == 2:
        if x.shape[0] != w.shape[1]:
            raise ConfigError(
                f"affine x: expected {w.shape[1]} rows, got {x.shape[0]}")
    else:
        raise ConfigError("affine x: expected 1-D or 2-D array")
    out = w @ x
    if b is not None:
        check_vector("affine b", b, w.shape[0])
        out = add_bias(out, b)
    return out


def add_bias(pre: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Add a bias vector to a vector or to every column of a matrix."""
    if pre.ndim == 1:
        return pre + b
    return pre + b[:, None]


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic; exact 0.0/1.0 in the saturated tails."""
    out = np.empty_like(x)
    pos = x >= 0
    with np.errstate(over="ignore", under="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax of a vector, max-subtracted. Non-finite input is fatal."""
    check_vector("softmax z", z)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax: non-finite input")
    with np.errstate(under="ignore"):
        e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax_cols(z: np.ndarray) -> np.ndarray:
    """Column-wise log-softmax of a (vocab, batch) matrix."""
    m = z.max(axis=0)
    sh = z - m[None, :]
    with np.errstate(under="ignore"):
        lse = np.log(np.exp(sh).sum(axis=0))
    return sh - lse[None, :]


def sample_categorical(probs: np.ndarray, rng: Rng) -> int:
    """Draw an index from a probability vector using one uniform draw.

    The vector must sum to 1 within 1e-6; zero-probability entries are never
    drawn.
    """
    check_vector("sample_categorical probs", probs)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise NumericError("sample_categorical: probabilities must be finite and >= 0")
    total = float(probs.sum())
    if not (1.0 - 1e-6 <= total <= 1.0 + 1e-6):
        raise NumericError(f"sample_categorical: probabilities sum to {total!r}")
    u = rng.uniform() * total
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, probs.shape[0] - 1)


def concat(parts: list[np.ndarray]) -> np.ndarray:
    """Concatenate 1-D parts; empty input is a configuration error."""
    if not parts:
        raise ConfigError("concat: empty part list")
    for i, p in enumerate(parts):
        check_vector(f"concat part {i}", p)
    return np.concatenate(parts)


def split_lengths(vec: np.ndarray, lengths: list[int]) -> list[np.ndarray]:
    """Inverse of concat for the given lengths (views, not copies)."""
    check_vector("split_lengths vec", vec, sum(lengths))
    out, off = [], 0
    for n in lengths:
        out.append(vec[off:off + n])
        off += n
    return out


def one_hot(index: int, size: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    if not 0 <= index < size:
        raise DataError(f"symbol index {index} out of range [0, {size})")
    v = np.zeros(size, dtype=dtype)
    v[index] = 1.0
    return v


def check_symbol_range(name: str, indices: np.ndarray, size: int):
    """Validate that every index lies in [0, size)."""
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        bad = indices[(indices < 0) | (indices >= size)].flat[0]
        raise DataError(f"{name}: symbol index {int(bad)} out of range [0, {size})")
