"""Flat-vector numerics and labelled, reproducible random streams.

Every model, dual and prior variable is a 1-D ``float64`` numpy array. The
helpers here enforce the two rules the rest of the package relies on:
sums are accumulated in a fixed order, and nothing non-finite escapes a
public operation silently.
"""
from __future__ import annotations

import hashlib
from typing import Iterable, Sequence, Tuple

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or infinity shows up in a parameter vector."""


def as_param(v, name: str = "vector") -> np.ndarray:
    """Return ``v`` as a finite, non-empty 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(v: np.ndarray, name: str = "vector") -> np.ndarray:
    if not np.all(np.isfinite(v)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(v)))[0])
        raise NonFiniteError(f"{name} has a non-finite entry at index {bad}")
    return v


def check_same_dim(*vectors: np.ndarray) -> int:
    dims = {np.shape(v)[0] for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {sorted(dims)}")
    return dims.pop()


def linear_combine(terms: Sequence[Tuple[float, np.ndarray]]) -> np.ndarray:
    """Component-wise ``sum(c * v)``, accumulated strictly in list order."""
    if len(terms) == 0:
        raise ValueError("linear_combine needs at least one term")
    check_same_dim(*[np.asarray(v) for _, v in terms])
    coef, vec = terms[0]
    out = float(coef) * np.asarray(vec, dtype=np.float64)
    for coef, vec in terms[1:]:
        out = out + float(coef) * np.asarray(vec, dtype=np.float64)
    return check_finite(out, "linear_combine result")


def l2_norm(v) -> float:
    """Euclidean norm, rescaled by the largest entry so tiny or huge vectors
    neither underflow nor overflow when squared."""
    arr = np.asarray(v, dtype=np.float64)
    check_finite(arr, "l2_norm input")
    scale = float(np.max(np.abs(arr))) if arr.size else 0.0
    if scale == 0.0:
        return 0.0
    return scale * float(np.sqrt(np.dot(arr / scale, arr / scale)))


def _label_key(seed: int, labels: Iterable[str]) -> int:
    h = hashlib.sha256(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:16], "little")


class RngStream:
    """Counter-based (Philox) random stream with labelled sub-streams.

    ``RngStream(7).child("node", 3)`` always yields the same draws no matter
    which other children were created before it, so adding a node does not
    perturb the data or init streams.
    """

    def __init__(self, seed: int, _path: Tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(_path)
        key = _label_key(self.seed, self.path)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(str(x) for x in labels))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"

    # thin pass-throughs keep call sites short
    def normal(self, *args, **kwargs):
        return self.generator.normal(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self.generator.uniform(*args, **kwargs)

    def integers(self, *args, **kwargs):
        return self.generator.integers(*args, **kwargs)

    def choice(self, *args, **kwargs):
        return self.generator.choice(*args, **kwargs)

    def permutation(self, *args, **kwargs):
        return self.generator.permutation(*args, **kwargs)


def draw_gaussian(rng: RngStream, dim: int, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    if dim < 1:
        raise ValueError("dim must be positive")
    if stddev == 0:
        # still advance the stream so later draws do not depend on stddev
        rng.generator.standard_normal(dim)
        return np.full(dim, float(mean))
    return mean + stddev * rng.generator.standard_normal(dim)
