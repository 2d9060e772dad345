"""Bregman-divergence regularizer anchored at a prior model."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numkit import as_param, check_same_dim

KINDS = ("squared-euclidean", "diagonal-quadratic")


@dataclass(frozen=True, eq=False)
class MirrorMap:
    """``h(x) = sum_j a_j x_j^2``; squared-euclidean is ``a_j = 1``."""

    kind: str = "squared-euclidean"
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mirror map kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "diagonal-quadratic":
            if self.weights is None:
                raise ValueError("diagonal-quadratic needs a weight vector")
            a = as_param(self.weights, "mirror weights")
            if np.any(a <= 0):
                raise ValueError("mirror weights must be strictly positive")
            a.setflags(write=False)
            object.__setattr__(self, "weights", a)
        elif self.weights is not None:
            raise ValueError("squared-euclidean takes no weights")

    def coefficients(self, n: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(n)
        if self.weights.shape[0] != n:
            raise ValueError("mirror weight dimension mismatch")
        return self.weights

    def value(self, x: np.ndarray) -> float:
        return float(np.sum(self.coefficients(x.shape[0]) * x * x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.coefficients(x.shape[0]) * x


@dataclass(eq=False)
class BregmanRegularizer:
    prior: np.ndarray
    lam: float = 0.0
    h: MirrorMap = field(default_factory=MirrorMap)

    def __post_init__(self):
        self.prior = as_param(self.prior, "prior")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        self.lam = float(self.lam)
        self.h.coefficients(self.dim)  # validates the weight dimension

    @property
    def dim(self) -> int:
        return self.prior.shape[0]

    @property
    def mu_r(self) -> float:
        """Lipschitz constant of the divergence gradient (``2 max a_j``)."""
        return 2.0 * float(np.max(self.h.coefficients(self.dim)))

    @property
    def strong_convexity_M(self) -> float:
        return 2.0 * float(np.min(self.h.coefficients(self.dim)))

    def value(self, x) -> float:
        x = as_param(x, "x")
        check_same_dim(x, self.prior)
        # h(x) - h(p) - <grad h(p), x - p> collapses to sum a_j (x_j - p_j)^2,
        # which avoids cancellation and is exactly ||x - p||^2 when a == 1
        d = x - self.prior
        return float(np.sum(self.h.coefficients(self.dim) * d * d))

    def gradient(self, x) -> np.ndarray:
        x = as_param(x, "x")
        check_same_dim(x, self.prior)
        return self.h.gradient(x) - self.h.gradient(self.prior)


def bregman_value(reg: BregmanRegularizer, x) -> float:
    return reg.value(x)


def bregman_gradient(reg: BregmanRegularizer, x) -> np.ndarray:
    return reg.gradient(x)
