"""One-step MAML machinery: inner adaptation, meta-objective and meta-gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import Dataset, TaskLoss
from .numkit import as_param, check_finite


@dataclass(frozen=True)
class AdaptationConfig:
    alpha: float
    steps: int = 1

    def __post_init__(self):
        # alpha == 0 is accepted so that "no adaptation" evaluations are expressible
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")


@dataclass(frozen=True)
class DeltaSchedule:
    """``delta(t) = (scale * t + offset) ** -power``; default ``1/(10t+100)``.

    ``power`` other than 1 is an extension used to build summable schedules.
    """

    scale: float = 10.0
    offset: float = 100.0
    power: float = 1.0

    def __post_init__(self):
        if self.scale < 0 or self.offset <= 0 or self.power <= 0:
            raise ValueError("DeltaSchedule needs scale >= 0, offset > 0, power > 0")

    def __call__(self, t: int) -> float:
        return float((self.scale * t + self.offset) ** -self.power)

    @property
    def summable(self) -> bool:
        # p-series test; scale == 0 is a positive constant sequence
        return self.scale > 0 and self.power > 1


def inner_adapt(theta, loss: TaskLoss, support: Dataset, cfg: AdaptationConfig) -> np.ndarray:
    phi = as_param(theta, "theta")
    for _ in range(cfg.steps):
        phi = phi - cfg.alpha * loss.gradient(phi, support)
        check_finite(phi, "adapted parameters")
    return phi


def hessian_free_product(loss: TaskLoss, theta, r, delta: float, support: Dataset) -> np.ndarray:
    """Central-difference estimate of ``Hessian(theta) @ r`` from two gradients."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    theta = as_param(theta, "theta")
    r = as_param(r, "r")
    g_plus = loss.gradient(theta + delta * r, support)
    g_minus = loss.gradient(theta - delta * r, support)
    return check_finite((g_plus - g_minus) / (2.0 * delta), "Hessian-free product")


def meta_objective(theta, loss: TaskLoss, support: Dataset, query: Dataset,
                   cfg: AdaptationConfig) -> float:
    return loss.value(inner_adapt(theta, loss, support, cfg), query)


def meta_gradient_parts(theta, loss: TaskLoss, support: Dataset, query: Dataset,
                        alpha: float, delta: float):
    """Return ``(phi, query_grad, g)`` for one node at ``theta``.

    ``query_grad`` is the gradient of the query loss at the adapted point and
    ``g`` the Hessian-free estimate of ``Hessian_support(theta) @ query_grad``.
    """
    theta = as_param(theta, "theta")
    phi = theta - alpha * loss.gradient(theta, support)
    r = loss.gradient(phi, query)
    g = hessian_free_product(loss, theta, r, delta, support)
    return phi, r, g


def meta_gradient_estimate(theta, loss: TaskLoss, support: Dataset, query: Dataset,
                           alpha: float, delta: float) -> np.ndarray:
    _, r, g = meta_gradient_parts(theta, loss, support, query, alpha, delta)
    return r - alpha * g


FD_STEP = 1e-5
FD_MAX_DIM = 200


def meta_gradient_exact(theta, loss: TaskLoss, support: Dataset, query: Dataset,
                        alpha: float) -> np.ndarray:
    """``(I - alpha H_s(theta)) grad L(phi, query)`` with an exact Hessian product.

    Families without an analytic HVP fall back to central differences of the
    meta-objective (step ``FD_STEP``), which is only allowed up to
    ``FD_MAX_DIM`` parameters.
    """
    theta = as_param(theta, "theta")
    if loss.has_exact_hvp:
        phi = theta - alpha * loss.gradient(theta, support)
        r = loss.gradient(phi, query)
        return r - alpha * loss.hvp(theta, r, support)
    if theta.shape[0] > FD_MAX_DIM:
        raise ValueError(f"finite-difference meta-gradient limited to dim <= {FD_MAX_DIM}")
    return finite_difference_gradient(
        lambda x: meta_objective(x, loss, support, query, AdaptationConfig(alpha)), theta)


def finite_difference_gradient(f, x, step: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    e = np.zeros_like(x)
    for j in range(x.shape[0]):
        e[j] = step
        out[j] = (f(x + e) - f(x - e)) / (2.0 * step)
        e[j] = 0.0
    return out
