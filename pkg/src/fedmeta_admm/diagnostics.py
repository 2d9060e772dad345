"""Theory-facing instrumentation.

Constant estimates (smoothness, gradient bound, Hessian-Lipschitz, task
similarity) are empirical maxima over random probes, so they are lower
bounds on the true suprema and are labelled as such. Only the quadratic
family reports closed-form constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .losses import CubicLoss, Dataset, QuadraticLoss, TaskLoss, predict_accuracy
from .meta import (AdaptationConfig, DeltaSchedule, inner_adapt, meta_gradient_exact,
                   meta_objective)
from .numkit import RngStream, as_param, l2_norm

HVP_FD_STEP = 1e-5


@dataclass(frozen=True)
class ConstantsEstimate:
    mu: float
    beta: float
    zeta: float
    probes: int
    analytic: bool

    @property
    def label(self) -> str:
        return "analytic" if self.analytic else "estimated (lower bound)"


@dataclass(frozen=True)
class SimilarityEstimate:
    psi_g: Tuple[float, ...]
    psi_h: Tuple[float, ...]
    probes: int


def _hvp(loss: TaskLoss, x, v, D: Dataset) -> np.ndarray:
    if loss.has_exact_hvp:
        return loss.hvp(x, v, D)
    return (loss.gradient(x + HVP_FD_STEP * v, D) - loss.gradient(x - HVP_FD_STEP * v, D)) / (2 * HVP_FD_STEP)


def _ball_point(rng: RngStream, center: np.ndarray, radius: float) -> np.ndarray:
    n = center.shape[0]
    u = rng.generator.standard_normal(n)
    u /= np.linalg.norm(u)
    return center + radius * rng.generator.uniform() ** (1.0 / n) * u


def _unit(rng: RngStream, n: int) -> np.ndarray:
    v = rng.generator.standard_normal(n)
    return v / np.linalg.norm(v)


def estimate_constants(loss: TaskLoss, D: Dataset, probes: int, radius: float, rng: RngStream,
                       center=None) -> ConstantsEstimate:
    """Estimate ``mu`` (gradient Lipschitz), ``beta`` (gradient bound) and
    ``zeta`` (Hessian Lipschitz) over the ball of ``radius`` around ``center``.

    Probe points are drawn sequentially, so a larger ``probes`` extends the
    same sample and the estimates are non-decreasing in ``probes``.
    """
    if probes < 2:
        raise ValueError("estimate_constants needs at least two probes")
    center = np.zeros(loss.dim) if center is None else as_param(center, "center")

    if type(loss) is QuadraticLoss:
        eig = np.linalg.eigvalsh(loss.hessian_matrix())
        mu = float(np.max(np.abs(eig)))
        # the gradient is A (x - m) with m the dataset centre
        m = loss.center + D.features.mean(axis=0)
        beta = mu * (l2_norm(center - m) + radius)
        return ConstantsEstimate(mu, beta, 0.0, probes, True)

    mu = beta = zeta = 0.0
    x_prev = _ball_point(rng, center, radius)
    g_prev = loss.gradient(x_prev, D)
    beta = l2_norm(g_prev)
    for _ in range(probes - 1):
        x = _ball_point(rng, center, radius)
        v = _unit(rng, loss.dim)
        g = loss.gradient(x, D)
        dist = l2_norm(x - x_prev)
        beta = max(beta, l2_norm(g))
        if dist > 0:
            mu = max(mu, l2_norm(g - g_prev) / dist)
            zeta = max(zeta, l2_norm(_hvp(loss, x, v, D) - _hvp(loss, x_prev, v, D)) / dist)
        x_prev, g_prev = x, g
    return ConstantsEstimate(mu, beta, zeta, probes, False)


def nu_constant(mu: float, beta: float, zeta: float, alpha: float) -> float:
    """Smoothness constant of the one-step meta-loss."""
    if min(mu, beta, zeta, alpha) < 0:
        raise ValueError("nu_constant inputs must be non-negative")
    return (1 + alpha * mu) * (1 + mu) * mu + alpha * beta * zeta


@dataclass(frozen=True)
class PenaltyConditionReport:
    conditions: Tuple[Tuple[bool, bool, bool], ...]
    margins: Tuple[Tuple[float, float, float], ...]
    rho_conditions_hold: bool
    delta_summable: Optional[bool]
    source: str = "estimated"

    @property
    def overall(self) -> bool:
        return self.rho_conditions_hold and self.delta_summable is not False

    def describe(self) -> str:
        lines = [f"penalty conditions ({self.source} constants):"]
        for i, ((a, b, c), (ma, mb, mc)) in enumerate(zip(self.conditions, self.margins)):
            lines.append(f"  node {i}: rho/2-4w*nu>0 {a} ({ma:.6g}); "
                         f"second condition {b} ({mb:.6g}); rho-3nu>0 {c} ({mc:.6g})")
        if self.delta_summable is None:
            lines.append("  delta schedule: not checked")
        elif self.delta_summable:
            lines.append("  delta schedule: summable")
        else:
            lines.append("  delta schedule: NOT summable; the convergence conditions require sum_t delta_t < inf")
        lines.append(f"  overall: {self.overall}")
        return "\n".join(lines)


def assumption5_check(rho: Sequence[float], nu: Sequence[float], w: Sequence[float], lam: float,
                      mu_r: float, I: int, delta: Optional[DeltaSchedule] = None,
                      source: str = "estimated") -> PenaltyConditionReport:
    """Evaluate the three penalty-parameter inequalities per node, exactly."""
    rho, nu, w = (np.asarray(a, dtype=np.float64) for a in (rho, nu, w))
    if not rho.shape == nu.shape == w.shape:
        raise ValueError("rho, nu and w must have one entry per node")
    conds, margins = [], []
    for r, n_, wi in zip(rho, nu, w):
        m1 = r / 2 - 4 * wi * n_
        m2 = r / 2 - 2 * wi ** 2 * n_ ** 2 * (4 * wi * n_ / r ** 2 + 1 / r) - lam * mu_r / (2 * I)
        m3 = r - 3 * n_
        conds.append((bool(m1 > 0), bool(m2 > 0), bool(m3 > 0)))
        margins.append((float(m1), float(m2), float(m3)))
    ok = all(all(c) for c in conds)
    summable = None if delta is None else delta.summable
    return PenaltyConditionReport(tuple(conds), tuple(margins), ok, summable, source)


def _ordered(nodes):
    return sorted(nodes, key=lambda nd: nd.id)


def lagrangian_value(nodes, platform, alpha: float) -> float:
    """Augmented Lagrangian at the nodes' ``(theta_i, y_i)`` and ``platform.theta``."""
    theta = platform.theta
    cfg = AdaptationConfig(alpha)
    total = 0.0
    for nd in _ordered(nodes):
        if nd.theta_i.shape != theta.shape:
            raise ValueError(f"node {nd.id} dimension mismatch")
        d = nd.theta_i - theta
        total += (nd.w * meta_objective(nd.theta_i, nd.loss, nd.support, nd.query, cfg)
                  + float(nd.y_i @ d) + 0.5 * nd.rho * float(d @ d))
    return total + platform.reg.lam * platform.reg.value(theta)


def objective_value(theta, nodes, platform, alpha: float) -> float:
    cfg = AdaptationConfig(alpha)
    total = 0.0
    for nd in _ordered(nodes):
        total += nd.w * meta_objective(theta, nd.loss, nd.support, nd.query, cfg)
    return total + platform.reg.lam * platform.reg.value(theta)


def objective_gradient(theta, nodes, platform, alpha: float) -> np.ndarray:
    theta = as_param(theta, "theta")
    total = np.zeros_like(theta)
    for nd in _ordered(nodes):
        total = total + nd.w * meta_gradient_exact(theta, nd.loss, nd.support, nd.query, alpha)
    if platform.reg.lam != 0.0:
        total = total + platform.reg.lam * platform.reg.gradient(theta)
    return total


def fosp_gap(theta, nodes, platform, alpha: float) -> float:
    """Norm of the exact regularized meta-objective gradient (never the estimator)."""
    return l2_norm(objective_gradient(theta, nodes, platform, alpha))


def estimate_similarity(nodes, target, probes: int, radius: float, rng: RngStream,
                        center=None) -> SimilarityEstimate:
    """Probe-maximum gradient and Hessian differences between each node and the target."""
    if probes < 1:
        raise ValueError("probes must be at least 1")
    n = target.loss.dim
    center = np.zeros(n) if center is None else as_param(center, "center")
    target_data = Dataset.concat([target.support, target.query])
    points = [(_ball_point(rng, center, radius), _unit(rng, n)) for _ in range(probes)]
    psi_g, psi_h = [], []
    for nd in _ordered(nodes):
        data = Dataset.concat([nd.support, nd.query])
        g_best = h_best = 0.0
        for x, v in points:
            g_best = max(g_best, l2_norm(target.loss.gradient(x, target_data) - nd.loss.gradient(x, data)))
            h_best = max(h_best, l2_norm(_hvp(target.loss, x, v, target_data) - _hvp(nd.loss, x, v, data)))
        psi_g.append(g_best)
        psi_h.append(h_best)
    return SimilarityEstimate(tuple(psi_g), tuple(psi_h), probes)


@dataclass(frozen=True)
class AdaptationMetrics:
    pre_loss: float
    post_loss: float
    pre_acc: float
    post_acc: float


def adaptation_metrics(theta, target, cfg: AdaptationConfig) -> AdaptationMetrics:
    """Query-set loss/accuracy before and after adapting on the support set."""
    loss = target.loss
    phi = inner_adapt(theta, loss, target.support, cfg)
    nan = float("nan")
    pre_acc = predict_accuracy(loss, theta, target.query) if loss.is_classifier else nan
    post_acc = predict_accuracy(loss, phi, target.query) if loss.is_classifier else nan
    return AdaptationMetrics(loss.value(theta, target.query), loss.value(phi, target.query),
                             pre_acc, post_acc)


def adaptation_eval(theta, target, cfg: AdaptationConfig) -> Tuple[float, float]:
    m = adaptation_metrics(theta, target, cfg)
    return m.post_loss, m.post_acc


def forgetting_eval(theta, prior_loss: TaskLoss, prior_data: Dataset) -> Tuple[float, float, float]:
    """Forgetting cost on a previous task: loss, gradient norm and accuracy."""
    acc = predict_accuracy(prior_loss, theta, prior_data) if prior_loss.is_classifier else float("nan")
    return (prior_loss.value(theta, prior_data),
            l2_norm(prior_loss.gradient(theta, prior_data)), acc)
