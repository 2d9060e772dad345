"""Inexact-ADMM federated meta-learning (ADMM-FedMeta), its exact-ADMM oracle
and the FedAvg / Per-FedAvg baselines.

One communication round ``t`` of ADMM-FedMeta:

* every node adapts ``phi = theta - alpha grad L(theta, support)``, forms
  ``r = grad L(phi, query)`` and the Hessian-free product ``g`` with
  ``delta(t)``, then takes the closed-form linearized step
  ``theta_i = theta - (y_i + w_i (r - alpha g)) / rho_i`` and the dual step
  ``y_i += rho_i (theta_i - theta)``;
* the platform aggregates
  ``theta <- (sum_i (y_i + rho_i theta_i) - lam grad D_h(theta, prior)) / sum_i rho_i``.

Only the platform ever touches the regularizer.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .losses import Dataset, TaskLoss
from .meta import (AdaptationConfig, DeltaSchedule, hessian_free_product,
                   meta_gradient_estimate, meta_gradient_exact)
from .numkit import NonFiniteError, as_param, check_finite, l2_norm
from .regularizer import BregmanRegularizer

log = logging.getLogger(__name__)

DUAL_IDENTITY_RTOL = 1e-10


class DivergenceError(FloatingPointError):
    """A non-finite value appeared; carries the round and the node id."""

    def __init__(self, round_index: int, node_id: Optional[int], detail: str = ""):
        self.round_index = round_index
        self.node_id = node_id
        where = "platform" if node_id is None else f"node {node_id}"
        super().__init__(f"divergence at round {round_index} ({where}): {detail}")


class DualIdentityError(AssertionError):
    pass


@dataclass(frozen=True, eq=False)
class NodeStep:
    """Intermediates of the last inexact update, kept for identity checks."""

    phi: np.ndarray
    query_grad: np.ndarray
    g: np.ndarray
    delta: float


@dataclass(frozen=True, eq=False)
class NodeState:
    id: int
    loss: TaskLoss
    support: Dataset
    query: Dataset
    w: float
    rho: float
    theta_i: np.ndarray
    y_i: np.ndarray
    delta: DeltaSchedule = field(default_factory=DeltaSchedule)
    last_step: Optional[NodeStep] = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"node {self.id}: rho must be positive")
        if not 0 < self.w <= 1:
            raise ValueError(f"node {self.id}: weight must lie in (0, 1]")
        if self.theta_i.shape != (self.loss.dim,) or self.y_i.shape != (self.loss.dim,):
            raise ValueError(f"node {self.id}: state vectors must have dim {self.loss.dim}")

    @property
    def dim(self) -> int:
        return self.loss.dim

    @property
    def num_samples(self) -> int:
        return self.support.size + self.query.size


@dataclass(eq=False)
class PlatformState:
    theta: np.ndarray
    reg: BregmanRegularizer
    round: int = 0

    def __post_init__(self):
        self.theta = as_param(self.theta, "theta")
        if self.theta.shape != self.reg.prior.shape:
            raise ValueError("meta-model and prior dimensions differ")
        if self.round < 0:
            raise ValueError("round must be non-negative")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    lagrangian: float
    objective_F: float
    fosp_gap: float
    primal_residuals: Tuple[float, ...]
    dual_deltas: Tuple[float, ...]
    mean_train_loss: float
    wallclock: float

    @property
    def max_primal_residual(self) -> float:
        return max(self.primal_residuals, default=0.0)

    @property
    def max_dual_delta(self) -> float:
        return max(self.dual_deltas, default=0.0)


def make_nodes(tasks: Sequence[Tuple[TaskLoss, Dataset, Dataset]], theta0, *,
               rho=1.0, weights: str = "data-proportional",
               delta: Optional[DeltaSchedule] = None) -> List[NodeState]:
    """Build source nodes with ``y^{-1} = 0`` and ``theta_i = theta0``.

    ``rho`` is a scalar or one value per node; ``weights`` is
    ``"data-proportional"`` (``D_i / sum D``) or ``"uniform"``.
    """
    theta0 = as_param(theta0, "theta0")
    n_nodes = len(tasks)
    rhos = np.broadcast_to(np.asarray(rho, dtype=np.float64), (n_nodes,))
    sizes = np.array([s.size + q.size for _, s, q in tasks], dtype=np.float64)
    if weights == "data-proportional":
        w = sizes / sizes.sum()
    elif weights == "uniform":
        w = np.full(n_nodes, 1.0 / n_nodes)
    else:
        raise ValueError(f"unknown weight mode {weights!r}")
    delta = delta or DeltaSchedule()
    return [NodeState(i, loss, s, q, float(w[i]), float(rhos[i]), theta0.copy(),
                      np.zeros_like(theta0), delta)
            for i, (loss, s, q) in enumerate(tasks)]


def node_update(node: NodeState, theta_t, alpha: float, t: int) -> NodeState:
    """Inexact local update of ``(theta_i, y_i)`` for round ``t``."""
    if t < 0:
        raise ValueError("round index must be non-negative")
    theta_t = as_param(theta_t, "theta_t")
    if theta_t.shape[0] != node.dim:
        raise ValueError("theta_t dimension mismatch")
    delta = node.delta(t)
    try:
        phi = theta_t - alpha * node.loss.gradient(theta_t, node.support)
        check_finite(phi, "phi")
        r = node.loss.gradient(phi, node.query)
        g = hessian_free_product(node.loss, theta_t, r, delta, node.support)
        theta_i = theta_t - (node.y_i + node.w * (r - alpha * g)) / node.rho
        y_i = node.y_i + node.rho * (theta_i - theta_t)
        check_finite(theta_i, "theta_i")
        check_finite(y_i, "y_i")
    except (NonFiniteError, FloatingPointError) as exc:
        raise DivergenceError(t, node.id, str(exc)) from exc
    return dataclasses.replace(node, theta_i=theta_i, y_i=y_i,
                               last_step=NodeStep(phi, r, g, delta))


def dual_identity_residual(node: NodeState, alpha: float) -> float:
    """Relative residual of ``y_i = -w_i (r - alpha g)`` after an update."""
    st = node.last_step
    if st is None:
        raise ValueError("node has not been updated yet")
    resid = node.y_i + node.w * (st.query_grad - alpha * st.g)
    return l2_norm(resid) / (1.0 + l2_norm(node.y_i))


def platform_aggregate(nodes: Sequence[NodeState], platform: PlatformState) -> np.ndarray:
    ordered = sorted(nodes, key=lambda nd: nd.id)
    rho_sum = 0.0
    acc = np.zeros_like(platform.theta)
    for nd in ordered:
        if nd.dim != platform.theta.shape[0]:
            raise ValueError(f"node {nd.id} dimension mismatch")
        acc = acc + (nd.y_i + nd.rho * nd.theta_i)
        rho_sum += nd.rho
    if rho_sum <= 0:
        raise ValueError("sum of penalty parameters must be positive")
    reg = platform.reg
    if reg.lam != 0.0:
        acc = acc - reg.lam * reg.gradient(platform.theta)
    return acc / rho_sum


def exact_admm_node_update(node: NodeState, theta_t, alpha: float, inner_tol: float = 1e-10,
                           inner_max_iters: int = 10_000, t: int = 0) -> NodeState:
    """Classical ADMM local step: minimize the node's augmented Lagrangian.

    The subproblem ``w F_i(x) + <y, x - theta> + rho/2 ||x - theta||^2`` is
    solved by Barzilai-Borwein gradient descent on exact meta-gradients,
    stopping on the gradient norm. Failure to reach ``inner_tol`` is logged,
    not raised.
    """
    theta_t = as_param(theta_t, "theta_t")

    def grad(x):
        return (node.w * meta_gradient_exact(x, node.loss, node.support, node.query, alpha)
                + node.y_i + node.rho * (x - theta_t))

    x = theta_t.copy()
    gx = grad(x)
    step = 1.0 / node.rho
    converged = False
    for _ in range(inner_max_iters):
        if l2_norm(gx) <= inner_tol:
            converged = True
            break
        x_new = x - step * gx
        g_new = grad(x_new)
        s, dg = x_new - x, g_new - gx
        sy = float(s @ dg)
        step = float(s @ s) / sy if sy > 0 else 1.0 / node.rho
        step = min(step, 10.0 / node.rho)
        x, gx = x_new, g_new
    if not converged:
        log.warning("exact ADMM inner solve at node %d stopped at |grad|=%.3e", node.id, l2_norm(gx))
    try:
        check_finite(x, "theta_i")
    except NonFiniteError as exc:
        raise DivergenceError(t, node.id, str(exc)) from exc
    y_i = node.y_i + node.rho * (x - theta_t)
    return dataclasses.replace(node, theta_i=x, y_i=y_i, last_step=None)


def fedavg_round(nodes: Sequence[NodeState], theta_t, lr: float, local_steps: int = 1) -> np.ndarray:
    """Local full-gradient steps on support+query, then a ``w``-weighted average."""
    if local_steps < 1:
        raise ValueError("local_steps must be at least 1")
    theta_t = as_param(theta_t, "theta_t")
    out = np.zeros_like(theta_t)
    for nd in sorted(nodes, key=lambda n: n.id):
        data = Dataset.concat([nd.support, nd.query])
        x = theta_t
        for _ in range(local_steps):
            x = x - lr * nd.loss.gradient(x, data)
        out = out + nd.w * x
    return check_finite(out, "fedavg model")


def perfedavg_round(nodes: Sequence[NodeState], theta_t, alpha: float, beta_outer: float,
                    t: int = 0) -> np.ndarray:
    """One MAML outer step using the Hessian-free meta-gradient estimate."""
    if beta_outer < 0:
        raise ValueError("beta_outer must be non-negative")
    theta_t = as_param(theta_t, "theta_t")
    total = np.zeros_like(theta_t)
    for nd in sorted(nodes, key=lambda n: n.id):
        total = total + nd.w * meta_gradient_estimate(theta_t, nd.loss, nd.support, nd.query,
                                                      alpha, nd.delta(t))
    return check_finite(theta_t - beta_outer * total, "per-fedavg model")


# -- run loops ---------------------------------------------------------------

Hook = Callable[[RoundRecord], None]


@dataclass
class RunResult:
    nodes: List[NodeState]
    platform: PlatformState
    trace: List[RoundRecord]
    max_dual_residual: float = 0.0

    @property
    def theta(self) -> np.ndarray:
        return self.platform.theta


def _record(t, nodes, platform, alpha, prev_y, elapsed, consensus=False) -> RoundRecord:
    from . import diagnostics

    lag = diagnostics.lagrangian_value(nodes, platform, alpha)
    obj = diagnostics.objective_value(platform.theta, nodes, platform, alpha)
    try:
        gap = diagnostics.fosp_gap(platform.theta, nodes, platform, alpha)
    except ValueError:
        gap = float("nan")
    cfg = AdaptationConfig(alpha)
    from .meta import meta_objective
    train = float(np.mean([meta_objective(platform.theta, nd.loss, nd.support, nd.query, cfg)
                           for nd in nodes]))
    if consensus:
        primal = tuple(0.0 for _ in nodes)
        dual = tuple(0.0 for _ in nodes)
    else:
        primal = tuple(l2_norm(nd.theta_i - platform.theta) for nd in nodes)
        dual = tuple(l2_norm(nd.y_i - py) for nd, py in zip(nodes, prev_y))
    return RoundRecord(t, lag, obj, gap, primal, dual, train, elapsed)


def _safe_record(t, *args, **kwargs) -> RoundRecord:
    try:
        return _record(t, *args, **kwargs)
    except DivergenceError:
        raise
    except FloatingPointError as exc:
        raise DivergenceError(t, None, f"non-finite diagnostics: {exc}") from exc


def run_admm_fedmeta(nodes: Sequence[NodeState], platform: PlatformState, alpha: float,
                     rounds: int, hooks: Sequence[Hook] = (), *, exact: bool = False,
                     inner_tol: float = 1e-10, inner_max_iters: int = 10_000,
                     check_dual: bool = True, record: bool = True,
                     n_jobs: int = 1) -> RunResult:
    """Run ``rounds`` rounds starting from ``platform.round``.

    With ``exact=True`` the local step solves the subproblem exactly (the
    classical ADMM oracle). ``n_jobs > 1`` updates nodes in a thread pool;
    results are identical because each node only reads ``theta^t``.
    """
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    nodes = sorted(nodes, key=lambda nd: nd.id)
    platform = dataclasses.replace(platform)
    trace: List[RoundRecord] = []
    max_dual = 0.0

    def step(nd, theta_t, t):
        if exact:
            return exact_admm_node_update(nd, theta_t, alpha, inner_tol, inner_max_iters, t)
        return node_update(nd, theta_t, alpha, t)

    pool = ThreadPoolExecutor(n_jobs) if n_jobs > 1 else None
    try:
        for _ in range(rounds):
            t = platform.round
            start = time.perf_counter()
            theta_t = platform.theta
            prev_y = [nd.y_i for nd in nodes]
            if pool is None:
                nodes = [step(nd, theta_t, t) for nd in nodes]
            else:
                nodes = list(pool.map(lambda nd: step(nd, theta_t, t), nodes))
            if check_dual and not exact:
                for nd in nodes:
                    res = dual_identity_residual(nd, alpha)
                    max_dual = max(max_dual, res)
                    if res > DUAL_IDENTITY_RTOL:
                        raise DualIdentityError(
                            f"round {t}, node {nd.id}: dual identity residual {res:.3e} "
                            f"(|theta|={l2_norm(theta_t):.3e}; large values mean the run is diverging)")
            new_theta = platform_aggregate(nodes, platform)
            if not np.all(np.isfinite(new_theta)):
                raise DivergenceError(t, None, "non-finite meta-model")
            platform = PlatformState(new_theta, platform.reg, t + 1)
            elapsed = time.perf_counter() - start
            if record:
                rec = _safe_record(t, nodes, platform, alpha, prev_y, elapsed)
                trace.append(rec)
                for hook in hooks:
                    hook(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(list(nodes), platform, trace, max_dual)


def run_baseline(algorithm: str, nodes: Sequence[NodeState], platform: PlatformState,
                 alpha: float, rounds: int, hooks: Sequence[Hook] = (), *,
                 lr: float = 0.01, local_steps: int = 1, beta_outer: float = 0.005,
                 record: bool = True) -> RunResult:
    """FedAvg (``"fedavg"``) or Per-FedAvg (``"per-fedavg"``) training loop.

    Baselines ignore the regularizer during training; the trace still reports
    the regularized objective so runs are comparable.
    """
    nodes = sorted(nodes, key=lambda nd: nd.id)
    platform = dataclasses.replace(platform)
    trace = []
    for _ in range(rounds):
        t = platform.round
        start = time.perf_counter()
        if algorithm not in ("fedavg", "per-fedavg"):
            raise ValueError(f"unknown baseline {algorithm!r}")
        try:
            if algorithm == "fedavg":
                new_theta = fedavg_round(nodes, platform.theta, lr, local_steps)
            else:
                new_theta = perfedavg_round(nodes, platform.theta, alpha, beta_outer, t)
        except FloatingPointError as exc:
            raise DivergenceError(t, None, str(exc)) from exc
        platform = PlatformState(new_theta, platform.reg, t + 1)
        nodes = [dataclasses.replace(nd, theta_i=new_theta.copy()) for nd in nodes]
        elapsed = time.perf_counter() - start
        if record:
            rec = _safe_record(t, nodes, platform, alpha, None, elapsed, consensus=True)
            trace.append(rec)
            for hook in hooks:
                hook(rec)
    return RunResult(list(nodes), platform, trace)
