"""Experiment harness: node partitioning, experiment recipes, checkpoints."""
from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import diagnostics
from .admm import (NodeState, PlatformState, RoundRecord, RunResult, make_nodes,
                   run_admm_fedmeta, run_baseline)
from .losses import Dataset, MLPLoss, TaskLoss
from .meta import AdaptationConfig, DeltaSchedule
from .numkit import RngStream, draw_gaussian
from .regularizer import BregmanRegularizer, MirrorMap


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    num_nodes: int
    classes_per_node: int = 2
    size_low: int = 20
    size_high: int = 40
    source_fraction: float = 0.8
    split_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be positive")
        if self.classes_per_node < 1:
            raise ValueError("classes_per_node must be positive")
        if not 1 <= self.size_low <= self.size_high:
            raise ValueError("need 1 <= size_low <= size_high")
        for name in ("source_fraction", "split_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    @property
    def num_sources(self) -> int:
        return math.ceil(self.source_fraction * self.num_nodes)


@dataclass(frozen=True, eq=False)
class Task:
    """A node's data before it joins a run; ``loss`` is bound later if None."""

    support: Dataset
    query: Dataset
    loss: Optional[TaskLoss] = None
    classes: Tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return self.support.size + self.query.size


def split_support_query(data: Dataset, fraction: float, rng: RngStream) -> Tuple[Dataset, Dataset]:
    """Shuffle and split; odd sizes give the extra sample to the support set."""
    if data.size < 2:
        raise PartitionError("a node needs at least two samples to form support and query sets")
    order = rng.permutation(data.size)
    n_support = min(max(math.ceil(fraction * data.size), 1), data.size - 1)
    return data.subset(order[:n_support]), data.subset(order[n_support:])


def split_sources_targets(tasks: Sequence, source_fraction: float, rng: RngStream):
    n_src = math.ceil(source_fraction * len(tasks))
    order = rng.permutation(len(tasks))
    return [tasks[i] for i in order[:n_src]], [tasks[i] for i in order[n_src:]]


MAX_CLASS_REDRAWS = 10


def partition(dataset: Dataset, spec: PartitionSpec) -> Tuple[List[Task], List[Task]]:
    """Split a labelled dataset into few-class nodes, then into sources and targets.

    Nodes draw disjoint samples; a node whose chosen classes cannot supply its
    share re-draws its classes up to ``MAX_CLASS_REDRAWS`` times.
    """
    rng = RngStream(spec.seed).child("partition")
    labels = dataset.labels.astype(np.int64)
    classes = np.unique(labels)
    if spec.classes_per_node > classes.size:
        raise PartitionError(f"dataset has {classes.size} classes, nodes need {spec.classes_per_node}")
    if dataset.size < spec.num_nodes * spec.size_high:
        raise PartitionError(f"need at least {spec.num_nodes * spec.size_high} samples, have {dataset.size}")
    pools = {int(c): list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}

    tasks: List[Task] = []
    for i in range(spec.num_nodes):
        size = int(rng.integers(spec.size_low, spec.size_high + 1))
        for _attempt in range(MAX_CLASS_REDRAWS):
            chosen = sorted(int(c) for c in rng.choice(classes, spec.classes_per_node, replace=False))
            base, extra = divmod(size, spec.classes_per_node)
            need = {c: base + (k < extra) for k, c in enumerate(chosen)}
            if all(len(pools[c]) >= need[c] for c in chosen):
                break
        else:
            raise PartitionError(f"node {i}: classes exhausted after {MAX_CLASS_REDRAWS} re-draws")
        idx = []
        for c in chosen:
            idx.extend(pools[c][: need[c]])
            del pools[c][: need[c]]
        support, query = split_support_query(dataset.subset(idx), spec.split_fraction, rng.child("split", i))
        tasks.append(Task(support, query, None, tuple(chosen)))
    return split_sources_targets(tasks, spec.source_fraction, rng.child("roles"))


# -- experiments ---------------------------------------------------------------

ALGORITHMS = ("admm-fedmeta", "exact-admm", "fedavg", "per-fedavg")


@dataclass(frozen=True, eq=False)
class ExperimentPlan:
    algorithm: str = "admm-fedmeta"
    rounds: int = 100
    alpha: float = 0.01
    lam: float = 0.0
    rho: object = 0.3  # scalar or one value per source node
    delta: DeltaSchedule = field(default_factory=DeltaSchedule)
    weights: str = "data-proportional"
    eval_steps: Tuple[int, ...] = (1,)
    eval_alpha: Optional[float] = None
    regularizer: str = "squared-euclidean"
    mirror_weights: Optional[np.ndarray] = None
    prior: Optional[np.ndarray] = None
    init: str = "auto"
    init_std: float = 0.1
    fedavg_lr: float = 0.01
    local_steps: int = 1
    beta_outer: float = 0.005
    inner_tol: float = 1e-10
    inner_max_iters: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be non-negative")
        if self.algorithm in ("admm-fedmeta", "exact-admm") and not np.all(np.asarray(self.rho) > 0):
            raise ValueError("ADMM algorithms need rho > 0")
        if any(s < 1 for s in self.eval_steps):
            raise ValueError("adaptation steps must be at least 1")

    @property
    def adaptation_alpha(self) -> float:
        return self.alpha if self.eval_alpha is None else self.eval_alpha


@dataclass(frozen=True)
class AdaptationRow:
    target_id: int
    steps: int
    pre_loss: float
    post_loss: float
    pre_acc: float
    post_acc: float


@dataclass
class RunArtifacts:
    trace: List[RoundRecord]
    theta: np.ndarray
    adaptation: List[AdaptationRow]
    result: RunResult
    forgetting: Optional[Tuple[float, float, float]] = None

    def mean_post_accuracy(self, steps: int = 1) -> float:
        return float(np.mean([r.post_acc for r in self.adaptation if r.steps == steps]))

    def mean_post_loss(self, steps: int = 1) -> float:
        return float(np.mean([r.post_loss for r in self.adaptation if r.steps == steps]))


def initial_theta(plan: ExperimentPlan, loss: TaskLoss) -> np.ndarray:
    init = plan.init
    if init == "auto":
        init = "gaussian" if isinstance(loss, MLPLoss) else "zeros"
    if init == "zeros":
        return np.zeros(loss.dim)
    if init == "gaussian":
        return draw_gaussian(RngStream(plan.seed).child("init"), loss.dim, 0.0, plan.init_std)
    if init == "prior":
        if plan.prior is None:
            raise ValueError("init='prior' needs a prior model")
        return np.array(plan.prior, dtype=np.float64)
    raise ValueError(f"unknown init {plan.init!r}")


def build_run(plan: ExperimentPlan, sources: Sequence[Task], model: Optional[TaskLoss] = None,
              theta0=None) -> Tuple[List[NodeState], PlatformState]:
    """Bind losses, initialize ``theta^0`` and construct node/platform state."""
    if not sources:
        raise ValueError("at least one source node is required")
    bound = [(t.loss if t.loss is not None else model, t.support, t.query) for t in sources]
    if any(loss is None for loss, _, _ in bound):
        raise ValueError("a model loss is required for tasks without their own loss")
    first = bound[0][0]
    theta0 = initial_theta(plan, first) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    prior = np.zeros(first.dim) if plan.prior is None else np.asarray(plan.prior, dtype=np.float64)
    h = MirrorMap(plan.regularizer, plan.mirror_weights)
    nodes = make_nodes(bound, theta0, rho=plan.rho, weights=plan.weights, delta=plan.delta)
    return nodes, PlatformState(theta0, BregmanRegularizer(prior, plan.lam, h))


def evaluate_targets(theta, targets: Sequence[Task], plan: ExperimentPlan,
                     model: Optional[TaskLoss] = None) -> List[AdaptationRow]:
    rows = []
    for tid, task in enumerate(targets):
        loss = task.loss if task.loss is not None else model
        node = _EvalNode(loss, task.support, task.query)
        for steps in plan.eval_steps:
            m = diagnostics.adaptation_metrics(theta, node, AdaptationConfig(plan.adaptation_alpha, steps))
            rows.append(AdaptationRow(tid, steps, m.pre_loss, m.post_loss, m.pre_acc, m.post_acc))
    return rows


@dataclass(frozen=True, eq=False)
class _EvalNode:
    loss: TaskLoss
    support: Dataset
    query: Dataset


def train(plan: ExperimentPlan, nodes: Sequence[NodeState], platform: PlatformState, rounds: int,
          hooks=(), record: bool = True) -> RunResult:
    if plan.algorithm in ("admm-fedmeta", "exact-admm"):
        return run_admm_fedmeta(nodes, platform, plan.alpha, rounds, hooks,
                                exact=plan.algorithm == "exact-admm", inner_tol=plan.inner_tol,
                                inner_max_iters=plan.inner_max_iters, record=record)
    return run_baseline(plan.algorithm, nodes, platform, plan.alpha, rounds, hooks,
                        lr=plan.fedavg_lr, local_steps=plan.local_steps,
                        beta_outer=plan.beta_outer, record=record)


def run_experiment(plan: ExperimentPlan, sources: Sequence[Task], targets: Sequence[Task],
                   model: Optional[TaskLoss] = None, *, hooks=(), state=None,
                   prior_task: Optional[Tuple[TaskLoss, Dataset]] = None,
                   record: bool = True) -> RunArtifacts:
    """Train per ``plan``, then evaluate fast adaptation on every target.

    ``state`` resumes from ``(nodes, platform)`` (e.g. a loaded checkpoint);
    training then continues until ``platform.round == plan.rounds``. When a
    prior task is given, its forgetting metrics are measured at ``theta^T``.
    """
    nodes, platform = state if state is not None else build_run(plan, sources, model)
    remaining = plan.rounds - platform.round
    if remaining < 0:
        raise ValueError(f"state is already at round {platform.round} > plan.rounds={plan.rounds}")
    result = train(plan, nodes, platform, remaining, hooks, record)
    theta = result.theta
    rows = evaluate_targets(theta, targets, plan, model)
    forgetting = None
    if prior_task is not None:
        forgetting = diagnostics.forgetting_eval(theta, *prior_task)
    return RunArtifacts(result.trace, theta, rows, result, forgetting)


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"FMADMM1"
_HEADER = struct.Struct("<QQQBd")
_NODE = struct.Struct("<Qdd")
_KIND_CODES = {"squared-euclidean": 0, "diagonal-quadratic": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True, eq=False)
class NodeRecord:
    id: int
    rho: float
    w: float
    theta_i: np.ndarray
    y_i: np.ndarray


@dataclass(frozen=True, eq=False)
class Checkpoint:
    round: int
    theta: np.ndarray
    prior: np.ndarray
    lam: float
    kind: str
    mirror_weights: np.ndarray
    nodes: Tuple[NodeRecord, ...]

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def regularizer(self) -> BregmanRegularizer:
        weights = self.mirror_weights if self.kind == "diagonal-quadratic" else None
        return BregmanRegularizer(self.prior, self.lam, MirrorMap(self.kind, weights))

    def restore(self, nodes: Sequence[NodeState]) -> Tuple[List[NodeState], PlatformState]:
        """Overlay the saved ADMM state onto freshly built nodes."""
        if len(nodes) != len(self.nodes):
            raise CheckpointError(f"checkpoint has {len(self.nodes)} nodes, run has {len(nodes)}")
        out = []
        for nd, rec in zip(sorted(nodes, key=lambda n: n.id), self.nodes):
            if nd.dim != self.dim:
                raise CheckpointError(f"dimension mismatch: checkpoint n={self.dim}, model n={nd.dim}")
            if nd.id != rec.id:
                raise CheckpointError(f"node id mismatch: {nd.id} vs {rec.id}")
            out.append(dataclasses.replace(nd, rho=rec.rho, w=rec.w, theta_i=rec.theta_i.copy(),
                                           y_i=rec.y_i.copy(), last_step=None))
        return out, PlatformState(self.theta.copy(), self.regularizer(), self.round)


def save_checkpoint(path, platform: PlatformState, nodes: Sequence[NodeState] = ()) -> None:
    reg = platform.reg
    n = platform.theta.shape[0]
    parts = [MAGIC, _HEADER.pack(n, len(nodes), platform.round, _KIND_CODES[reg.h.kind], reg.lam),
             _f8(platform.theta), _f8(reg.prior), _f8(reg.h.coefficients(n))]
    for nd in sorted(nodes, key=lambda x: x.id):
        parts += [_NODE.pack(nd.id, nd.rho, nd.w), _f8(nd.theta_i), _f8(nd.y_i)]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def _f8(v) -> bytes:
    return np.ascontiguousarray(v, dtype="<f8").tobytes()


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointVersionError(f"{path}: not an FMADMM1 checkpoint (bad magic/version)")
    pos = len(MAGIC)

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(blob):
            raise CheckpointTruncatedError(f"{path}: truncated at byte {len(blob)}")
        chunk = blob[pos: pos + nbytes]
        pos += nbytes
        return chunk

    n, n_nodes, t, kind_code, lam = _HEADER.unpack(take(_HEADER.size))
    if kind_code not in _KIND_NAMES:
        raise CheckpointError(f"{path}: unknown regularizer code {kind_code}")
    vec = lambda: np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
    theta, prior, weights = vec(), vec(), vec()
    recs = []
    for _ in range(n_nodes):
        nid, rho, w = _NODE.unpack(take(_NODE.size))
        recs.append(NodeRecord(nid, rho, w, vec(), vec()))
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return Checkpoint(t, theta, prior, lam, _KIND_NAMES[kind_code], weights, tuple(recs))
