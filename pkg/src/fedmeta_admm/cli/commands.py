"""Command implementations: train, evaluate, forgetting, pretrain, diagnose."""
from __future__ import annotations

import csv
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .. import diagnostics
from ..admm import NodeState, PlatformState, RoundRecord
from ..federation import (ExperimentPlan, PartitionSpec, Task, build_run, evaluate_targets,
                          initial_theta, load_checkpoint, partition, save_checkpoint, split_sources_targets,
                          train)
from ..losses import Dataset, TaskLoss, build_loss
from ..meta import AdaptationConfig, DeltaSchedule, inner_adapt
from ..numkit import RngStream, l2_norm
from ..regularizer import BregmanRegularizer, MirrorMap
from .config import RunConfig, format_config
from .datasets import generate_synthetic, load_csv, load_idx

TRACE_COLUMNS = ("round", "lagrangian", "objective_F", "fosp_gap", "max_primal_residual",
                 "max_dual_delta", "mean_train_loss", "wallclock_s")
ADAPTATION_COLUMNS = ("target_id", "steps", "pre_loss", "post_loss", "pre_acc", "post_acc")
FORGETTING_COLUMNS = ("phase", "task", "loss", "grad_norm", "accuracy")
DIAGNOSE_COLUMNS = ("scope", "id", "quantity", "value", "source")

CHECKPOINT_NAME = "checkpoint.fmadmm"
PRIOR_NAME = "prior.fmadmm"


def fmt(x) -> str:
    """Locale-free, shortest round-trip float formatting."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# -- problem construction --------------------------------------------------------

@dataclass
class Problem:
    sources: List[Task]
    targets: List[Task]
    model: Optional[TaskLoss]
    dataset: Optional[Dataset] = None


def is_mixture(cfg: RunConfig) -> bool:
    return cfg.dataset in ("synthetic-quadratic", "synthetic-cubic")


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "gaussian-classes":
        params = dict(num_classes=cfg.num_classes or 10, features=cfg.features,
                      samples=cfg.samples, class_sep=cfg.class_sep, noise=cfg.noise)
        return generate_synthetic("gaussian-classes", params, cfg.seed)
    if cfg.dataset.startswith("idx:"):
        _, images, labels = cfg.dataset.split(":")
        return load_idx(images, labels)
    if cfg.dataset.startswith("csv:"):
        return load_csv(cfg.dataset[4:])
    raise ValueError(f"dataset {cfg.dataset!r} is not a labelled dataset")


def restrict_classes(data: Dataset, classes: Sequence[int]) -> Dataset:
    if not classes:
        return data
    keep = np.flatnonzero(np.isin(data.labels, np.asarray(classes)))
    if keep.size == 0:
        raise ValueError(f"no samples with labels in {list(classes)}")
    return data.subset(keep)


def num_classes(cfg: RunConfig, data: Dataset) -> int:
    return cfg.num_classes or int(np.max(data.labels)) + 1


def classifier_model(cfg: RunConfig, data: Dataset) -> TaskLoss:
    family = "softmax" if cfg.model == "auto" else cfg.model
    if family in ("quadratic", "cubic"):
        raise ValueError(f"model {family!r} needs a synthetic mixture dataset")
    return build_loss(family, n_features=data.width, n_classes=num_classes(cfg, data),
                      hidden=cfg.hidden)


def partition_spec(cfg: RunConfig) -> PartitionSpec:
    return PartitionSpec(cfg.num_nodes, cfg.classes_per_node, cfg.size_low, cfg.size_high,
                         cfg.source_fraction, cfg.split_fraction, cfg.seed)


def build_problem(cfg: RunConfig) -> Problem:
    if is_mixture(cfg):
        if cfg.model not in ("auto", "quadratic", "cubic"):
            raise ValueError(f"model {cfg.model!r} does not fit a synthetic mixture")
        kind = "quadratic-mixture" if cfg.dataset == "synthetic-quadratic" else "cubic-mixture"
        curvature = cfg.curvature[0] if len(cfg.curvature) == 1 else np.array(cfg.curvature)
        params = dict(num_nodes=cfg.num_nodes, dim=cfg.dim, spread=cfg.spread,
                      center_offset=cfg.center_offset,
                      size_low=cfg.size_low, size_high=cfg.size_high,
                      offset_noise=cfg.offset_noise, split_fraction=cfg.split_fraction,
                      curvature=curvature, kappa=cfg.kappa)
        tasks = generate_synthetic(kind, params, cfg.seed)
        sources, targets = split_sources_targets(tasks, cfg.source_fraction,
                                                 RngStream(cfg.seed).child("roles"))
        return Problem(sources, targets, None)
    data = load_dataset(cfg)
    model = classifier_model(cfg, data)
    sources, targets = partition(restrict_classes(data, cfg.class_subset), partition_spec(cfg))
    return Problem(sources, targets, model, data)


def load_prior(cfg: RunConfig) -> Optional[np.ndarray]:
    if cfg.prior.lower() == "none":
        return None
    path = Path(cfg.prior)
    if not path.is_file():
        raise FileNotFoundError(f"prior checkpoint {path} does not exist")
    return load_checkpoint(path).theta


def make_plan(cfg: RunConfig, prior=None, lam: Optional[float] = None,
              init: Optional[str] = None) -> ExperimentPlan:
    rho = cfg.rho[0] if len(cfg.rho) == 1 else np.array(cfg.rho)
    return ExperimentPlan(
        algorithm=cfg.algorithm, rounds=cfg.rounds, alpha=cfg.alpha,
        lam=cfg.lam if lam is None else lam, rho=rho,
        delta=DeltaSchedule(cfg.delta_scale, cfg.delta_offset, cfg.delta_power),
        weights=cfg.weights, eval_steps=cfg.eval_steps, eval_alpha=cfg.eval_alpha,
        regularizer=cfg.regularizer,
        mirror_weights=np.array(cfg.mirror_weights) if cfg.mirror_weights else None,
        prior=prior, init=init or cfg.init, init_std=cfg.init_std, fedavg_lr=cfg.fedavg_lr,
        local_steps=cfg.local_steps, beta_outer=cfg.beta_outer, inner_tol=cfg.inner_tol,
        inner_max_iters=cfg.inner_max_iters, seed=cfg.seed)


def _check_rho(cfg: RunConfig, problem: Problem) -> None:
    if len(cfg.rho) not in (1, len(problem.sources)):
        raise ValueError(f"rho has {len(cfg.rho)} values for {len(problem.sources)} source nodes")


# -- train -------------------------------------------------------------------------

def trace_row(rec: RoundRecord, timing: bool) -> tuple:
    return (rec.round, rec.lagrangian, rec.objective_F, rec.fosp_gap, rec.max_primal_residual,
            rec.max_dual_delta, rec.mean_train_loss, rec.wallclock if timing else 0.0)


class TraceWriter:
    """Append rows to trace.csv, flushing each one so partial traces survive aborts."""

    def __init__(self, path: Path, keep_before: Optional[int] = None):
        kept: List[str] = []
        if keep_before is not None and path.is_file():
            with open(path, newline="", encoding="utf-8") as fh:
                for row in list(csv.reader(fh))[1:]:
                    if row and int(row[0]) < keep_before:
                        kept.append(",".join(row))
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(TRACE_COLUMNS)
        for line in kept:
            self._fh.write(line + "\n")
        self._fh.flush()

    def write(self, row) -> None:
        self._w.writerow([fmt(v) for v in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def prepare_output(cfg: RunConfig, out: TextIO) -> Path:
    """Create the output directory and echo the resolved configuration."""
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    text = format_config(cfg)
    out.write(text)
    (outdir / "config.effective").write_text(text, encoding="utf-8")
    return outdir


def setup_run(cfg: RunConfig, problem: Problem, resume: Optional[Path] = None,
              theta0=None) -> Tuple[ExperimentPlan, List[NodeState], PlatformState]:
    _check_rho(cfg, problem)
    plan = make_plan(cfg, load_prior(cfg))
    nodes, platform = build_run(plan, problem.sources, problem.model, theta0)
    if resume is not None:
        nodes, platform = load_checkpoint(resume).restore(nodes)
    return plan, nodes, platform


def run_training(cfg: RunConfig, plan: ExperimentPlan, nodes, platform, writer: Optional[TraceWriter],
                 outdir: Optional[Path]):
    """Advance to ``cfg.rounds``, checkpointing every ``checkpoint_every`` rounds."""
    hooks = [lambda rec: writer.write(trace_row(rec, cfg.timing))] if writer else []
    record = writer is not None
    while platform.round < cfg.rounds:
        chunk = cfg.rounds - platform.round
        if cfg.checkpoint_every > 0:
            chunk = min(chunk, cfg.checkpoint_every - platform.round % cfg.checkpoint_every)
        result = train(plan, nodes, platform, chunk, hooks, record)
        nodes, platform = result.nodes, result.platform
        if outdir is not None and cfg.checkpoint_every > 0 and platform.round % cfg.checkpoint_every == 0:
            save_checkpoint(outdir / f"checkpoint_{platform.round:06d}.fmadmm", platform, nodes)
    return nodes, platform


def cmd_train(cfg: RunConfig, resume: Optional[str] = None, out: Optional[TextIO] = None) -> int:
    out = out or sys.stdout
    outdir = prepare_output(cfg, out)
    problem = build_problem(cfg)
    resume_path = Path(resume) if resume else None
    plan, nodes, platform = setup_run(cfg, problem, resume_path)
    if platform.round > cfg.rounds:
        raise ValueError(f"checkpoint is at round {platform.round}, beyond rounds={cfg.rounds}")
    writer = TraceWriter(outdir / "trace.csv", platform.round if resume_path else None)
    try:
        nodes, platform = run_training(cfg, plan, nodes, platform, writer, outdir)
    finally:
        writer.close()
    save_checkpoint(outdir / CHECKPOINT_NAME, platform, nodes)
    out.write(f"trained {platform.round} rounds; checkpoint {outdir / CHECKPOINT_NAME}\n")
    return 0


# -- evaluate ----------------------------------------------------------------------

def _checkpoint_theta(path: Path, dim: int) -> np.ndarray:
    ckpt = load_checkpoint(path)
    if ckpt.dim != dim:
        raise ValueError(f"checkpoint dimension {ckpt.dim} does not match the model dimension {dim}")
    return ckpt.theta


def model_dim(problem: Problem) -> int:
    task = (problem.sources or problem.targets)[0]
    return (task.loss if task.loss is not None else problem.model).dim


def cmd_evaluate(cfg: RunConfig, checkpoint: Optional[str] = None, out: Optional[TextIO] = None) -> int:
    out = out or sys.stdout
    outdir = prepare_output(cfg, out)
    problem = build_problem(cfg)
    path = Path(checkpoint) if checkpoint else outdir / CHECKPOINT_NAME
    theta = _checkpoint_theta(path, model_dim(problem))
    plan = make_plan(cfg)
    rows = evaluate_targets(theta, problem.targets, plan, problem.model)
    write_csv(outdir / "adaptation.csv", ADAPTATION_COLUMNS,
              [(r.target_id, r.steps, r.pre_loss, r.post_loss, r.pre_acc, r.post_acc) for r in rows])
    out.write(f"evaluated {len(problem.targets)} targets; wrote {outdir / 'adaptation.csv'}\n")
    return 0


# -- prior task / forgetting -------------------------------------------------------

def prior_task(cfg: RunConfig, data: Dataset) -> Tuple[TaskLoss, Dataset]:
    return classifier_model(cfg, data), restrict_classes(data, cfg.prior_classes)


def pretrain_prior(loss: TaskLoss, data: Dataset, lr: float, tol: float, max_iters: int,
                   theta0=None) -> Tuple[np.ndarray, float, int]:
    """Full-batch gradient descent until the gradient norm reaches ``tol``."""
    theta = np.zeros(loss.dim) if theta0 is None else np.array(theta0, dtype=np.float64)
    g = loss.gradient(theta, data)
    it = 0
    while l2_norm(g) > tol and it < max_iters:
        theta = theta - lr * g
        g = loss.gradient(theta, data)
        it += 1
    return theta, l2_norm(g), it


def cmd_pretrain(cfg: RunConfig, out: Optional[TextIO] = None) -> int:
    out = out or sys.stdout
    outdir = prepare_output(cfg, out)
    loss, data = prior_task(cfg, load_dataset(cfg))
    init = cfg.init if cfg.init in ("zeros", "gaussian") else "auto"
    theta0 = initial_theta(make_plan(cfg, init=init), loss)
    theta, eps, iters = pretrain_prior(loss, data, cfg.prior_lr, cfg.prior_tol, cfg.prior_max_iters, theta0)
    reg = BregmanRegularizer(np.zeros(loss.dim), 0.0, MirrorMap("squared-euclidean"))
    save_checkpoint(outdir / PRIOR_NAME, PlatformState(theta, reg, 0))
    if eps > cfg.prior_tol:
        out.write(f"warning: gradient norm {eps:.6g} above prior_tol after {iters} iterations\n")
    out.write(f"prior model: {iters} iterations, epsilon_p = {eps!r}; wrote {outdir / PRIOR_NAME}\n")
    return 0


@dataclass(frozen=True)
class ForgettingRow:
    phase: str
    task: str
    loss: float
    grad_norm: float
    accuracy: float


def new_task_metrics(theta, targets: Sequence[Task], model: TaskLoss, alpha: float,
                     steps: int) -> Tuple[float, float, float]:
    """Mean adapted query loss, gradient norm and accuracy over the new-task targets."""
    cfg = AdaptationConfig(alpha, steps)
    losses, grads, accs = [], [], []
    for t in targets:
        phi = inner_adapt(theta, model, t.support, cfg)
        losses.append(model.value(phi, t.query))
        grads.append(l2_norm(model.gradient(phi, t.query)))
        accs.append(diagnostics.adaptation_metrics(theta, _Target(model, t), cfg).post_acc)
    return float(np.mean(losses)), float(np.mean(grads)), float(np.mean(accs))


@dataclass(frozen=True, eq=False)
class _Target:
    loss: TaskLoss
    task: Task

    @property
    def support(self):
        return self.task.support

    @property
    def query(self):
        return self.task.query


def forgetting_protocol(cfg: RunConfig, data: Dataset, theta_p,
                        lambdas: Optional[Sequence[float]] = None) -> List[ForgettingRow]:
    """Two-phase split-task protocol.

    The prior model ``theta_p`` was fitted on the prior classes; each lambda run
    starts from ``theta_p`` (unless ``init`` says otherwise), meta-trains on the
    new classes with ``D_h(theta, theta_p)`` and is scored on both tasks.
    """
    p_loss, p_data = prior_task(cfg, data)
    theta_p = np.asarray(theta_p, dtype=np.float64)
    if theta_p.shape != (p_loss.dim,):
        raise ValueError(f"prior dimension {theta_p.shape[0]} does not match the model dimension {p_loss.dim}")
    new_data = restrict_classes(data, cfg.new_classes)
    sources, targets = partition(new_data, partition_spec(cfg))
    alpha_eval = cfg.alpha if cfg.eval_alpha is None else cfg.eval_alpha
    steps = cfg.eval_steps[0]

    def score(phase, theta):
        pl, pg, pa = diagnostics.forgetting_eval(theta, p_loss, p_data)
        nl, ng, na = new_task_metrics(theta, targets, p_loss, alpha_eval, steps)
        return [ForgettingRow(phase, "prior", pl, pg, pa), ForgettingRow(phase, "new", nl, ng, na)]

    rows = score("prior_model", theta_p)
    init = "prior" if cfg.init == "auto" else cfg.init
    for lam in (cfg.lambda_sweep if lambdas is None else lambdas):
        plan = make_plan(cfg, prior=theta_p, lam=lam, init=init)
        nodes, platform = build_run(plan, sources, p_loss)
        result = train(plan, nodes, platform, plan.rounds, record=False)
        rows += score(f"lambda={fmt(float(lam))}", result.theta)
    return rows


def cmd_forgetting(cfg: RunConfig, out: Optional[TextIO] = None) -> int:
    out = out or sys.stdout
    outdir = prepare_output(cfg, out)
    if cfg.prior.lower() == "none":
        raise FileNotFoundError("forgetting needs a prior checkpoint: set 'prior = <path>' (see 'pretrain')")
    theta_p = load_prior(cfg)
    rows = forgetting_protocol(cfg, load_dataset(cfg), theta_p)
    write_csv(outdir / "forgetting.csv", FORGETTING_COLUMNS,
              [(r.phase, r.task, r.loss, r.grad_norm, r.accuracy) for r in rows])
    for r in rows:
        out.write(f"{r.phase:>14} {r.task:>5}: loss {r.loss:.6g}  grad {r.grad_norm:.6g}  acc {r.accuracy:.4f}\n")
    return 0


# -- diagnose ----------------------------------------------------------------------

def diagnose_rows(cfg: RunConfig, problem: Problem, center) -> Tuple[List[tuple], str]:
    plan = make_plan(cfg, load_prior(cfg))
    nodes, platform = build_run(plan, problem.sources, problem.model)
    center = np.asarray(center if center is not None else platform.theta, dtype=np.float64)
    rng = RngStream(cfg.seed).child("diagnose")
    rows: List[tuple] = []
    nus, sources = [], set()
    for nd in nodes:
        data = Dataset.concat([nd.support, nd.query])
        est = diagnostics.estimate_constants(nd.loss, data, cfg.probes, cfg.radius,
                                             rng.child("constants", nd.id), center)
        nu = diagnostics.nu_constant(est.mu, est.beta, est.zeta, cfg.alpha)
        label = "analytic" if est.analytic else "estimated"
        sources.add(label)
        nus.append(nu)
        for q, v in (("mu", est.mu), ("beta", est.beta), ("zeta", est.zeta), ("nu", nu),
                     ("rho", nd.rho), ("w", nd.w)):
            rows.append(("node", nd.id, q, v, label if q not in ("rho", "w") else "config"))
    source = sources.pop() if len(sources) == 1 else "mixed"
    reg = platform.reg
    report = diagnostics.assumption5_check([nd.rho for nd in nodes], nus, [nd.w for nd in nodes],
                                           reg.lam, reg.mu_r, len(nodes), plan.delta, source)
    for nd, conds, margins in zip(nodes, report.conditions, report.margins):
        for k, (c, m) in enumerate(zip(conds, margins), 1):
            rows.append(("node", nd.id, f"penalty_condition{k}", float(c), source))
            rows.append(("node", nd.id, f"penalty_margin{k}", m, source))
    rows.append(("global", -1, "penalty_conditions", float(report.rho_conditions_hold), source))
    rows.append(("global", -1, "delta_summable", float(bool(report.delta_summable)), "analytic"))
    rows.append(("global", -1, "conditions_overall", float(report.overall), source))
    for tid, task in enumerate(problem.targets):
        target = _Target(task.loss if task.loss is not None else problem.model, task)
        sim = diagnostics.estimate_similarity(nodes, target, cfg.probes, cfg.radius,
                                              rng.child("similarity", tid), center)
        for nd, pg, ph in zip(nodes, sim.psi_g, sim.psi_h):
            rows.append((f"target{tid}", nd.id, "psi_g", pg, "estimated"))
            rows.append((f"target{tid}", nd.id, "psi_h", ph, "estimated"))

    lines = [f"constants ({source}; estimates are probe maxima, i.e. lower bounds):"]
    for nd, nu in zip(nodes, nus):
        vals = {q: v for s, i, q, v, _ in rows if s == "node" and i == nd.id}
        lines.append(f"  node {nd.id}: mu={vals['mu']:.6g} beta={vals['beta']:.6g} "
                     f"zeta={vals['zeta']:.6g} nu={nu:.6g} rho={nd.rho:.6g} w={nd.w:.6g}")
    lines.append(report.describe())
    if problem.targets:
        lines.append(f"task similarity over {cfg.probes} probes (estimated): see diagnose.csv")
    return rows, "\n".join(lines) + "\n"


def cmd_diagnose(cfg: RunConfig, checkpoint: Optional[str] = None, out: Optional[TextIO] = None) -> int:
    out = out or sys.stdout
    outdir = prepare_output(cfg, out)
    problem = build_problem(cfg)
    _check_rho(cfg, problem)
    center = _checkpoint_theta(Path(checkpoint), model_dim(problem)) if checkpoint else None
    rows, text = diagnose_rows(cfg, problem, center)
    write_csv(outdir / "diagnose.csv", DIAGNOSE_COLUMNS, rows)
    (outdir / "diagnose.txt").write_text(text, encoding="utf-8")
    out.write(text)
    return 0
