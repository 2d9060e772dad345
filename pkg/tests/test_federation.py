import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import quadratic_mixture
from fedmeta_admm import diagnostics as dg
from fedmeta_admm.admm import run_admm_fedmeta
from fedmeta_admm.cli.datasets import generate_synthetic
from fedmeta_admm.federation import (MAGIC, CheckpointError, CheckpointTruncatedError,
                                     CheckpointVersionError, ExperimentPlan, PartitionError,
                                     PartitionSpec, Task, build_run, load_checkpoint, partition,
                                     run_experiment, save_checkpoint, split_support_query)
from fedmeta_admm.losses import Dataset, MLPLoss, SoftmaxLoss
from fedmeta_admm.meta import AdaptationConfig
from fedmeta_admm.numkit import RngStream


def blobs(n=2000, classes=10, d=4, seed=0, sep=3.0):
    return generate_synthetic("gaussian-classes",
                              dict(num_classes=classes, features=d, samples=n, class_sep=sep), seed)


def keys(data):
    return {tuple(row) for row in data.features}


# -- partition ---------------------------------------------------------------------

def test_partition_fixed_size():
    src, tgt = partition(blobs(), PartitionSpec(10, size_low=20, size_high=20))
    for t in src + tgt:
        assert t.support.size == 10 and t.query.size == 10


def test_partition_deterministic():
    a = partition(blobs(), PartitionSpec(12, seed=3))
    b = partition(blobs(), PartitionSpec(12, seed=3))
    for ta, tb in zip(a[0] + a[1], b[0] + b[1]):
        assert np.array_equal(ta.support.features, tb.support.features)
        assert np.array_equal(ta.query.labels, tb.query.labels)


def test_partition_mean_node_size():
    src, tgt = partition(blobs(4000), PartitionSpec(50, size_low=20, size_high=40, seed=7))
    mean = np.mean([t.size for t in src + tgt])
    assert 28 <= mean <= 32


@given(num_nodes=st.integers(1, 30), seed=st.integers(0, 1000), frac=st.floats(0.05, 0.95))
def test_partition_invariants(num_nodes, seed, frac):
    data = blobs(1500, classes=6)
    spec = PartitionSpec(num_nodes, 2, 5, 40, frac, 0.5, seed)
    src, tgt = partition(data, spec)
    assert len(src) == math.ceil(frac * num_nodes) and len(tgt) == num_nodes - len(src)
    assert not {id(t) for t in src} & {id(t) for t in tgt}
    seen = set()
    for t in src + tgt:
        s, q = keys(t.support), keys(t.query)
        assert not s & q
        assert t.support.size - t.query.size in (0, 1)
        assert set(np.unique(np.concatenate([t.support.labels, t.query.labels]))) <= set(t.classes)
        assert len(t.classes) == 2 and 5 <= t.size <= 40
        node = s | q
        assert not node & seen
        seen |= node


def test_odd_split_gives_support_the_extra_sample():
    d = Dataset(np.arange(7.0)[:, None], np.zeros(7))
    s, q = split_support_query(d, 0.5, RngStream(0))
    assert (s.size, q.size) == (4, 3)
    assert sorted(np.concatenate([s.features[:, 0], q.features[:, 0]])) == list(range(7))


def test_partition_errors():
    with pytest.raises(PartitionError):
        partition(blobs(100), PartitionSpec(10))
    with pytest.raises(PartitionError):
        partition(blobs(2000, classes=2), PartitionSpec(3, classes_per_node=3))
    # one huge class and nine tiny ones: nodes exhaust the tiny classes
    y = np.concatenate([np.zeros(1800, int), np.repeat(np.arange(1, 10), 22)])
    data = Dataset(RngStream(0).normal(size=(y.size, 2)), y)
    with pytest.raises(PartitionError):
        partition(data, PartitionSpec(49, size_low=40, size_high=40))
    with pytest.raises(ValueError):
        PartitionSpec(3, source_fraction=1.0)


# -- experiments -------------------------------------------------------------------

def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(algorithm="sgd")
    with pytest.raises(ValueError):
        ExperimentPlan(rho=0.0)
    with pytest.raises(ValueError):
        ExperimentPlan(eval_steps=(0,))


def mixture_tasks(seed=0):
    return generate_synthetic("quadratic-mixture", dict(num_nodes=5, dim=5), seed)


def test_zero_rounds_evaluates_initial_model():
    tasks = mixture_tasks()
    plan = ExperimentPlan(rounds=0, alpha=0.01, rho=8.5)
    art = run_experiment(plan, tasks[:4], tasks[4:])
    assert art.trace == [] and np.array_equal(art.theta, np.zeros(5))
    m = dg.adaptation_metrics(np.zeros(5), tasks[4], AdaptationConfig(0.01))
    assert art.adaptation[0].post_loss == m.post_loss


def test_quadratic_plan_reaches_fosp():
    tasks = mixture_tasks(1)
    plan = ExperimentPlan(rounds=500, alpha=0.01, lam=0.1, rho=8.5, weights="uniform")
    art = run_experiment(plan, tasks[:4], tasks[4:], record=False)
    nodes, platform = art.result.nodes, art.result.platform
    assert dg.fosp_gap(art.theta, nodes, platform, 0.01) <= 1e-6


def test_mlp_init_is_gaussian_and_seeded():
    data = blobs(800, classes=4)
    src, _ = partition(data, PartitionSpec(5, size_low=20, size_high=20))
    loss = MLPLoss(4, (5,), 4)
    n1, p1 = build_run(ExperimentPlan(seed=3), src, loss)
    n2, p2 = build_run(ExperimentPlan(seed=3), src, loss)
    assert np.array_equal(p1.theta, p2.theta) and np.std(p1.theta) > 0.05
    _, p3 = build_run(ExperimentPlan(), src, SoftmaxLoss(4, 4))
    assert not p3.theta.any()


def test_forgetting_plan_prior_accuracy():
    data = blobs(2000, classes=10, d=10, sep=0.7)
    loss = SoftmaxLoss(10, 10)
    old = np.flatnonzero(data.labels < 5)
    prior_data = data.subset(old)
    theta_p = np.zeros(loss.dim)
    while np.linalg.norm(loss.gradient(theta_p, prior_data)) > 0.1:
        theta_p -= loss.gradient(theta_p, prior_data)
    src, tgt = partition(data.subset(np.flatnonzero(data.labels >= 5)), PartitionSpec(20))
    accs = {}
    for lam in (0.0, 0.5):
        plan = ExperimentPlan(rounds=100, alpha=2.0, rho=0.1, lam=lam, prior=theta_p, init="prior")
        art = run_experiment(plan, src, tgt, loss, prior_task=(loss, prior_data), record=False)
        accs[lam] = art.forgetting[2]
    assert accs[0.5] > accs[0.0]


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    nodes, plat = quadratic_mixture(seed=2)
    res = run_admm_fedmeta(nodes, plat, 0.01, 7, record=False)
    path = tmp_path / "c.fmadmm"
    save_checkpoint(path, res.platform, res.nodes)
    ck = load_checkpoint(path)
    assert ck.round == 7 and ck.dim == 5 and ck.kind == "squared-euclidean" and ck.lam == 0.1
    assert ck.theta.tobytes() == res.theta.tobytes()
    assert ck.prior.tobytes() == plat.reg.prior.tobytes()
    for rec, nd in zip(ck.nodes, res.nodes):
        assert (rec.id, rec.rho, rec.w) == (nd.id, nd.rho, nd.w)
        assert rec.theta_i.tobytes() == nd.theta_i.tobytes() and rec.y_i.tobytes() == nd.y_i.tobytes()
    assert path.read_bytes().startswith(MAGIC)


def test_checkpoint_diagonal_kind(tmp_path):
    from fedmeta_admm.regularizer import BregmanRegularizer, MirrorMap
    nodes, plat = quadratic_mixture()
    reg = BregmanRegularizer(plat.reg.prior, 0.7, MirrorMap("diagonal-quadratic", np.arange(1.0, 6.0)))
    save_checkpoint(tmp_path / "d", dataclasses.replace(plat, reg=reg), nodes)
    back = load_checkpoint(tmp_path / "d").regularizer()
    assert back.h.kind == "diagonal-quadratic" and np.array_equal(back.h.weights, np.arange(1.0, 6.0))


def test_resume_matches_uninterrupted(tmp_path):
    full = run_admm_fedmeta(*quadratic_mixture(seed=3), 0.01, 12)
    part = run_admm_fedmeta(*quadratic_mixture(seed=3), 0.01, 11)
    save_checkpoint(tmp_path / "c", part.platform, part.nodes)
    fresh_nodes, _ = quadratic_mixture(seed=3)
    nodes, plat = load_checkpoint(tmp_path / "c").restore(fresh_nodes)
    rest = run_admm_fedmeta(nodes, plat, 0.01, 1)
    assert rest.theta.tobytes() == full.theta.tobytes()
    strip = lambda r: dataclasses.replace(r, wallclock=0.0)
    assert [strip(r) for r in part.trace + rest.trace] == [strip(r) for r in full.trace]


def test_checkpoint_errors(tmp_path):
    nodes, plat = quadratic_mixture()
    path = tmp_path / "c"
    save_checkpoint(path, plat, nodes)
    blob = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"FMADMM2" + blob[7:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "bad")
    for cut in (3, 20, len(blob) - 1):
        (tmp_path / "short").write_bytes(blob[:cut])
        with pytest.raises((CheckpointTruncatedError, CheckpointVersionError)):
            load_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(blob + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long")
    other, _ = quadratic_mixture(dim=3)
    with pytest.raises(CheckpointError):
        load_checkpoint(path).restore(other)
    with pytest.raises(CheckpointError):
        load_checkpoint(path).restore(nodes[:2])
