import csv
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmeta_admm.cli import commands
from fedmeta_admm.cli.config import ConfigError, RunConfig, format_config, parse_config
from fedmeta_admm.cli.datasets import (IdxCountMismatchError, IdxMagicError, IdxTruncatedError,
                                       class_means_min_distance, generate_synthetic, load_csv,
                                       load_idx)
from fedmeta_admm.cli.main import EXIT_CONFIG, EXIT_DIVERGED, main
from fedmeta_admm.federation import load_checkpoint
from fedmeta_admm.losses import Dataset, SoftmaxLoss, predict_accuracy

REPO = Path(__file__).resolve().parents[1]
QUAD = REPO / "configs" / "quadratic.conf"

# -- IDX -----------------------------------------------------------------------------

IMAGES = bytes([0x00, 0x00, 0x08, 0x03,  0x00, 0x00, 0x00, 0x02,  0x00, 0x00, 0x00, 0x02,
                0x00, 0x00, 0x00, 0x02,
                0, 51, 102, 255,
                1, 2, 3, 4])
LABELS = bytes([0x00, 0x00, 0x08, 0x01,  0x00, 0x00, 0x00, 0x02,  3, 7])


def write(tmp_path, name, blob):
    p = tmp_path / name
    p.write_bytes(blob)
    return p


def test_idx_hand_built_pair(tmp_path):
    d = load_idx(write(tmp_path, "i", IMAGES), write(tmp_path, "l", LABELS))
    expected = np.array([[0, 51, 102, 255], [1, 2, 3, 4]]) / 255.0
    assert np.array_equal(d.features, expected)
    assert list(d.labels) == [3, 7]


def test_idx_wrong_magic(tmp_path):
    with pytest.raises(IdxMagicError):
        load_idx(write(tmp_path, "i", IMAGES), write(tmp_path, "l", b"\x00\x00\x08\x03" + LABELS[4:]))


def test_idx_count_mismatch(tmp_path):
    three = IMAGES[:4] + b"\x00\x00\x00\x03" + IMAGES[8:] + bytes(4)
    with pytest.raises(IdxCountMismatchError):
        load_idx(write(tmp_path, "i", three), write(tmp_path, "l", LABELS))


def test_idx_truncated(tmp_path):
    with pytest.raises(IdxTruncatedError):
        load_idx(write(tmp_path, "i", IMAGES[:-1]), write(tmp_path, "l", LABELS))
    with pytest.raises(IdxTruncatedError):
        load_idx(write(tmp_path, "i", IMAGES), write(tmp_path, "l", LABELS[:6]))


def test_csv_loader(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n0.5,1,0\n2,3.25,1\n", encoding="utf-8")
    d = load_csv(p)
    assert np.array_equal(d.features, [[0.5, 1.0], [2.0, 3.25]]) and list(d.labels) == [0, 1]


# -- synthetic -----------------------------------------------------------------------

def test_mixture_spread_zero_collapses():
    tasks = generate_synthetic("quadratic-mixture", dict(num_nodes=4, dim=3, spread=0.0), 1)
    assert all(np.array_equal(t.loss.center, tasks[0].loss.center) for t in tasks)


def test_synthetic_seeded():
    a = generate_synthetic("gaussian-classes", dict(samples=300), 4)
    b = generate_synthetic("gaussian-classes", dict(samples=300), 4)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    ta = generate_synthetic("cubic-mixture", dict(num_nodes=3), 2)
    tb = generate_synthetic("cubic-mixture", dict(num_nodes=3), 2)
    assert all(np.array_equal(x.loss.center, y.loss.center) for x, y in zip(ta, tb))
    with pytest.raises(ValueError):
        generate_synthetic("quadratic-mixture", dict(spread=-1.0), 0)
    with pytest.raises(ValueError):
        generate_synthetic("spiral", {}, 0)


def test_well_separated_classes_are_learnable():
    params = dict(num_classes=5, features=10, samples=1000, class_sep=3.0, noise=1.0)
    assert class_means_min_distance(params, 0) >= 6.0
    d = generate_synthetic("gaussian-classes", params, 0)
    loss = SoftmaxLoss(10, 5)
    theta = np.zeros(loss.dim)
    for _ in range(300):
        theta -= 1.0 * loss.gradient(theta, d)
    assert predict_accuracy(loss, theta, d) >= 0.99


# -- config --------------------------------------------------------------------------

def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown key 'rhoo'"):
        parse_config("rhoo = 1\n")
    with pytest.raises(ConfigError):
        parse_config("lam = 1\n")  # the file key is 'lambda'
    with pytest.raises(ConfigError):
        parse_config("rho = 1\nrho = 2\n")
    with pytest.raises(ConfigError):
        parse_config("rounds = many\n")
    with pytest.raises(ConfigError):
        parse_config("just text\n")


def test_comments_defaults_and_overrides():
    cfg = parse_config("# header\nrounds = 7  # trailing\n\nlambda = 0.5\n", overrides=["rounds=9"])
    assert cfg.rounds == 9 and cfg.lam == 0.5 and cfg.alpha == RunConfig().alpha


def test_default_echo_round_trips():
    cfg = RunConfig()
    assert parse_config(format_config(cfg)) == cfg


@given(rounds=st.integers(0, 10_000), alpha=st.floats(0, 10, allow_nan=False),
       rho=st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=4),
       steps=st.lists(st.integers(1, 9), min_size=1, max_size=3), timing=st.booleans(),
       eval_alpha=st.none() | st.floats(0, 5), subset=st.lists(st.integers(0, 9), max_size=4),
       lam=st.floats(0, 1e3))
def test_echo_round_trip_property(rounds, alpha, rho, steps, timing, eval_alpha, subset, lam):
    cfg = RunConfig(rounds=rounds, alpha=alpha, rho=tuple(rho), eval_steps=tuple(steps),
                    timing=timing, eval_alpha=eval_alpha, class_subset=tuple(subset), lam=lam)
    assert parse_config(format_config(cfg)) == cfg


def test_invalid_choices():
    with pytest.raises(ConfigError):
        parse_config("algorithm = sgd\n")
    with pytest.raises(ConfigError):
        parse_config("dataset = mnist\n")
    with pytest.raises(ConfigError):
        parse_config("rho = 0\n")


# -- commands ------------------------------------------------------------------------

def run(args, capsys=None):
    code = main([str(a) for a in args])
    return code


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_train_zero_rounds(tmp_path, capsys):
    assert run(["train", QUAD, "--set", f"output_dir={tmp_path}", "--set", "rounds=0"]) == 0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines == [",".join(commands.TRACE_COLUMNS)]
    ck = load_checkpoint(tmp_path / "checkpoint.fmadmm")
    assert ck.round == 0 and not ck.theta.any()
    echoed = capsys.readouterr().out
    assert parse_config(echoed.split("trained")[0]).rounds == 0


def test_reference_config_reaches_fosp(tmp_path):
    assert run(["train", QUAD, "--set", f"output_dir={tmp_path}"]) == 0
    rows = read_csv(tmp_path / "trace.csv")
    assert len(rows) == 500 and float(rows[-1]["fosp_gap"]) <= 1e-6
    assert rows[0]["round"] == "0" and all(r["wallclock_s"] == "0.0" for r in rows)


def test_trace_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["train", QUAD, "--set", f"output_dir={tmp_path / name}", "--set", "rounds=50"]) == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_timing_on_records_wallclock(tmp_path):
    run(["train", QUAD, "--set", f"output_dir={tmp_path}", "--set", "rounds=3", "--set", "timing=on"])
    assert all(float(r["wallclock_s"]) > 0 for r in read_csv(tmp_path / "trace.csv"))


def test_resume_from_periodic_checkpoint(tmp_path):
    base = ["--set", "rounds=40"]
    run(["train", QUAD, "--set", f"output_dir={tmp_path / 'a'}", *base])
    run(["train", QUAD, "--set", f"output_dir={tmp_path / 'b'}", "--set", "checkpoint_every=15", *base])
    b = tmp_path / "b"
    assert (b / "checkpoint_000030.fmadmm").is_file()
    assert run(["train", QUAD, "--set", f"output_dir={b}", *base, "--resume", b / "checkpoint_000015.fmadmm"]) == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()


def test_config_errors_exit_nonzero(tmp_path, capsys):
    assert run(["train", QUAD, "--set", "bogus=1"]) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err
    assert run(["train", tmp_path / "missing.conf"]) == EXIT_CONFIG
    assert not (tmp_path / "trace.csv").exists()


def test_divergence_exits_after_flushing_trace(tmp_path, capsys):
    code = run(["train", QUAD, "--set", f"output_dir={tmp_path}", "--set", "alpha=3.0",
                "--set", "rho=0.001", "--set", "lambda=0", "--set", "rounds=3000"])
    assert code == EXIT_DIVERGED, capsys.readouterr().err
    assert "aborted" in capsys.readouterr().err
    rows = read_csv(tmp_path / "trace.csv")
    assert len(rows) > 0


def test_console_script_exit_code(tmp_path):
    exe = shutil.which("fedmeta-admm")
    cmd = [exe] if exe else [sys.executable, "-m", "fedmeta_admm"]
    proc = subprocess.run(cmd + ["train", str(QUAD), "--set", "nope=1"], capture_output=True, text=True)
    assert proc.returncode != 0 and "unknown key" in proc.stderr


def test_evaluate(tmp_path):
    out = f"output_dir={tmp_path}"
    # tasks share a common centre away from the zero initialization
    shared = ["--set", "center_offset=3.0"]
    run(["train", QUAD, "--set", out, "--set", "rounds=100", *shared])
    assert run(["evaluate", QUAD, "--set", out, "--set", "eval_steps=1,3", *shared]) == 0
    rows = read_csv(tmp_path / "adaptation.csv")
    assert list(rows[0]) == list(commands.ADAPTATION_COLUMNS)
    assert len(rows) == 2  # one target, two step counts
    assert all(float(r["post_loss"]) < float(r["pre_loss"]) for r in rows)
    trained = float(rows[0]["post_loss"])

    run(["evaluate", QUAD, "--set", out, "--set", "eval_alpha=0", *shared])
    rows = read_csv(tmp_path / "adaptation.csv")
    assert all(r["post_loss"] == r["pre_loss"] for r in rows)

    run(["train", QUAD, "--set", f"output_dir={tmp_path / 'init'}", "--set", "rounds=0", *shared])
    run(["evaluate", QUAD, "--set", f"output_dir={tmp_path / 'init'}", *shared])
    assert trained < float(read_csv(tmp_path / "init" / "adaptation.csv")[0]["post_loss"])


def test_evaluate_dimension_mismatch(tmp_path, capsys):
    run(["train", QUAD, "--set", f"output_dir={tmp_path}", "--set", "rounds=0"])
    code = run(["evaluate", QUAD, "--set", f"output_dir={tmp_path}", "--set", "dim=3"])
    assert code != 0 and "dimension" in capsys.readouterr().err


FORGET = REPO / "configs" / "forgetting.conf"


@pytest.fixture(scope="module")
def prior_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("prior")
    assert main(["pretrain", str(FORGET), "--set", f"output_dir={d}"]) == 0
    return d


def test_forgetting_command(prior_dir, tmp_path):
    code = main(["forgetting", str(FORGET), "--set", f"output_dir={tmp_path}",
                 "--set", f"prior={prior_dir / 'prior.fmadmm'}", "--set", "rounds=150"])
    assert code == 0
    rows = read_csv(tmp_path / "forgetting.csv")
    assert list(rows[0]) == list(commands.FORGETTING_COLUMNS)
    assert [(r["phase"], r["task"]) for r in rows] == [
        ("prior_model", "prior"), ("prior_model", "new"), ("lambda=0.0", "prior"),
        ("lambda=0.0", "new"), ("lambda=0.5", "prior"), ("lambda=0.5", "new")]
    acc = {(r["phase"], r["task"]): float(r["accuracy"]) for r in rows}
    assert acc[("lambda=0.5", "prior")] > acc[("lambda=0.0", "prior")]


def test_prior_model_grad_norm_is_epsilon_p(prior_dir, tmp_path, capsys):
    from fedmeta_admm.cli.config import load_config
    cfg = load_config(FORGET, [f"output_dir={tmp_path}", f"prior={prior_dir / 'prior.fmadmm'}"])
    data = commands.load_dataset(cfg)
    loss, pdata = commands.prior_task(cfg, data)
    theta_p = load_checkpoint(prior_dir / "prior.fmadmm").theta
    eps_p = np.linalg.norm(loss.gradient(theta_p, pdata))
    rows = commands.forgetting_protocol(cfg, data, theta_p, lambdas=())
    assert rows[0].phase == "prior_model" and rows[0].grad_norm == eps_p <= cfg.prior_tol


def test_over_regularization_limit(prior_dir, tmp_path):
    from fedmeta_admm.cli.config import load_config, replace
    cfg = load_config(FORGET, [f"output_dir={tmp_path}", f"prior={prior_dir / 'prior.fmadmm'}"])
    data = commands.load_dataset(cfg)
    theta_p = load_checkpoint(prior_dir / "prior.fmadmm").theta
    moderate = commands.forgetting_protocol(cfg, data, theta_p, lambdas=(0.5,))
    # a huge lambda needs a penalty large enough for the explicit regularizer step to stay stable
    strong = commands.forgetting_protocol(replace(cfg, rho=(150.0,)), data, theta_p, lambdas=(1000.0,))
    get = lambda rows, phase, task: next(r for r in rows if r.phase == phase and r.task == task)
    assert get(strong, "lambda=1000.0", "new").loss >= get(moderate, "lambda=0.5", "new").loss
    p0 = get(strong, "prior_model", "prior").loss
    assert abs(get(strong, "lambda=1000.0", "prior").loss - p0) <= 1e-3 * p0


def test_forgetting_requires_prior(tmp_path, capsys):
    code = main(["forgetting", str(FORGET), "--set", f"output_dir={tmp_path}", "--set", "prior=none"])
    assert code != 0 and "prior" in capsys.readouterr().err
    code = main(["forgetting", str(FORGET), "--set", f"output_dir={tmp_path}",
                 "--set", f"prior={tmp_path / 'nope.fmadmm'}"])
    assert code != 0


def test_diagnose_quadratic(tmp_path, capsys):
    assert run(["diagnose", QUAD, "--set", f"output_dir={tmp_path}"]) == 0
    text = capsys.readouterr().out
    assert "analytic" in text and "NOT summable" in text
    rows = read_csv(tmp_path / "diagnose.csv")
    zeta = [r for r in rows if r["quantity"] == "zeta"]
    assert zeta and all(float(r["value"]) == 0.0 and r["source"] == "analytic" for r in zeta)
    # hand evaluation with mu = 1, beta irrelevant (zeta = 0): nu = (1.01)(2)(1) = 2.02
    nus = [float(r["value"]) for r in rows if r["quantity"] == "nu"]
    assert nus == pytest.approx([2.02] * 4)
    rho, w, nu = 8.5, 0.25, 2.02
    hand = (rho / 2 - 4 * w * nu > 0,
            rho / 2 - 2 * w ** 2 * nu ** 2 * (4 * w * nu / rho ** 2 + 1 / rho) - 0.1 * 2 / (2 * 4) > 0,
            rho - 3 * nu > 0)
    got = tuple(bool(float(r["value"])) for r in rows if r["id"] == "0" and "condition" in r["quantity"])
    assert got == hand
    overall = next(r for r in rows if r["quantity"] == "conditions_overall")
    assert overall["value"] == "0.0"  # harmonic delta schedule


def test_diagnose_flags_small_rho(tmp_path):
    run(["diagnose", QUAD, "--set", f"output_dir={tmp_path}", "--set", "rho=6.0"])
    rows = read_csv(tmp_path / "diagnose.csv")
    c3 = [r for r in rows if r["quantity"] == "penalty_condition3"]
    assert c3 and all(r["value"] == "0.0" for r in c3)


def test_diagnose_estimated_family(tmp_path):
    assert run(["diagnose", QUAD, "--set", f"output_dir={tmp_path}", "--set", "dataset=synthetic-cubic",
                "--set", "probes=5"]) == 0
    rows = read_csv(tmp_path / "diagnose.csv")
    assert {r["source"] for r in rows if r["quantity"] == "zeta"} == {"estimated"}
    assert (tmp_path / "diagnose.csv").read_bytes() == (tmp_path / "diagnose.csv").read_bytes()


def test_classification_train_and_evaluate(tmp_path):
    conf = REPO / "configs" / "gaussian-classes.conf"
    out = f"output_dir={tmp_path}"
    assert run(["train", conf, "--set", out, "--set", "rounds=5"]) == 0
    assert run(["evaluate", conf, "--set", out]) == 0
    rows = read_csv(tmp_path / "adaptation.csv")
    assert len(rows) == 2 * 4 and all(0 <= float(r["post_acc"]) <= 1 for r in rows)


def test_csv_dataset_end_to_end(tmp_path):
    d = generate_synthetic("gaussian-classes", dict(num_classes=4, features=3, samples=400), 0)
    path = tmp_path / "data.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "x1", "x2", "y"])
        for x, y in zip(d.features, d.labels):
            w.writerow([*(repr(float(v)) for v in x), int(y)])
    code = run(["train", QUAD, "--set", f"output_dir={tmp_path}", "--set", f"dataset=csv:{path}",
                "--set", "model=logistic", "--set", "class_subset=0,1", "--set", "num_nodes=4",
                "--set", "rounds=3", "--set", "rho=1", "--set", "num_classes=0"])
    assert code == 0
