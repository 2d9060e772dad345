"""Flat ``key = value`` run configuration.

One pair per line, ``#`` starts a comment, unknown keys are an error. Every
command echoes the resolved configuration, and the echo parses back to an
equal :class:`RunConfig`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple


class ConfigError(ValueError):
    pass


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str = "synthetic-quadratic"
    model: str = "auto"
    hidden: Tuple[int, ...] = (32,)
    num_classes: int = 0
    dim: int = 5
    spread: float = 1.0
    center_offset: float = 0.0
    curvature: Tuple[float, ...] = (1.0,)
    kappa: float = 2.0
    offset_noise: float = 0.0
    features: int = 10
    samples: int = 2000
    class_sep: float = 0.7
    noise: float = 1.0
    class_subset: Tuple[int, ...] = ()
    # partition
    num_nodes: int = 20
    classes_per_node: int = 2
    size_low: int = 20
    size_high: int = 40
    source_fraction: float = 0.8
    split_fraction: float = 0.5
    # experiment plan
    algorithm: str = "admm-fedmeta"
    rounds: int = 100
    alpha: float = 0.01
    lam: float = 0.0
    rho: Tuple[float, ...] = (0.3,)
    delta_scale: float = 10.0
    delta_offset: float = 100.0
    delta_power: float = 1.0
    weights: str = "data-proportional"
    eval_steps: Tuple[int, ...] = (1,)
    eval_alpha: Optional[float] = None
    regularizer: str = "squared-euclidean"
    mirror_weights: Tuple[float, ...] = ()
    prior: str = "none"
    init: str = "auto"
    init_std: float = 0.1
    fedavg_lr: float = 0.01
    local_steps: int = 1
    beta_outer: float = 0.005
    inner_tol: float = 1e-10
    inner_max_iters: int = 10000
    # forgetting protocol
    lambda_sweep: Tuple[float, ...] = (0.0, 0.5)
    prior_classes: Tuple[int, ...] = (0, 1, 2, 3, 4)
    new_classes: Tuple[int, ...] = (5, 6, 7, 8, 9)
    prior_tol: float = 0.1
    prior_lr: float = 1.0
    prior_max_iters: int = 5000
    # diagnostics
    probes: int = 20
    radius: float = 1.0
    # run control
    seed: int = 0
    output_dir: str = "out"
    timing: bool = False
    checkpoint_every: int = 0


# config-file key -> dataclass field, where they differ
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}

_PARSERS = {
    "hidden": _ints, "curvature": _floats, "class_subset": _ints, "rho": _floats,
    "eval_steps": _ints, "eval_alpha": _opt_float, "mirror_weights": _floats,
    "lambda_sweep": _floats, "prior_classes": _ints, "new_classes": _ints, "timing": _bool,
}

_CHOICES = {
    "model": ("auto", "quadratic", "cubic", "logistic", "softmax", "mlp"),
    "algorithm": ("admm-fedmeta", "exact-admm", "fedavg", "per-fedavg"),
    "weights": ("data-proportional", "uniform"),
    "regularizer": ("squared-euclidean", "diagonal-quadratic"),
    "init": ("auto", "zeros", "gaussian", "prior"),
}


def _field_types() -> Dict[str, type]:
    return {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, text: str):
    if name in _PARSERS:
        return _PARSERS[name](text)
    default = getattr(RunConfig(), name)
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def parse_config(text: str, source: str = "<config>", overrides: Sequence[str] = ()) -> RunConfig:
    """Parse config text; ``overrides`` are extra ``key=value`` pairs that win."""
    known = _field_types()
    values = {}
    lines = [(f"{source}:{n}", raw, False) for n, raw in enumerate(text.splitlines(), 1)]
    lines += [(f"--set {raw!r}", raw, True) for raw in overrides]
    for where, raw, is_override in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        name = _ALIASES.get(key, key)
        if name not in known or key in _REVERSE:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if name in values and not is_override:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        try:
            values[name] = _parse_value(name, value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path), overrides)


def validate(cfg: RunConfig) -> None:
    for name, choices in _CHOICES.items():
        if getattr(cfg, name) not in choices:
            raise ConfigError(f"{name} must be one of {choices}, got {getattr(cfg, name)!r}")
    ds = cfg.dataset
    if not (ds in ("synthetic-quadratic", "synthetic-cubic", "gaussian-classes")
            or ds.startswith("idx:") and ds.count(":") == 2 or ds.startswith("csv:")):
        raise ConfigError(f"unsupported dataset {ds!r}")
    if cfg.rounds < 0:
        raise ConfigError("rounds must be non-negative")
    if not cfg.rho or any(r <= 0 for r in cfg.rho):
        raise ConfigError("rho must be positive")
    if cfg.alpha < 0 or cfg.lam < 0:
        raise ConfigError("alpha and lambda must be non-negative")
    if not cfg.eval_steps or any(s < 1 for s in cfg.eval_steps):
        raise ConfigError("eval_steps must be positive integers")
    if cfg.probes < 2:
        raise ConfigError("probes must be at least 2")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    lines = ["# effective configuration (all defaults resolved)"]
    for f in fields(RunConfig):
        key = _REVERSE.get(f.name, f.name)
        lines.append(f"{key} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def replace(cfg: RunConfig, **changes) -> RunConfig:
    out = dataclasses.replace(cfg, **changes)
    validate(out)
    return out
