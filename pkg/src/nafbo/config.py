"""Schema-checked YAML experiment configuration.

A config file fully specifies an experiment: the task family, the frozen
GP hyperparameters for the surrogate, an acquisition section, the episode
budget and candidate-grid sizes, and per-command sections (``ppo``/
``train`` for meta-training, ``eval`` for suites, ``study`` for the
protocol studies).  Unknown keys are rejected by name rather than
silently ignored: a typo in a hyperparameter must fail loudly, not run a
different experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .gp import GpHyperparams, KernelSpec
from .objectives import FamilySpec
from .rl import REWARD_MODES, PpoConfig


class ConfigError(ValueError):
    """Invalid or unparseable experiment configuration."""


AF_PARAM_KEYS = {"kind", "beta", "epsilon", "weight", "n_components", "rho",
                 "m", "n_taf", "checkpoint", "sample"}

_SCHEMA = {
    "family": {"base", "translation_range", "scaling_range", "kernel",
               "lengthscale_range", "dimension", "path", "noise_std",
               "probe_points", "mirror_translation"},
    "gp": {"kernel", "lengthscales", "signal_variance", "noise_variance"},
    "af": AF_PARAM_KEYS,
    "ppo": {"batch_size", "epochs", "n_minibatches", "clip", "value_coef",
            "entropy_coef", "gamma", "lam", "learning_rate"},
    "train": {"n_iterations", "source_pool", "t_range"},
    "eval": {"n_runs"},
    "study": {
        "source_count": {"m_values", "checkpoints", "threshold",
                         "threshold_grid", "n_runs"},
        "generalization": {"t_lows", "s_lows", "t_width", "s_width",
                           "threshold", "threshold_grid", "n_runs"},
        "timing": {"afs", "n_episodes"},
    },
}
_TOP_SCALARS = {"budget", "n_global", "n_local", "k", "include_x",
                "reward_mode", "seed", "out"}


@dataclass
class ExperimentConfig:
    family: FamilySpec
    gp: GpHyperparams
    budget: int
    af: dict | None = None
    n_global: int = 1000
    n_local: int | None = None  # defaults to n_global downstream
    k: int = 5
    include_x: bool = True
    reward_mode: str = "neg_regret"
    ppo: PpoConfig = field(default_factory=PpoConfig)
    n_iterations: int | None = None
    source_pool: int | None = None
    t_range: tuple[int, int] | None = None
    n_runs: int = 100
    seed: int = 0
    out: str | None = None
    study: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)


def _collect_unknown(section, allowed, prefix, problems):
    if not isinstance(section, dict):
        problems.append(f"{prefix or 'config'} must be a mapping")
        return
    for key, value in section.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(allowed, dict):
            if key not in allowed:
                problems.append(path)
            elif isinstance(allowed[key], (dict, set)):
                _collect_unknown(value, allowed[key], path, problems)
        elif key not in allowed:
            problems.append(path)


def _pair(value, name) -> tuple:
    try:
        lo, hi = value
        return (float(lo), float(hi))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a [low, high] pair: {exc}") from None


def _build_family(section: dict) -> FamilySpec:
    if "base" not in section:
        raise ConfigError("missing required key family.base")
    kwargs = dict(section)
    for key in ("translation_range", "scaling_range", "lengthscale_range"):
        if key in kwargs:
            kwargs[key] = _pair(kwargs[key], f"family.{key}")
    try:
        return FamilySpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"family: {exc}") from None


def _build_gp(section: dict) -> GpHyperparams:
    for key in ("kernel", "lengthscales"):
        if key not in section:
            raise ConfigError(f"missing required key gp.{key}")
    try:
        kernel = KernelSpec(
            section["kernel"],
            np.atleast_1d(np.asarray(section["lengthscales"], dtype=np.float64)),
            float(section.get("signal_variance", 1.0)),
        )
        return GpHyperparams(kernel, float(section.get("noise_variance", 1e-6)))
    except ValueError as exc:
        raise ConfigError(f"gp: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")

    problems: list[str] = []
    schema = dict(_SCHEMA)
    for key, value in raw.items():
        if key in schema:
            _collect_unknown(value, schema[key], key, problems)
        elif key not in _TOP_SCALARS:
            problems.append(str(key))
    if problems:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(problems)))

    for required in ("family", "gp", "budget"):
        if required not in raw:
            raise ConfigError(f"missing required key {required}")

    af = raw.get("af")
    if af is not None:
        if "kind" not in af:
            raise ConfigError("missing required key af.kind")
        from .harness import AF_KINDS  # deferred: harness imports are heavy

        if af["kind"] not in AF_KINDS:
            raise ConfigError(
                f"unknown acquisition {af['kind']!r}; available: {', '.join(AF_KINDS)}")

    reward_mode = raw.get("reward_mode", "neg_regret")
    if reward_mode not in REWARD_MODES:
        raise ConfigError(
            f"unknown reward_mode {reward_mode!r}; available: {', '.join(REWARD_MODES)}")

    try:
        ppo = PpoConfig(**raw.get("ppo", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ppo: {exc}") from None

    train = raw.get("train", {})
    t_range = train.get("t_range")
    if t_range is not None:
        t_range = (int(t_range[0]), int(t_range[1]))

    return ExperimentConfig(
        family=_build_family(raw["family"]),
        gp=_build_gp(raw["gp"]),
        budget=int(raw["budget"]),
        af=dict(af) if af is not None else None,
        n_global=int(raw.get("n_global", 1000)),
        n_local=None if raw.get("n_local") is None else int(raw["n_local"]),
        k=int(raw.get("k", 5)),
        include_x=bool(raw.get("include_x", True)),
        reward_mode=reward_mode,
        ppo=ppo,
        n_iterations=None if train.get("n_iterations") is None else int(train["n_iterations"]),
        source_pool=None if train.get("source_pool") is None else int(train["source_pool"]),
        t_range=t_range,
        n_runs=int(raw.get("eval", {}).get("n_runs", 100)),
        seed=int(raw.get("seed", 0)),
        out=raw.get("out"),
        study=raw.get("study", {}),
        raw=raw,
    )
