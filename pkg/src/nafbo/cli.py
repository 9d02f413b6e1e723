"""Command-line entry point: train, evaluate, and run the studies.

Every command takes a YAML config (see ``config.load_config``) plus a few
overriding flags, writes its artifacts into a fresh output directory, and
drops a ``fingerprint.json`` there with the config hash, effective seeds,
and package version, enough to re-run the exact command later.

Exit codes: 0 success, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .harness import (
    AF_KINDS,
    BoStrategy,
    build_source_models,
    evaluate_suite,
    generalization_sweep,
    make_strategy,
    regret_threshold,
    source_count_study,
    timing_study,
    write_source_count_csv,
    write_suite_csv,
    write_sweep_csv,
    write_timing_csv,
)
from .rl import TrainConfig, policy_from_checkpoint, train

STUDY_KINDS = ("source-count", "generalization", "timing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nafbo",
        description="Meta-learned neural acquisition functions for Bayesian optimization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None, help="override config output directory")
        p.add_argument("--checkpoint", default=None, help="policy checkpoint for neural AF")
        p.add_argument("--dry-run", action="store_true",
                       help="validate the config and exit without running")
        p.add_argument("--overwrite", action="store_true",
                       help="allow writing into a non-empty output directory")

    common(sub.add_parser("train", help="meta-train a neural acquisition function"))
    common(sub.add_parser("evaluate", help="run a regret suite for one acquisition"))
    study = sub.add_parser("study", help="run an evaluation protocol study")
    study.add_argument("kind", choices=STUDY_KINDS)
    common(study)
    return parser


def prepare_out_dir(out: str | None, overwrite: bool) -> Path:
    if out is None:
        raise ConfigError("no output directory: set `out:` in the config or pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    if any(path.iterdir()) and not overwrite:
        raise RuntimeError(f"output directory {path} is not empty (pass --overwrite)")
    return path


def write_fingerprint(out_dir: Path, args: argparse.Namespace, seed: int,
                      extra: dict | None = None) -> None:
    config_text = Path(args.config).read_bytes()
    payload = {
        "command": args.command if args.command != "study" else f"study {args.kind}",
        "config": str(args.config),
        "config_sha256": hashlib.sha256(config_text).hexdigest(),
        "seed": seed,
        "workers": args.workers,
        "version": __version__,
    }
    payload.update(extra or {})
    with open(out_dir / "fingerprint.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_policy(cfg: ExperimentConfig, path: str):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    policy, _, _ = policy_from_checkpoint(
        path, dim=cfg.family.dim, n_global=cfg.n_global, n_local=cfg.n_local, k=cfg.k)
    return policy


def build_strategy(cfg: ExperimentConfig, af: dict, seed: int,
                   checkpoint: str | None = None) -> BoStrategy:
    """Assemble one acquisition strategy from its config section.

    Transfer baselines sample their M source tasks here, seeded separately
    from the evaluation suite so source and test tasks stay disjoint.
    """
    kind = af.get("kind")
    if kind not in AF_KINDS:
        raise ConfigError(f"unknown acquisition {kind!r}; available: {', '.join(AF_KINDS)}")
    kwargs = dict(n_global=cfg.n_global, n_local=cfg.n_local, k=cfg.k)
    if "beta" in af:
        kwargs["beta"] = float(af["beta"])
    if kind == "neural":
        path = checkpoint or af.get("checkpoint")
        if path is None:
            raise ConfigError("neural acquisition requires af.checkpoint or --checkpoint")
        return make_strategy("neural", cfg.family.dim,
                             policy=_load_policy(cfg, path),
                             sample=bool(af.get("sample", False)))
    if kind in ("gmm-ucb", "eps-greedy", "taf-r", "taf-me"):
        if "m" not in af:
            raise ConfigError(f"af.m (number of source tasks) is required for {kind}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x50C]))
        sources, best = build_source_models(
            cfg.family, int(af["m"]), int(af.get("n_taf", 100)), cfg.gp, rng)
        kwargs.update(sources=sources, best_designs=best)
        if kind == "gmm-ucb":
            kwargs["gmm_weight"] = af.get("weight", 1.0)
            kwargs["n_components"] = int(af.get("n_components", 5))
            kwargs["seed"] = seed
        if kind == "eps-greedy":
            kwargs["epsilon"] = af.get("epsilon", 0.3)
        if kind in ("taf-r", "taf-me") and "rho" in af:
            kwargs["rho"] = float(af["rho"])
    return make_strategy(kind, cfg.family.dim, **kwargs)


def _study_threshold(cfg: ExperimentConfig, params: dict) -> float:
    if params.get("threshold") is not None:
        return float(params["threshold"])
    if cfg.family.base in ("tabular", "gp-sample"):
        raise ConfigError(
            f"study threshold must be given explicitly for base {cfg.family.base!r}")
    return regret_threshold(cfg.family.base, n_grid=int(params.get("threshold_grid", 100_000)))


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace, seed: int) -> int:
    if cfg.n_iterations is None:
        raise ConfigError("missing required key train.n_iterations")
    tcfg = TrainConfig(
        family=cfg.family, hyper=cfg.gp, big_t=cfg.budget,
        n_iterations=cfg.n_iterations, ppo=cfg.ppo, reward_mode=cfg.reward_mode,
        include_x=cfg.include_x, n_global=cfg.n_global, n_local=cfg.n_local,
        k=cfg.k, source_pool=cfg.source_pool, t_range=cfg.t_range,
    )
    out_dir = prepare_out_dir(args.out or cfg.out, args.overwrite)
    write_fingerprint(out_dir, args, seed)
    result = train(tcfg, seed=seed, out_dir=out_dir, workers=args.workers)
    final = result.log_rows[-1]["mean_reward"] if result.log_rows else float("nan")
    print(f"trained {cfg.n_iterations} iterations; final mean reward {final:.4f}; "
          f"checkpoints in {out_dir}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args: argparse.Namespace, seed: int) -> int:
    if cfg.af is None:
        raise ConfigError("missing required key af (acquisition to evaluate)")
    strategy = build_strategy(cfg, cfg.af, seed, checkpoint=args.checkpoint)
    out_dir = prepare_out_dir(args.out or cfg.out, args.overwrite)
    suite = evaluate_suite(strategy, cfg.family, cfg.gp, cfg.n_runs, cfg.budget,
                           seed=seed, workers=args.workers)
    write_suite_csv(out_dir / "suite.csv", suite)
    write_fingerprint(out_dir, args, seed, {"af": cfg.af["kind"], "n_runs": cfg.n_runs})
    print(f"{cfg.af['kind']}: {cfg.n_runs} runs, final median regret {suite.median[-1]:.6g}; "
          f"wrote {out_dir / 'suite.csv'}")
    return 0


def _study_source_count(cfg, args, seed, out_dir) -> None:
    params = cfg.study.get("source_count")
    if params is None:
        raise ConfigError("missing required key study.source_count")
    if "m_values" not in params or "checkpoints" not in params:
        raise ConfigError("study.source_count requires m_values and checkpoints")
    m_values = [int(m) for m in params["m_values"]]
    checkpoints = {int(m): str(p) for m, p in params["checkpoints"].items()}
    missing = [m for m in m_values if m not in checkpoints]
    if missing:
        raise ConfigError(
            "study.source_count.checkpoints has no entry for M = "
            + ", ".join(str(m) for m in missing))
    absent = [f"M={m}: {checkpoints[m]}" for m in m_values
              if not Path(checkpoints[m]).exists()]
    if absent:
        raise ConfigError("checkpoint files not found: " + "; ".join(absent))
    strategies = {m: make_strategy("neural", cfg.family.dim,
                                   policy=_load_policy(cfg, checkpoints[m]))
                  for m in m_values}
    rows = source_count_study(
        strategies, cfg.family, cfg.gp, _study_threshold(cfg, params), cfg.budget,
        n_runs=int(params.get("n_runs", cfg.n_runs)), seed=seed, workers=args.workers)
    write_source_count_csv(out_dir / "source_count.csv", rows)


def _study_generalization(cfg, args, seed, out_dir) -> None:
    params = cfg.study.get("generalization")
    if params is None:
        raise ConfigError("missing required key study.generalization")
    for key in ("t_lows", "s_lows", "t_width", "s_width"):
        if key not in params:
            raise ConfigError(f"missing required key study.generalization.{key}")
    if cfg.af is None:
        raise ConfigError("missing required key af (acquisition to sweep)")
    strategy = build_strategy(cfg, cfg.af, seed, checkpoint=args.checkpoint)
    rows = generalization_sweep(
        strategy, cfg.family.base,
        [float(v) for v in params["t_lows"]], [float(v) for v in params["s_lows"]],
        float(params["t_width"]), float(params["s_width"]),
        cfg.gp, cfg.budget, _study_threshold(cfg, params),
        n_runs=int(params.get("n_runs", cfg.n_runs)), seed=seed, workers=args.workers)
    write_sweep_csv(out_dir / "generalization.csv", rows)


def _study_timing(cfg, args, seed, out_dir) -> None:
    params = cfg.study.get("timing")
    if params is None or "afs" not in params:
        raise ConfigError("missing required key study.timing.afs")
    entries = []
    for af in params["afs"]:
        strategy = build_strategy(cfg, af, seed, checkpoint=args.checkpoint)
        label = ",".join(f"{k}={af[k]}" for k in sorted(af) if k not in ("kind", "checkpoint"))
        entries.append((af["kind"], label, strategy))
    rows = timing_study(entries, cfg.family, cfg.gp, big_t=cfg.budget,
                        n_episodes=int(params.get("n_episodes", 10)), seed=seed)
    write_timing_csv(out_dir / "timing.csv", rows)


_STUDIES = {
    "source-count": _study_source_count,
    "generalization": _study_generalization,
    "timing": _study_timing,
}


def cmd_study(cfg: ExperimentConfig, args: argparse.Namespace, seed: int) -> int:
    out_dir = prepare_out_dir(args.out or cfg.out, args.overwrite)
    _STUDIES[args.kind](cfg, args, seed, out_dir)
    write_fingerprint(out_dir, args, seed, {"study": args.kind})
    print(f"study {args.kind} complete; results in {out_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        if args.dry_run:
            print(f"config OK: {args.command} on {cfg.family.base}, "
                  f"T={cfg.budget}, seed={seed}")
            return 0
        if args.command == "train":
            return cmd_train(cfg, args, seed)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args, seed)
        return cmd_study(cfg, args, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
