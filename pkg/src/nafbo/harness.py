"""Run BO episodes under any acquisition strategy and aggregate regrets.

The loop itself is acquisition-agnostic: a strategy proposes a point (via
the hierarchical Sobol maximizer on continuous domains, exact argmax over
unevaluated rows on tabular ones), the harness evaluates the objective,
updates the target GP, and records simple regret.  On top of single runs
sit the evaluation protocols: median/percentile suites over task
distributions, steps-to-threshold studies over source-task counts,
distribution-shift sweeps, and per-episode AF timing.

Suites are embarrassingly parallel; each run gets its own seed stream
derived from the suite seed, so single-worker results are bit-identical
to multi-worker ones.  Task *lists* hold closure-based evaluators that do
not pickle, so only family-sampled suites fan out to worker processes.
"""

from __future__ import annotations

import csv
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .acquisitions import (
    EpsGreedyPool,
    GmmUcb,
    TafSourceModel,
    TransferAcquisition,
    expected_improvement,
    linear_schedule,
    probability_of_improvement,
    upper_confidence_bound,
)
from .afmax import HierarchicalMaximizer
from .gp import Dataset, GpHyperparams, GpPosterior, gp_condition
from .objectives import FamilySpec, ObjectiveInstance, TabularObjective, sample_task
from .rl import NeuralAfPolicy, categorical_sample, empty_posterior
from .sobol import sobol_points

AF_KINDS = (
    "random", "ei", "pi", "ucb", "gmm-ucb", "eps-greedy",
    "taf-r", "taf-me", "neural",
)


# ---------------------------------------------------------------------------
# acquisition strategies


class BoStrategy:
    """One acquisition policy driving run_bo.

    ``begin`` resets per-episode state, ``scores`` ranks a candidate batch,
    ``propose`` picks the next point (continuous: hierarchical maximizer;
    tabular: argmax over the unevaluated rows passed in ``remaining``),
    and ``notify`` feeds each observation back for strategies that track
    history beyond the target GP.
    """

    kind = "base"
    initial_design = False  # start from the domain midpoint
    maximizer: HierarchicalMaximizer | None = None

    def begin(self, rng: np.random.Generator) -> None:
        pass

    def notify(self, x: np.ndarray, y: float) -> None:
        pass

    def scores(self, pts: np.ndarray, post: GpPosterior, t: int, big_t: int) -> np.ndarray:
        raise NotImplementedError

    def propose(self, post: GpPosterior, t: int, big_t: int,
                rng: np.random.Generator,
                remaining: np.ndarray | None = None) -> np.ndarray:
        if remaining is not None:
            vals = self.scores(remaining, post, t, big_t)
            return remaining[int(np.argmax(vals))]
        x, _ = self.maximizer.maximize(lambda p: self.scores(p, post, t, big_t))
        return x


class RandomSearch(BoStrategy):
    kind = "random"

    def __init__(self, dim: int):
        self.dim = dim

    def propose(self, post, t, big_t, rng, remaining=None):
        if remaining is not None:
            return remaining[int(rng.integers(len(remaining)))]
        return rng.uniform(size=self.dim)


class ClassicalAf(BoStrategy):
    """EI, PI, or UCB on the target GP, started from the midpoint."""

    initial_design = True

    def __init__(self, kind: str, dim: int, n_global: int = 1000,
                 n_local: int | None = None, k: int = 5, beta: float = 2.0):
        if kind not in ("ei", "pi", "ucb"):
            raise ValueError(f"unknown classical acquisition {kind!r}")
        self.kind = kind
        self.beta = beta
        self.maximizer = HierarchicalMaximizer(dim, n_global, n_local, k)

    def scores(self, pts, post, t, big_t):
        mu, var = post.predict(np.atleast_2d(pts))
        sigma = np.sqrt(var)
        if self.kind == "ucb":
            return upper_confidence_bound(mu, sigma, self.beta)
        incumbent = float(post.data.y.max()) if post.n else 0.0
        if self.kind == "ei":
            return expected_improvement(mu, sigma, incumbent)
        return probability_of_improvement(mu, sigma, incumbent)


class GmmUcbAf(BoStrategy):
    """Density of good source designs blended with UCB."""

    kind = "gmm-ucb"
    initial_design = True

    def __init__(self, best_designs: np.ndarray, dim: int, n_components: int = 5,
                 weight: float | str = 1.0, beta: float = 2.0, seed: int = 0,
                 n_global: int = 1000, n_local: int | None = None, k: int = 5):
        self.af = GmmUcb(best_designs, n_components, weight, beta=beta, seed=seed)
        self.maximizer = HierarchicalMaximizer(dim, n_global, n_local, k)

    def scores(self, pts, post, t, big_t):
        return self.af.score(pts, post, t, big_t)


class EpsGreedyEi(BoStrategy):
    """With probability epsilon pop a source best design, else run EI.

    ``epsilon`` is a constant or "linear" for a 1 -> 0 schedule.  An
    exhausted pool (or, on tabular domains, a popped design that was
    already evaluated) falls back to the EI branch.
    """

    kind = "eps-greedy"
    initial_design = True

    def __init__(self, best_designs: np.ndarray, dim: int,
                 epsilon: float | str = 0.3, n_global: int = 1000,
                 n_local: int | None = None, k: int = 5):
        self.pool = EpsGreedyPool(best_designs)
        self.epsilon = epsilon
        self.maximizer = HierarchicalMaximizer(dim, n_global, n_local, k)

    def begin(self, rng):
        self.pool.begin_episode()

    def scores(self, pts, post, t, big_t):
        mu, var = post.predict(np.atleast_2d(pts))
        incumbent = float(post.data.y.max()) if post.n else 0.0
        return expected_improvement(mu, np.sqrt(var), incumbent)

    def propose(self, post, t, big_t, rng, remaining=None):
        eps = linear_schedule(t, big_t) if self.epsilon == "linear" else float(self.epsilon)
        if rng.random() < eps:
            while not self.pool.exhausted:
                x = self.pool.pop(rng)
                if remaining is None or np.any(np.all(remaining == x, axis=1)):
                    return x
        return super().propose(post, t, big_t, rng, remaining)


class TransferEi(BoStrategy):
    """Source-weighted EI; starts with an empty target history."""

    def __init__(self, sources: list[TafSourceModel], mode: str, dim: int,
                 rho: float = 0.5, n_global: int = 1000,
                 n_local: int | None = None, k: int = 5):
        self.kind = "taf-r" if mode == "ranking" else "taf-me"
        self.taf = TransferAcquisition(sources, mode=mode, rho=rho)
        self.maximizer = HierarchicalMaximizer(dim, n_global, n_local, k)

    def begin(self, rng):
        self.taf.begin_episode()

    def notify(self, x, y):
        self.taf.observe(x)

    def scores(self, pts, post, t, big_t):
        incumbent = float(post.data.y.max()) if post.n else 0.0
        return self.taf.score(np.atleast_2d(pts), post, incumbent)


class NeuralAf(BoStrategy):
    """Trained acquisition network, evaluated by argmax.

    ``sample=True`` draws from the policy distribution instead; it exists
    for diagnostics only and is never used by the evaluation protocols.
    """

    kind = "neural"

    def __init__(self, policy: NeuralAfPolicy, sample: bool = False):
        self.policy = policy
        self.sample = sample

    def scores(self, pts, post, t, big_t):
        return self.policy.scores_at(np.atleast_2d(pts), post, t, big_t)

    def propose(self, post, t, big_t, rng, remaining=None):
        if remaining is not None:
            vals = self.scores(remaining, post, t, big_t)
            if self.sample:
                idx, _ = categorical_sample(vals, rng)
            else:
                idx = int(np.argmax(vals))
            return remaining[idx]
        if self.sample:
            pts, _, logits = self.policy.candidates(post, t, big_t)
            idx, _ = categorical_sample(logits, rng)
            return pts[idx]
        return self.policy.argmax_point(post, t, big_t)


def make_strategy(kind: str, dim: int, *, n_global: int = 1000,
                  n_local: int | None = None, k: int = 5, beta: float = 2.0,
                  sources: list[TafSourceModel] | None = None,
                  best_designs: np.ndarray | None = None,
                  n_components: int = 5, gmm_weight: float | str = 1.0,
                  epsilon: float | str = 0.3,
                  policy: NeuralAfPolicy | None = None,
                  sample: bool = False, seed: int = 0) -> BoStrategy:
    if kind not in AF_KINDS:
        raise ValueError(f"unknown acquisition {kind!r}; available: {', '.join(AF_KINDS)}")
    grid_args = dict(n_global=n_global, n_local=n_local, k=k)
    if kind == "random":
        return RandomSearch(dim)
    if kind in ("ei", "pi", "ucb"):
        return ClassicalAf(kind, dim, beta=beta, **grid_args)
    if kind == "gmm-ucb":
        if best_designs is None:
            raise ValueError("gmm-ucb requires best_designs from source tasks")
        return GmmUcbAf(best_designs, dim, n_components, gmm_weight,
                        beta=beta, seed=seed, **grid_args)
    if kind == "eps-greedy":
        if best_designs is None:
            raise ValueError("eps-greedy requires best_designs from source tasks")
        return EpsGreedyEi(best_designs, dim, epsilon, **grid_args)
    if kind in ("taf-r", "taf-me"):
        if sources is None:
            raise ValueError(f"{kind} requires source GP models")
        mode = "ranking" if kind == "taf-r" else "variance"
        return TransferEi(sources, mode, dim, **grid_args)
    if policy is None:
        raise ValueError("neural acquisition requires a trained policy")
    return NeuralAf(policy, sample=sample)


# ---------------------------------------------------------------------------
# single episodes


@dataclass
class BoRunResult:
    """One episode: chosen points, observations, and regret trajectory.

    ``step_seconds`` times acquisition evaluation only (proposal, not the
    objective); ``completed`` is False when a step failed and the arrays
    are truncated at the failure.
    """

    points: np.ndarray
    values: np.ndarray
    incumbents: np.ndarray
    regrets: np.ndarray
    step_seconds: np.ndarray
    completed: bool = True


def _nearest_row(grid: np.ndarray, x: np.ndarray) -> int:
    return int(np.argmin(np.sum((grid - x) ** 2, axis=1)))


def run_bo(strategy: BoStrategy, instance: ObjectiveInstance,
           hyper: GpHyperparams, big_t: int,
           seed: int | np.random.Generator = 0) -> BoRunResult:
    """Run one BO episode of ``big_t`` steps on a single task.

    Tabular domains are optimized without replacement over grid rows, so
    ``big_t`` may not exceed the grid size.  A failing step warns and
    returns the partial trajectory flagged ``completed=False``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    remaining = instance.grid.copy() if instance.grid is not None else None
    if remaining is not None and big_t > len(remaining):
        raise ValueError(f"budget {big_t} exceeds grid size {len(remaining)}")

    post = empty_posterior(hyper, instance.dim)
    points, values, step_seconds = [], [], []
    completed = True
    strategy.begin(rng)
    for t in range(1, big_t + 1):
        try:
            if t == 1 and strategy.initial_design:
                x = np.full(instance.dim, 0.5)
                if remaining is not None:
                    x = remaining[_nearest_row(remaining, x)]
                dt = 0.0
            else:
                t0 = time.perf_counter()
                x = strategy.propose(post, t, big_t, rng, remaining)
                dt = time.perf_counter() - t0
            y = instance.evaluate(x)
            if instance.noise_std > 0:
                y += instance.noise_std * rng.normal()
        except Exception as exc:  # noqa: BLE001 - abort the run, keep the prefix
            warnings.warn(f"BO step {t} failed ({exc!r}); returning partial run",
                          RuntimeWarning, stacklevel=2)
            completed = False
            break
        points.append(np.asarray(x, dtype=np.float64))
        values.append(float(y))
        step_seconds.append(dt)
        post = post.with_observation(x, y)
        strategy.notify(x, y)
        if remaining is not None:
            remaining = remaining[~np.all(remaining == x, axis=1)]

    values_arr = np.array(values)
    incumbents = np.maximum.accumulate(values_arr) if len(values) else values_arr
    regrets = np.maximum(instance.optimum_value - incumbents, 0.0)
    return BoRunResult(
        points=np.array(points).reshape(len(points), instance.dim),
        values=values_arr, incumbents=incumbents, regrets=regrets,
        step_seconds=np.array(step_seconds), completed=completed,
    )


# ---------------------------------------------------------------------------
# suites


@dataclass
class SuiteResult:
    """Per-step regret statistics over independent runs."""

    regrets: np.ndarray  # (n_runs, T)
    median: np.ndarray
    p30: np.ndarray
    p70: np.ndarray
    n_runs: int
    fingerprint: dict = field(default_factory=dict)


def summarize_runs(regrets: np.ndarray, fingerprint: dict | None = None) -> SuiteResult:
    regrets = np.atleast_2d(np.asarray(regrets, dtype=np.float64))
    p30, med, p70 = np.percentile(regrets, [30.0, 50.0, 70.0], axis=0)
    return SuiteResult(regrets=regrets, median=med, p30=p30, p70=p70,
                       n_runs=regrets.shape[0], fingerprint=fingerprint or {})


def _suite_run(payload) -> np.ndarray:
    strategy, family, instance, hyper, big_t, ss = payload
    task_ss, run_ss = ss.spawn(2)
    if instance is None:
        instance = sample_task(family, np.random.default_rng(task_ss))
    result = run_bo(strategy, instance, hyper, big_t, np.random.default_rng(run_ss))
    regrets = result.regrets
    if len(regrets) < big_t:  # aborted run: regret stays where it stopped
        pad = regrets[-1] if len(regrets) else np.inf
        regrets = np.concatenate([regrets, np.full(big_t - len(regrets), pad)])
    return regrets


def evaluate_suite(strategy: BoStrategy,
                   tasks: FamilySpec | Sequence[ObjectiveInstance],
                   hyper: GpHyperparams, n_runs: int, big_t: int,
                   seed: int | np.random.SeedSequence = 0,
                   workers: int = 1) -> SuiteResult:
    """Aggregate ``n_runs`` independent episodes into median/percentile curves.

    ``tasks`` is either a family (a fresh task is sampled per run) or an
    explicit task list cycled over runs.  Run seeds derive from the suite
    seed and the run index, so results do not depend on worker count or
    completion order.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(n_runs)
    family_mode = isinstance(tasks, FamilySpec)
    if not family_mode and workers > 1:
        warnings.warn("task lists hold unpicklable evaluators; running serially",
                      RuntimeWarning, stacklevel=2)
        workers = 1
    payloads = [
        (strategy, tasks if family_mode else None,
         None if family_mode else tasks[i % len(tasks)],
         hyper, big_t, children[i])
        for i in range(n_runs)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_suite_run, payloads))
    else:
        rows = [_suite_run(p) for p in payloads]
    fingerprint = {"n_runs": n_runs, "big_t": big_t,
                   "seed_entropy": list(np.atleast_1d(ss.entropy)),
                   "af": strategy.kind}
    return summarize_runs(np.array(rows), fingerprint)


def write_suite_csv(path: str | Path, suite: SuiteResult) -> None:
    _write_rows(path, ("step", "median", "p30", "p70"), [
        (t + 1, suite.median[t], suite.p30[t], suite.p70[t])
        for t in range(len(suite.median))
    ])


# ---------------------------------------------------------------------------
# evaluation protocols


def steps_to_threshold(regrets: np.ndarray, threshold: float) -> int:
    """1-based first step with regret <= threshold; T+1 if never reached."""
    hit = np.flatnonzero(np.asarray(regrets) <= threshold)
    return int(hit[0]) + 1 if len(hit) else len(regrets) + 1


def median_steps_to_threshold(suite: SuiteResult, threshold: float) -> float:
    steps = [steps_to_threshold(row, threshold) for row in suite.regrets]
    return float(np.median(steps))


def source_count_study(strategies: dict[int, BoStrategy], family: FamilySpec,
                       hyper: GpHyperparams, threshold: float, big_t: int,
                       n_runs: int = 100, seed: int = 0,
                       workers: int = 1) -> list[dict]:
    """Median steps to reach a regret threshold, per source-task count M.

    ``strategies`` maps M to the strategy trained/built with that many
    source tasks.  Every M sees the same test tasks (shared suite seed).
    """
    rows = []
    for m in sorted(strategies):
        suite = evaluate_suite(strategies[m], family, hyper, n_runs, big_t,
                               seed=seed, workers=workers)
        rows.append({"m": m, "median_steps": median_steps_to_threshold(suite, threshold)})
    return rows


def write_source_count_csv(path: str | Path, rows: list[dict]) -> None:
    _write_rows(path, ("m", "median_steps"),
                [(r["m"], r["median_steps"]) for r in rows])


def regret_threshold(base: str, n_grid: int = 100_000, percentile: float = 1.0,
                     seed: int = 0) -> float:
    """Regret value that the best ``percentile``% of a dense Sobol grid beats.

    Computed on the untransformed base function; fixes one comparable
    difficulty level per function for steps-to-threshold studies.
    """
    spec = FamilySpec(base, translation_range=(0.0, 0.0), scaling_range=(1.0, 1.0))
    inst = sample_task(spec, np.random.default_rng(seed))
    grid = sobol_points(inst.dim, n_grid)
    regs = inst.optimum_value - inst.evaluate_batch(grid)
    return float(np.percentile(regs, percentile))


def generalization_sweep(strategy: BoStrategy, base: str,
                         t_lows: Sequence[float], s_lows: Sequence[float],
                         t_width: float, s_width: float,
                         hyper: GpHyperparams, big_t: int,
                         threshold: float, n_runs: int = 100,
                         seed: int = 0, workers: int = 1) -> list[dict]:
    """Median steps-to-threshold over a grid of shifted task distributions.

    Each cell is a fresh family: translation magnitudes per dimension in
    [t_low, t_low + t_width] with independently random signs, scalings in
    [s_low, s_low + s_width].  Cells the strategy never solves within
    ``big_t`` report the sentinel T+1.
    """
    ss = np.random.SeedSequence(seed)
    cells = ss.spawn(len(t_lows) * len(s_lows))
    rows = []
    for i, t_low in enumerate(t_lows):
        for j, s_low in enumerate(s_lows):
            fam = FamilySpec(
                base, translation_range=(float(t_low), float(t_low) + t_width),
                scaling_range=(float(s_low), float(s_low) + s_width),
                mirror_translation=True,
            )
            suite = evaluate_suite(strategy, fam, hyper, n_runs, big_t,
                                   seed=cells[i * len(s_lows) + j], workers=workers)
            rows.append({"t_low": float(t_low), "s_low": float(s_low),
                         "steps": median_steps_to_threshold(suite, threshold)})
    return rows


def write_sweep_csv(path: str | Path, rows: list[dict]) -> None:
    _write_rows(path, ("t_low", "s_low", "steps"),
                [(r["t_low"], r["s_low"], r["steps"]) for r in rows])


def timing_study(entries: Sequence[tuple[str, str, BoStrategy]],
                 family: FamilySpec, hyper: GpHyperparams, big_t: int = 30,
                 n_episodes: int = 10, seed: int = 0) -> list[dict]:
    """Mean/std wall time of acquisition evaluation per episode.

    ``entries`` rows are (af label, parameter label, strategy).  All
    strategies see the same sampled tasks and run seeds, so differences
    are down to the AF alone.  Absolute numbers are machine-dependent;
    only ratios and orderings are meaningful.
    """
    ss = np.random.SeedSequence(seed)
    task_rng = np.random.default_rng(ss.spawn(1)[0])
    tasks = [sample_task(family, task_rng) for _ in range(n_episodes)]
    run_seeds = ss.spawn(n_episodes)
    rows = []
    for label, params, strategy in entries:
        times = [
            run_bo(strategy, tasks[i], hyper, big_t,
                   np.random.default_rng(run_seeds[i])).step_seconds.sum()
            for i in range(n_episodes)
        ]
        rows.append({"af": label, "params": params,
                     "mean_s": float(np.mean(times)), "std_s": float(np.std(times))})
    return rows


def write_timing_csv(path: str | Path, rows: list[dict]) -> None:
    _write_rows(path, ("af", "params", "mean_s", "std_s"),
                [(r["af"], r["params"], r["mean_s"], r["std_s"]) for r in rows])


# ---------------------------------------------------------------------------
# source-task models for the transfer baselines


def build_source_models(family: FamilySpec, m: int, n_points: int,
                        hyper: GpHyperparams,
                        rng: np.random.Generator) -> tuple[list[TafSourceModel], np.ndarray]:
    """Sample ``m`` source tasks and fit one GP each on a shared Sobol design.

    Returns the source models plus the (m, dim) matrix of each task's best
    observed design, the input the density/pool baselines consume.
    """
    pts = sobol_points(family.dim, n_points)
    sources, best = [], np.empty((m, family.dim))
    for j in range(m):
        task = sample_task(family, rng)
        y = task.evaluate_batch(pts)
        if task.noise_std > 0:
            y = y + task.noise_std * rng.normal(size=y.shape)
        sources.append(TafSourceModel(gp_condition(Dataset(pts, y), hyper)))
        best[j] = pts[int(np.argmax(y))]
    return sources, best


def tabular_source_models(tables: Sequence[TabularObjective],
                          hyper: GpHyperparams) -> tuple[list[TafSourceModel], np.ndarray]:
    """Condition one GP per recorded table on its full grid."""
    sources, best = [], []
    for tab in tables:
        sources.append(TafSourceModel(gp_condition(Dataset(tab.grid, tab.values), hyper)))
        best.append(tab.grid[int(np.argmax(tab.values))])
    return sources, np.array(best)


def _write_rows(path: str | Path, header: tuple, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
