"""Meta-training loop for the neural acquisition function.

A BO episode is treated as an episodic decision process: the state at
step t is the feature matrix over the candidate set xi_t, the action
picks one candidate to evaluate, and the reward is the negative simple
regret of the history so far.  A clipped-surrogate policy gradient with
generalized advantage estimation trains the policy; a small value
network on (t, T) provides the baseline.  Both networks share a single
adaptive-moment optimizer.

Single-worker runs with a fixed seed are bit-reproducible.  With
``workers > 1`` rollouts move to a process pool with independently
seeded generators: statistically equivalent, not bit-identical.
"""
from __future__ import annotations

import csv
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acquisitions import af_feature_rows
from .afmax import HierarchicalMaximizer
from .gp import Dataset, GpHyperparams, GpPosterior, gp_condition
from .nets import (
    AdamState,
    Mlp,
    adam_step,
    init_policy_net,
    init_value_net,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import FamilySpec, ObjectiveInstance, sample_task

REWARD_MODES = ("neg_regret", "neg_log10_regret")
LOG_REGRET_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# categorical policy head


def _checked_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError(f"logits must be a non-empty vector, got shape {z.shape}")
    bad = np.flatnonzero(~np.isfinite(z))
    if bad.size:
        raise ValueError(f"non-finite logit for candidate {bad[0]}")
    return z


def categorical_probs(logits) -> np.ndarray:
    z = _checked_logits(logits)
    e = np.exp(z - z.max())
    return e / e.sum()


def categorical_sample(logits, rng: np.random.Generator) -> tuple[int, float]:
    """Draw an index from softmax(logits); returns (index, log-probability)."""
    z = _checked_logits(logits)
    z = z - z.max()
    e = np.exp(z)
    total = e.sum()
    idx = int(np.searchsorted(np.cumsum(e), rng.random() * total, side="right"))
    idx = min(idx, z.size - 1)
    return idx, float(z[idx] - np.log(total))


def categorical_entropy(logits) -> float:
    z = _checked_logits(logits)
    z = z - z.max()
    log_total = np.log(np.exp(z).sum())
    p = np.exp(z - log_total)
    return float(log_total - p @ z)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    zm = z - z.max(axis=1, keepdims=True)
    return zm - np.log(np.exp(zm).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# environment


@dataclass
class Transition:
    """One BO step as seen by the learner."""

    features: np.ndarray  # (n_candidates, feature_width) rows over xi_t
    action: int
    logprob: float
    reward: float
    value: float
    terminal: bool


class NeuralAfPolicy:
    """Network plus candidate-set construction.

    The same network both drives the hierarchical maximizer (scoring
    arbitrary points) and produces the logits over the resulting
    candidate set xi_t = global grid + k local maximizers.
    """

    def __init__(self, net: Mlp, dim: int, include_x: bool,
                 n_global: int, n_local: int | None = None, k: int = 5):
        expected = 4 + dim if include_x else 4
        if net.widths[0] != expected:
            raise ValueError(
                f"policy net expects {net.widths[0]} features but the "
                f"configuration implies {expected} (dim={dim}, include_x={include_x})"
            )
        self.net = net
        self.dim = dim
        self.include_x = include_x
        self.maximizer = HierarchicalMaximizer(dim, n_global, n_local, k)

    @property
    def n_candidates(self) -> int:
        return self.maximizer.n_global + self.maximizer.k

    def scores_at(self, pts: np.ndarray, post: GpPosterior, t: int, big_t: int) -> np.ndarray:
        mu, var = post.predict(pts)
        feats = af_feature_rows(mu, np.sqrt(var), pts, t, big_t, self.include_x)
        out, _ = self.net.forward(feats)
        return out[:, 0]

    def af(self, post: GpPosterior, t: int, big_t: int):
        return lambda pts: self.scores_at(pts, post, t, big_t)

    def candidates(self, post: GpPosterior, t: int, big_t: int):
        """(points, features, logits) over xi_t, all aligned row-wise."""
        xi = self.maximizer.xi_set(self.af(post, t, big_t))
        pts = xi.points
        mu, var = post.predict(pts)
        feats = af_feature_rows(mu, np.sqrt(var), pts, t, big_t, self.include_x)
        out, _ = self.net.forward(feats)
        return pts, feats, out[:, 0]

    def argmax_point(self, post: GpPosterior, t: int, big_t: int) -> np.ndarray:
        """Evaluation-mode action: the maximizer's best point, never sampled."""
        x, _ = self.maximizer.maximize(self.af(post, t, big_t))
        return x


def empty_posterior(hyper: GpHyperparams, dim: int) -> GpPosterior:
    return gp_condition(Dataset(np.zeros((0, dim)), np.zeros(0)), hyper)


def step_reward(regret: float, mode: str) -> float:
    if mode == "neg_regret":
        return -max(regret, 0.0)  # grid-approximated optima can go slightly negative
    if mode == "neg_log10_regret":
        return -np.log10(max(regret, LOG_REGRET_FLOOR))
    raise ValueError(f"unknown reward mode {mode!r}; expected one of {REWARD_MODES}")


def rollout_episode(policy: NeuralAfPolicy, value_net: Mlp,
                    instance: ObjectiveInstance, hyper: GpHyperparams,
                    big_t: int, reward_mode: str,
                    rng: np.random.Generator) -> list[Transition]:
    """One training episode; no initial design, actions sampled from the policy.

    Returns an empty list (and warns) if the objective evaluation fails,
    discarding the partial episode.
    """
    if reward_mode not in REWARD_MODES:
        raise ValueError(f"unknown reward mode {reward_mode!r}; expected one of {REWARD_MODES}")
    post = empty_posterior(hyper, instance.dim)
    transitions: list[Transition] = []
    best = -np.inf
    for t in range(1, big_t + 1):
        pts, feats, logits = policy.candidates(post, t, big_t)
        action, logprob = categorical_sample(logits, rng)
        x = pts[action]
        try:
            y = instance.evaluate(x)
        except Exception as exc:  # noqa: BLE001 - abort and report, never crash training
            warnings.warn(
                f"episode on {instance.name} aborted at step {t}: {exc}",
                RuntimeWarning,
            )
            return []
        if instance.noise_std > 0:
            y += instance.noise_std * rng.normal()
        best = max(best, y)
        reward = step_reward(instance.optimum_value - best, reward_mode)
        value = float(value_net.forward([[t, big_t]])[0][0, 0])
        transitions.append(Transition(feats, action, logprob, reward, value, t == big_t))
        post = post.with_observation(x, y)
    return transitions


def eval_episode_regrets(policy: NeuralAfPolicy, instance: ObjectiveInstance,
                         hyper: GpHyperparams, big_t: int,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Deterministic argmax rollout; per-step simple regrets (floored at 0)."""
    post = empty_posterior(hyper, instance.dim)
    best = -np.inf
    regrets = np.empty(big_t)
    for t in range(1, big_t + 1):
        x = policy.argmax_point(post, t, big_t)
        y = instance.evaluate(x)
        if instance.noise_std > 0 and rng is not None:
            y += instance.noise_std * rng.normal()
        best = max(best, y)
        regrets[t - 1] = max(instance.optimum_value - best, 0.0)
        post = post.with_observation(x, y)
    return regrets


# ---------------------------------------------------------------------------
# advantage estimation and the policy update


def compute_gae(rewards, values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """(advantages, returns) for one episode; terminal bootstrap value is 0."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.ndim != 1 or r.shape != v.shape:
        raise ValueError("rewards and values must be equal-length vectors")
    adv = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        v_next = v[t + 1] if t + 1 < r.size else 0.0
        acc = r[t] + gamma * v_next - v[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + v


@dataclass(frozen=True)
class PpoConfig:
    batch_size: int = 1200
    epochs: int = 4
    n_minibatches: int = 20
    clip: float = 0.15
    value_coef: float = 1.0
    entropy_coef: float = 0.01
    gamma: float = 0.98
    lam: float = 0.98
    learning_rate: float = 1e-4

    def __post_init__(self):
        if self.batch_size < 1 or self.n_minibatches < 1 or self.epochs < 1:
            raise ValueError("batch size, epochs and minibatch count must be positive")
        if self.batch_size % self.n_minibatches:
            raise ValueError(
                f"batch size {self.batch_size} is not divisible into "
                f"{self.n_minibatches} minibatches"
            )
        if not 0 < self.clip < 1:
            raise ValueError("clip parameter must be in (0, 1)")


@dataclass
class TransitionBatch:
    """Flattened, GAE-annotated transitions ready for updates."""

    features: np.ndarray  # (B, n_candidates, feature_width)
    actions: np.ndarray  # (B,) int
    logprobs: np.ndarray  # (B,) behaviour log-probabilities
    advantages: np.ndarray  # (B,)
    returns: np.ndarray  # (B,)
    rewards: np.ndarray  # (B,)

    @property
    def value_inputs(self) -> np.ndarray:
        # t and T are the last two feature columns of every candidate row
        return self.features[:, 0, -2:]


def build_batch(episodes: list[list[Transition]], cfg: PpoConfig) -> TransitionBatch:
    """Flatten whole episodes, then trim the tail to exactly the batch size.

    Advantages are computed per episode before trimming, so the dropped
    tail transitions never contaminate the kept ones.
    """
    total = sum(len(ep) for ep in episodes)
    if total < cfg.batch_size:
        raise ValueError(f"need at least {cfg.batch_size} transitions, got {total}")
    feats, actions, logprobs, advs, rets, rewards = [], [], [], [], [], []
    for ep in episodes:
        adv, ret = compute_gae([tr.reward for tr in ep], [tr.value for tr in ep],
                               cfg.gamma, cfg.lam)
        for i, tr in enumerate(ep):
            feats.append(tr.features)
            actions.append(tr.action)
            logprobs.append(tr.logprob)
            advs.append(adv[i])
            rets.append(ret[i])
            rewards.append(tr.reward)
    cut = slice(0, cfg.batch_size)
    return TransitionBatch(
        features=np.stack(feats[cut]),
        actions=np.asarray(actions[cut], dtype=np.int64),
        logprobs=np.asarray(logprobs[cut]),
        advantages=np.asarray(advs[cut]),
        returns=np.asarray(rets[cut]),
        rewards=np.asarray(rewards[cut]),
    )


@dataclass
class PpoStats:
    policy_loss: float
    value_loss: float
    entropy: float
    skipped_minibatches: int


def ppo_update(policy_net: Mlp, value_net: Mlp, batch: TransitionBatch,
               cfg: PpoConfig, adam: AdamState, rng: np.random.Generator) -> PpoStats:
    """Clipped-surrogate update over epochs x minibatches; mutates both nets."""
    b = batch.actions.shape[0]
    if b != cfg.batch_size:
        raise ValueError(f"batch has {b} transitions, config says {cfg.batch_size}")
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n_cand, width = batch.features.shape[1:]
    mb = b // cfg.n_minibatches
    val_in = batch.value_inputs
    n_policy = 2 * policy_net.n_layers
    pol_losses, val_losses, entropies = [], [], []
    skipped = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(b)
        for j in range(cfg.n_minibatches):
            idx = order[j * mb:(j + 1) * mb]
            acts = batch.actions[idx]
            rows = np.arange(mb)

            out, cache = policy_net.forward(batch.features[idx].reshape(mb * n_cand, width))
            logits = out[:, 0].reshape(mb, n_cand)
            logp_all = _log_softmax_rows(logits)
            p = np.exp(logp_all)
            ratio = np.exp(logp_all[rows, acts] - batch.logprobs[idx])
            a = adv[idx]
            unclipped = ratio * a
            clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * a
            policy_loss = -np.minimum(unclipped, clipped).mean()
            ent = -(p * logp_all).sum(axis=1)

            v_out, v_cache = value_net.forward(val_in[idx])
            v_err = v_out[:, 0] - batch.returns[idx]
            value_loss = float(np.mean(v_err**2))
            loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent.mean()

            # gradient flows through the ratio only where the unclipped
            # branch attains the minimum; elsewhere the clip saturates
            coef = np.where(unclipped <= clipped, -a * ratio / mb, 0.0)
            dlogits = -coef[:, None] * p
            dlogits[rows, acts] += coef
            dlogits += (cfg.entropy_coef / mb) * p * (logp_all + ent[:, None])
            pol_grads = policy_net.backward(cache, dlogits.reshape(mb * n_cand, 1))
            val_grads = value_net.backward(v_cache, (2.0 * cfg.value_coef / mb) * v_err[:, None])

            grads = pol_grads + val_grads
            if not np.isfinite(loss) or any(not np.isfinite(g).all() for g in grads):
                skipped += 1
                warnings.warn("skipping minibatch with non-finite loss or gradient",
                              RuntimeWarning)
                continue
            params = policy_net.params() + value_net.params()
            new = adam_step(params, grads, adam, cfg.learning_rate)
            policy_net.set_params(new[:n_policy])
            value_net.set_params(new[n_policy:])
            pol_losses.append(float(policy_loss))
            val_losses.append(value_loss)
            entropies.append(float(ent.mean()))
    if not pol_losses:
        return PpoStats(np.nan, np.nan, np.nan, skipped)
    return PpoStats(
        float(np.mean(pol_losses)), float(np.mean(val_losses)),
        float(np.mean(entropies)), skipped,
    )


# ---------------------------------------------------------------------------
# outer training loop


@dataclass(frozen=True)
class TrainConfig:
    family: FamilySpec
    hyper: GpHyperparams
    big_t: int
    n_iterations: int
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward_mode: str = "neg_regret"
    include_x: bool = True
    n_global: int = 1000
    n_local: int | None = None
    k: int = 5
    source_pool: int | None = None  # fixed pool of M tasks instead of fresh draws
    t_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.big_t < 1 or self.n_iterations < 1:
            raise ValueError("episode budget and iteration count must be positive")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if self.source_pool is not None and self.source_pool < 1:
            raise ValueError("source pool size must be positive")
        if self.t_range is not None:
            lo, hi = self.t_range
            if not 1 <= lo <= hi:
                raise ValueError("episode budget range must satisfy 1 <= lo <= hi")


@dataclass
class TrainResult:
    policy: NeuralAfPolicy
    value_net: Mlp
    log_rows: list[dict]
    checkpoint_paths: list[Path]


def _draw_big_t(cfg: TrainConfig, rng: np.random.Generator) -> int:
    if cfg.t_range is None:
        return cfg.big_t
    lo, hi = cfg.t_range
    return int(rng.integers(lo, hi + 1))


def _sample_pool(cfg: TrainConfig, seed: int) -> list[ObjectiveInstance]:
    rng = np.random.default_rng(seed)
    return [sample_task(cfg.family, rng) for _ in range(cfg.source_pool)]


def _collect_episodes(policy: NeuralAfPolicy, value_net: Mlp, cfg: TrainConfig,
                      pool: list[ObjectiveInstance] | None,
                      quota: int, rng: np.random.Generator) -> list[list[Transition]]:
    episodes: list[list[Transition]] = []
    collected = 0
    attempts = 0
    max_attempts = 20 + 10 * (quota // max(cfg.big_t, 1) + 1)
    while collected < quota:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(
                f"could not collect {quota} transitions in {max_attempts} episodes"
            )
        if pool is not None:
            instance = pool[int(rng.integers(len(pool)))]
        else:
            instance = sample_task(cfg.family, rng)
        ep = rollout_episode(policy, value_net, instance, cfg.hyper,
                             _draw_big_t(cfg, rng), cfg.reward_mode, rng)
        if ep:
            episodes.append(ep)
            collected += len(ep)
    return episodes


def _worker_collect(payload: dict) -> list[list[Transition]]:
    """Process-pool entry: rebuild nets from arrays, then roll episodes."""
    cfg: TrainConfig = payload["cfg"]
    rng = np.random.default_rng(payload["seed"])
    policy_net = Mlp(payload["policy_widths"], rng, final_scale=0.01)
    policy_net.set_params(payload["policy_params"])
    value_net = Mlp(payload["value_widths"], rng)
    value_net.set_params(payload["value_params"])
    policy = NeuralAfPolicy(policy_net, cfg.family.dim, cfg.include_x,
                            cfg.n_global, cfg.n_local, cfg.k)
    pool = None
    if cfg.source_pool is not None:
        pool = _sample_pool(cfg, payload["pool_seed"])
    return _collect_episodes(policy, value_net, cfg, pool, payload["quota"], rng)


def checkpoint_meta(cfg: TrainConfig, iteration: int, mean_reward: float) -> dict:
    return {
        "iteration": iteration,
        "mean_reward": mean_reward,
        "dim": cfg.family.dim,
        "include_x": cfg.include_x,
        "n_global": cfg.n_global,
        "n_local": cfg.n_local,
        "k": cfg.k,
        "big_t": cfg.big_t,
        "reward_mode": cfg.reward_mode,
        "family_base": cfg.family.base,
    }


def policy_from_checkpoint(path: str | Path, dim: int | None = None,
                           n_global: int | None = None,
                           n_local: int | None = None,
                           k: int | None = None) -> tuple[NeuralAfPolicy, Mlp, dict]:
    """Rebuild a policy (and value net) from disk.

    Any of dim / n_global / n_local / k may be overridden; a net trained
    without the x-feature is dimension-agnostic, so a different
    evaluation dimension is legitimate there.
    """
    policy_net, value_net, meta = load_checkpoint(path)
    use_dim = meta["dim"] if dim is None else dim
    if dim is not None and dim != meta["dim"] and meta["include_x"]:
        raise ValueError(
            f"checkpoint was trained with the x-feature at dim {meta['dim']}; "
            f"cannot evaluate at dim {dim}"
        )
    policy = NeuralAfPolicy(
        policy_net, use_dim, meta["include_x"],
        meta["n_global"] if n_global is None else n_global,
        meta["n_local"] if n_local is None else n_local,
        meta["k"] if k is None else k,
    )
    return policy, value_net, meta


def train(cfg: TrainConfig, seed: int, out_dir: str | Path | None = None,
          workers: int = 1, max_wall_s: float | None = None) -> TrainResult:
    """Run the outer loop; one checkpoint and one log row per iteration.

    ``max_wall_s`` caps the wall-clock budget: the loop stops after the
    first iteration that exceeds it (results stay seed-reproducible on a
    given machine only up to the iteration count actually reached).
    """
    rng = np.random.default_rng(seed)
    deadline = None if max_wall_s is None else time.perf_counter() + max_wall_s
    dim = cfg.family.dim
    in_width = 4 + dim if cfg.include_x else 4
    policy_net = init_policy_net(in_width, rng)
    value_net = init_value_net(rng)
    policy = NeuralAfPolicy(policy_net, dim, cfg.include_x,
                            cfg.n_global, cfg.n_local, cfg.k)
    pool_seed = int(rng.integers(2**31)) if cfg.source_pool is not None else None
    pool = _sample_pool(cfg, pool_seed) if cfg.source_pool is not None else None
    adam = AdamState()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log_rows: list[dict] = []
    checkpoints: list[Path] = []
    for it in range(1, cfg.n_iterations + 1):
        started = time.perf_counter()
        if workers <= 1:
            episodes = _collect_episodes(policy, value_net, cfg, pool,
                                         cfg.ppo.batch_size, rng)
        else:
            quota = -(-cfg.ppo.batch_size // workers)
            seeds = np.random.SeedSequence(rng.integers(2**63)).spawn(workers)
            payloads = [{
                "cfg": cfg,
                "seed": s,
                "pool_seed": pool_seed,
                "quota": quota,
                "policy_widths": policy_net.widths,
                "policy_params": policy_net.params(),
                "value_widths": value_net.widths,
                "value_params": value_net.params(),
            } for s in seeds]
            episodes = []
            with ProcessPoolExecutor(max_workers=workers) as pool_exec:
                for chunk in pool_exec.map(_worker_collect, payloads):
                    episodes.extend(chunk)
        batch = build_batch(episodes, cfg.ppo)
        stats = ppo_update(policy_net, value_net, batch, cfg.ppo, adam, rng)
        wall = time.perf_counter() - started
        mean_reward = float(batch.rewards.mean())
        log_rows.append({
            "iteration": it,
            "mean_reward": mean_reward,
            "entropy": stats.entropy,
            "value_loss": stats.value_loss,
            "wall_s": wall,
        })
        if out_path is not None:
            ckpt = out_path / f"checkpoint_{it:04d}.ckpt"
            save_checkpoint(ckpt, policy_net, value_net,
                            checkpoint_meta(cfg, it, mean_reward))
            checkpoints.append(ckpt)
        if deadline is not None and time.perf_counter() > deadline:
            break
    if out_path is not None:
        write_training_log(out_path / "training_log.csv", log_rows)
    return TrainResult(policy, value_net, log_rows, checkpoints)


def write_training_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["iteration", "mean_reward", "entropy", "value_loss", "wall_s"]
        )
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# checkpoint selection


def crossval_stop_select(checkpoint_paths: list[str | Path],
                         train_tasks: list[ObjectiveInstance],
                         hyper: GpHyperparams, big_t: int,
                         folds: int = 7, seed: int = 0) -> Path:
    """Pick the checkpoint with the best mean cross-fold regret-curve area.

    Each fold holds out a task subset; a checkpoint's fold score is the
    area under the median regret curve on the held-out tasks.
    """
    if not checkpoint_paths:
        raise ValueError("no checkpoints to select from")
    if len(train_tasks) < folds:
        warnings.warn(
            f"only {len(train_tasks)} tasks for {folds} folds; "
            f"reducing to {len(train_tasks)} folds",
            RuntimeWarning,
        )
        folds = len(train_tasks)
    rng = np.random.default_rng(seed)
    fold_idx = np.array_split(rng.permutation(len(train_tasks)), folds)
    best_path, best_score = None, np.inf
    for path in checkpoint_paths:
        policy, _, _ = policy_from_checkpoint(path)
        curves = np.stack([
            eval_episode_regrets(policy, task, hyper, big_t) for task in train_tasks
        ])
        areas = [float(np.median(curves[idx], axis=0).sum()) for idx in fold_idx]
        score = float(np.mean(areas))
        if score < best_score:
            best_path, best_score = Path(path), score
    return best_path
