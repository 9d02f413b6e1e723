"""Acquisition functions: classical closed forms, transfer variants, and
the neural scoring head.

All scores follow the maximization convention.  The closed-form AFs are
pure functions of (posterior mean, posterior std, incumbent); the transfer
AF additionally carries frozen source models and a running per-source
ceiling that only moves when the target evaluates a new point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from sklearn.mixture import GaussianMixture

from .gp import GpPosterior, loo_stats
from .nets import Mlp

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def expected_improvement(mu, sigma, incumbent: float) -> np.ndarray:
    """EI(x) = (mu - y+) Phi(z) + sigma phi(z); the sigma=0 limit is max(mu - y+, 0)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    out = np.maximum(mu - incumbent, 0.0)
    pos = sigma > 0
    if np.any(pos):
        z = (mu[pos] - incumbent) / sigma[pos]
        out[pos] = (mu[pos] - incumbent) * ndtr(z) + sigma[pos] * np.exp(-0.5 * z * z) / _SQRT_2PI
    return out


def probability_of_improvement(mu, sigma, incumbent: float) -> np.ndarray:
    """PI(x) = Phi((mu - y+) / sigma); the sigma=0 limit is the 0/1 indicator."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    out = (mu > incumbent).astype(np.float64)
    pos = sigma > 0
    if np.any(pos):
        out[pos] = ndtr((mu[pos] - incumbent) / sigma[pos])
    return out


def upper_confidence_bound(mu, sigma, beta: float = 2.0) -> np.ndarray:
    return np.asarray(mu, dtype=np.float64) + beta * np.asarray(sigma, dtype=np.float64)


def linear_schedule(t: int, big_t: int) -> float:
    """1 at the first step, 0 at the last, linear in between."""
    if big_t <= 1:
        return 0.0
    return (big_t - t) / (big_t - 1.0)


# ---------------------------------------------------------------------------
# neural acquisition


def af_feature_rows(mu, sigma, pts, t: int, big_t: int, include_x: bool) -> np.ndarray:
    """Per-candidate feature rows [mu, sigma, x_1..x_D, t, T].

    Dropping the x block makes the same network applicable across input
    dimensions; the row width is then 4 instead of 4 + D.
    """
    mu = np.asarray(mu, dtype=np.float64)
    n = mu.shape[0]
    cols = [mu, np.asarray(sigma, dtype=np.float64)]
    if include_x:
        cols.append(np.asarray(pts, dtype=np.float64))
    cols.append(np.full(n, float(t)))
    cols.append(np.full(n, float(big_t)))
    return np.column_stack(cols)


def neural_af_value(net: Mlp, features: np.ndarray) -> np.ndarray:
    """Scalar score per feature row (a single forward pass)."""
    out, _ = net.forward(features)
    return out[:, 0]


# ---------------------------------------------------------------------------
# transfer acquisition


def discordant_pair_fraction(pred: np.ndarray, actual: np.ndarray) -> float:
    """Fraction of strictly ordered pairs the predictions rank backwards."""
    n = len(actual)
    disc = valid = 0
    for i in range(n):
        for j in range(i + 1, n):
            dy = actual[i] - actual[j]
            if dy == 0:
                continue
            valid += 1
            if (pred[i] - pred[j]) * dy < 0:
                disc += 1
    return disc / valid if valid else 0.0


@dataclass
class TafSourceModel:
    """Frozen source-task GP plus its running improvement ceiling."""

    posterior: GpPosterior
    y_max: float = -np.inf

    def reset(self) -> None:
        # floor the ceiling at the source's own predicted minimum so the
        # very first target step ranks candidates by the source mean
        mean, _ = self.posterior.predict(self.posterior.data.x)
        self.y_max = float(mean.min()) if len(mean) else 0.0


class TransferAcquisition:
    """Weighted mix of target EI and per-source predicted improvements.

    score(x) = (w_tgt EI(x) + sum_j w_j max(mu_j(x) - y_j_max, 0)) / sum w

    ``mode="ranking"`` weights each source by how well its mean ranks the
    target observations (quadratic falloff in the discordant-pair
    fraction, cutoff rho); ``mode="variance"`` weights models by inverse
    mean predictive variance at the observed target inputs.  With fewer
    than two target observations sources get uniform weight 1 and the
    target weight is 1.  With no sources the score reduces to EI exactly.
    """

    def __init__(self, sources: list[TafSourceModel], mode: str = "ranking",
                 rho: float = 0.5):
        if mode not in ("ranking", "variance"):
            raise ValueError(f"unknown transfer weight mode {mode!r}")
        self.sources = sources
        self.mode = mode
        self.rho = rho
        self.begin_episode()

    def begin_episode(self) -> None:
        for src in self.sources:
            src.reset()

    def observe(self, x: np.ndarray) -> None:
        """Advance each source ceiling with its prediction at the new iterate."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        for src in self.sources:
            mean, _ = src.posterior.predict(x)
            src.y_max = max(src.y_max, float(mean[0]))

    def weights(self, target_post: GpPosterior) -> np.ndarray:
        """Source weights followed by the target weight, shape (M + 1,)."""
        m = len(self.sources)
        hist_x, hist_y = target_post.data.x, target_post.data.y
        if target_post.n < 2:
            return np.ones(m + 1)
        if self.mode == "ranking":
            w = np.empty(m + 1)
            for j, src in enumerate(self.sources):
                pred, _ = src.posterior.predict(hist_x)
                d = discordant_pair_fraction(pred, hist_y)
                w[j] = max(0.0, 1.0 - (d / self.rho) ** 2)
            loo_mean, _ = loo_stats(target_post)
            d_tgt = discordant_pair_fraction(loo_mean, hist_y)
            w[m] = max(0.0, 1.0 - (d_tgt / self.rho) ** 2)
            return w
        inv_var = np.empty(m + 1)
        for j, src in enumerate(self.sources):
            _, var = src.posterior.predict(hist_x)
            inv_var[j] = 1.0 / max(float(var.mean()), 1e-12)
        _, loo_var = loo_stats(target_post)
        inv_var[m] = 1.0 / max(float(loo_var.mean()), 1e-12)
        return inv_var / inv_var.sum()

    def score(self, pts: np.ndarray, target_post: GpPosterior,
              incumbent: float) -> np.ndarray:
        pts = np.atleast_2d(pts)
        mu, var = target_post.predict(pts)
        ei = expected_improvement(mu, np.sqrt(var), incumbent)
        if not self.sources:
            return ei
        w = self.weights(target_post)
        acc = w[-1] * ei
        for j, src in enumerate(self.sources):
            if w[j] == 0.0:
                continue
            mean, _ = src.posterior.predict(pts)
            acc += w[j] * np.maximum(mean - src.y_max, 0.0)
        total = w.sum()
        return acc / total if total > 0 else np.zeros(len(pts))


# ---------------------------------------------------------------------------
# density-guided and pool-based baselines


class GmmUcb:
    """Mixture-density prior over good designs blended with UCB.

    score(x) = w * norm(density(x)) + (1 - w) * norm(ucb(x)), both terms
    min-max normalized over the candidate batch (a recorded deviation from
    pointwise purity); a degenerate range normalizes to zero.  ``weight``
    is either a constant or "linear" for a 1 -> 0 schedule over the
    episode.
    """

    def __init__(self, best_designs: np.ndarray, n_components: int,
                 weight: float | str, beta: float = 2.0, seed: int = 0):
        best_designs = np.atleast_2d(best_designs)
        n_components = min(n_components, len(best_designs))
        self.gmm = GaussianMixture(
            n_components=n_components, covariance_type="diag",
            n_init=5, reg_covar=1e-6, random_state=seed,
        ).fit(best_designs)
        self.weight = weight
        self.beta = beta

    @staticmethod
    def _normalize(vals: np.ndarray) -> np.ndarray:
        lo, hi = float(vals.min()), float(vals.max())
        if hi - lo <= 0:
            return np.zeros_like(vals)
        return (vals - lo) / (hi - lo)

    def score(self, pts: np.ndarray, target_post: GpPosterior, t: int,
              big_t: int) -> np.ndarray:
        pts = np.atleast_2d(pts)
        w = linear_schedule(t, big_t) if self.weight == "linear" else float(self.weight)
        density = np.exp(self.gmm.score_samples(pts))
        mu, var = target_post.predict(pts)
        ucb = upper_confidence_bound(mu, np.sqrt(var), self.beta)
        return w * self._normalize(density) + (1.0 - w) * self._normalize(ucb)


class EpsGreedyPool:
    """Source best designs drawn uniformly without replacement."""

    def __init__(self, best_designs: np.ndarray):
        self._all = np.atleast_2d(best_designs).copy()
        self.begin_episode()

    def begin_episode(self) -> None:
        self._remaining = list(range(len(self._all)))

    @property
    def exhausted(self) -> bool:
        return not self._remaining

    def pop(self, rng: np.random.Generator) -> np.ndarray:
        if self.exhausted:
            raise IndexError("design pool is exhausted")
        idx = self._remaining.pop(int(rng.integers(len(self._remaining))))
        return self._all[idx].copy()
