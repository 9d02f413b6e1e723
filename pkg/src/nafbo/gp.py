"""Gaussian-process regression on the unit cube.

ARD squared-exponential and Matern-5/2 kernels, Cholesky-based exact
conditioning with a jitter ladder, incremental single-point updates, and
offline type-2 maximum-likelihood hyperparameter fitting.  Surrogate
hyperparameters are fit once per function family and then frozen; nothing
here refits during an optimization run.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

KERNEL_KINDS = ("squared-exponential", "matern52")

# Diagonal jitter escalation used when a Cholesky factorization fails.
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

LOG2PI = float(np.log(2.0 * np.pi))


class GpConditioningError(RuntimeError):
    """Raised when conditioning fails even at the top of the jitter ladder."""


def _canonical_kind(kind: str) -> str:
    if kind == "matern-5/2":
        kind = "matern52"
    if kind not in KERNEL_KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KERNEL_KINDS}")
    return kind


@dataclass(frozen=True)
class KernelSpec:
    """Stationary ARD kernel: kind, per-dimension lengthscales, signal variance."""

    kind: str
    lengthscales: np.ndarray
    signal_variance: float

    def __post_init__(self):
        object.__setattr__(self, "kind", _canonical_kind(self.kind))
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")
        if self.signal_variance <= 0:
            raise ValueError("signal variance must be positive")
        object.__setattr__(self, "lengthscales", ls)

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel plus observation-noise variance (sigma_n^2 >= 0)."""

    kernel: KernelSpec
    noise_variance: float

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ValueError("noise variance must be >= 0")


@dataclass(frozen=True)
class Dataset:
    """Observed inputs (n, D) inside the unit cube and targets (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"inputs must be (n, D), got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"targets must be ({x.shape[0]},), got shape {y.shape}")
        if x.size and (x.min() < -1e-9 or x.max() > 1 + 1e-9):
            raise ValueError("inputs must lie in the unit cube")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]


def kernel_eval(spec: KernelSpec, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Cross-covariance matrix k(x1, x2), shape (n1, n2)."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    if x1.shape[1] != spec.dim or x2.shape[1] != spec.dim:
        raise ValueError(
            f"kernel is {spec.dim}-dimensional, inputs are "
            f"{x1.shape[1]} and {x2.shape[1]}"
        )
    a = x1 / spec.lengthscales
    b = x2 / spec.lengthscales
    if spec.kind == "squared-exponential":
        sq = cdist(a, b, "sqeuclidean")
        return spec.signal_variance * np.exp(-0.5 * sq)
    r = cdist(a, b, "euclidean")
    sr = np.sqrt(5.0) * r
    return spec.signal_variance * (1.0 + sr + sr * sr / 3.0) * np.exp(-sr)


@dataclass(frozen=True)
class GpPosterior:
    """Immutable GP conditioned on a dataset.

    Holds the lower Cholesky factor of K + sigma_n^2 I and the solved
    weight vector; prediction and incremental extension never mutate it.
    """

    hyper: GpHyperparams
    data: Dataset
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.data.n

    def predict(self, xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at query points (m, D) -> ((m,), (m,))."""
        xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
        prior_var = self.hyper.kernel.signal_variance
        if self.n == 0:
            m = xq.shape[0]
            return np.zeros(m), np.full(m, prior_var)
        ks = kernel_eval(self.hyper.kernel, xq, self.data.x)
        mean = ks @ self.alpha
        v = solve_triangular(self.chol, ks.T, lower=True)
        var = prior_var - np.einsum("ij,ij->j", v, v)
        return mean, np.maximum(var, 0.0)

    def with_observation(self, x: np.ndarray, y: float) -> "GpPosterior":
        """New posterior with one extra observation, via a bordered Cholesky."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        data = Dataset(
            np.vstack([self.data.x, x]) if self.n else x,
            np.append(self.data.y, y),
        )
        if self.n == 0:
            return gp_condition(data, self.hyper)
        kern = self.hyper.kernel
        b = kernel_eval(kern, self.data.x, x)[:, 0]
        c = kern.signal_variance + self.hyper.noise_variance + self.jitter
        l_row = solve_triangular(self.chol, b, lower=True)
        d_sq = c - l_row @ l_row
        floor = 1e-12 * c
        if d_sq < floor:
            # numerically duplicated input; clamp like a one-rung jitter
            d_sq = floor
        n = self.n
        chol = np.zeros((n + 1, n + 1))
        chol[:n, :n] = self.chol
        chol[n, :n] = l_row
        chol[n, n] = np.sqrt(d_sq)
        alpha = cho_solve((chol, True), data.y)
        return GpPosterior(self.hyper, data, chol, alpha, self.jitter)


def gp_condition(data: Dataset, hyper: GpHyperparams) -> GpPosterior:
    """Condition the GP on a dataset, escalating jitter on Cholesky failure."""
    if hyper.kernel.dim != (data.x.shape[1] if data.n else hyper.kernel.dim):
        raise ValueError("kernel dimension does not match data")
    if data.n == 0:
        return GpPosterior(hyper, data, np.zeros((0, 0)), np.zeros(0))
    k = kernel_eval(hyper.kernel, data.x, data.x)
    scale = max(1.0, float(np.mean(np.diag(k))))
    for jit in JITTER_LADDER:
        try:
            chol = cholesky(
                k + (hyper.noise_variance + jit * scale) * np.eye(data.n),
                lower=True,
            )
        except np.linalg.LinAlgError:
            continue
        alpha = cho_solve((chol, True), data.y)
        return GpPosterior(hyper, data, chol, alpha, jit * scale)
    raise GpConditioningError(
        f"Cholesky failed for n={data.n} even with jitter {JITTER_LADDER[-1]}"
    )


def loo_stats(post: GpPosterior) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out predictive mean and variance at each training input.

    Uses the closed-form identities mu_-i = y_i - alpha_i / [K^-1]_ii and
    var_-i = 1 / [K^-1]_ii, so no refitting is needed.
    """
    if post.n == 0:
        return np.zeros(0), np.zeros(0)
    k_inv_diag = np.diag(cho_solve((post.chol, True), np.eye(post.n)))
    var = 1.0 / k_inv_diag
    mean = post.data.y - post.alpha * var
    return mean, var


def log_marginal_likelihood(data: Dataset, hyper: GpHyperparams) -> float:
    """log p(y | X, hyper) for the exact GP model."""
    if data.n == 0:
        return 0.0
    post = gp_condition(data, hyper)
    return float(
        -0.5 * data.y @ post.alpha
        - np.sum(np.log(np.diag(post.chol)))
        - 0.5 * data.n * LOG2PI
    )


def _lml_and_grad(data: Dataset, kind: str, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """LML and gradient wrt theta = (log ls_1..D, log s^2, log sigma_n^2)."""
    d = data.x.shape[1]
    ls = np.exp(theta[:d])
    sig = np.exp(theta[d])
    noise = np.exp(theta[d + 1])
    kern = KernelSpec(kind, ls, sig)
    scaled = data.x / ls
    diff_sq = (scaled[:, None, :] - scaled[None, :, :]) ** 2  # (n, n, D)
    if kind == "squared-exponential":
        k_sig = sig * np.exp(-0.5 * diff_sq.sum(axis=2))
        dk_dls = k_sig[:, :, None] * diff_sq  # per log-lengthscale
    else:
        r = np.sqrt(diff_sq.sum(axis=2))
        sr = np.sqrt(5.0) * r
        k_sig = sig * (1.0 + sr + sr * sr / 3.0) * np.exp(-sr)
        # dk/dlog ls_d = common * (diff_d/ls_d)^2, smooth at r = 0
        common = sig * (5.0 / 3.0) * (1.0 + sr) * np.exp(-sr)
        dk_dls = common[:, :, None] * diff_sq
    k = k_sig + noise * np.eye(data.n)
    try:
        chol = cholesky(k, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros_like(theta)
    alpha = cho_solve((chol, True), data.y)
    lml = float(
        -0.5 * data.y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * data.n * LOG2PI
    )
    k_inv = cho_solve((chol, True), np.eye(data.n))
    inner = np.outer(alpha, alpha) - k_inv
    grad = np.empty_like(theta)
    for j in range(d):
        grad[j] = 0.5 * np.sum(inner * dk_dls[:, :, j])
    grad[d] = 0.5 * np.sum(inner * k_sig)
    grad[d + 1] = 0.5 * noise * np.trace(inner)
    return lml, grad


@dataclass(frozen=True)
class FitBounds:
    """Box constraints for ML-2 fitting (all on the natural scale)."""

    lengthscale: tuple[float, float] = (1e-2, 1e1)
    signal_variance: tuple[float, float] = (1e-8, 1e8)
    noise_variance: tuple[float, float] = (1e-8, 1e2)


def fit_hyperparams_ml2(
    data: Dataset,
    kind: str = "squared-exponential",
    bounds: FitBounds = FitBounds(),
    n_restarts: int = 10,
    rng: np.random.Generator | None = None,
) -> GpHyperparams:
    """Type-2 ML point estimate by multi-restart local ascent in log space.

    The first restart starts from a data-driven initialisation, the rest
    from log-uniform draws inside the bounds.  Analytic gradients drive
    L-BFGS-B on the negative log marginal likelihood.  If no restart
    improves on the best initialisation a warning is emitted and that
    initialisation is returned.
    """
    if data.n < 2:
        raise ValueError("need at least 2 observations to fit hyperparameters")
    kind = _canonical_kind(kind)
    rng = rng if rng is not None else np.random.default_rng(0)
    d = data.x.shape[1]
    lo = np.log(np.array([bounds.lengthscale[0]] * d
                         + [bounds.signal_variance[0], bounds.noise_variance[0]]))
    hi = np.log(np.array([bounds.lengthscale[1]] * d
                         + [bounds.signal_variance[1], bounds.noise_variance[1]]))
    y_var = max(float(np.var(data.y)), 1e-10)
    first = np.log(np.concatenate([
        np.full(d, 0.3), [y_var, 1e-4 * y_var]
    ]))
    inits = [np.clip(first, lo, hi)]
    inits += [rng.uniform(lo, hi) for _ in range(max(0, n_restarts - 1))]

    def objective(theta):
        lml, grad = _lml_and_grad(data, kind, theta)
        if not np.isfinite(lml):
            return 1e25, np.zeros_like(theta)
        return -lml, -grad

    best_theta = inits[0]
    best_lml = _lml_and_grad(data, kind, best_theta)[0]
    init_lml = best_lml
    improved = False
    for theta0 in inits:
        res = minimize(
            objective, theta0, jac=True, method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
        )
        lml = -res.fun
        if np.isfinite(lml) and lml > best_lml:
            best_theta, best_lml = res.x, lml
            improved = True
    if not improved:
        warnings.warn(
            "ML-2 fit: no restart improved on the initialisation; "
            "returning the initial hyperparameters",
            RuntimeWarning,
        )
    ls = np.exp(best_theta[:d])
    return GpHyperparams(
        KernelSpec(kind, ls, float(np.exp(best_theta[d]))),
        float(np.exp(best_theta[d + 1])),
    )
