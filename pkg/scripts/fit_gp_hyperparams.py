#!/usr/bin/env python3
"""Fit the frozen surrogate hyperparameters shipped in configs/.

Protocol, per task family: draw tasks from the training distribution,
evaluate each on a shared Sobol design (64 points per input dimension),
then fit one shared set of ARD hyperparameters to all tasks jointly by
maximizing the sum of the per-task log marginal likelihoods.  The
squared-exponential kernel is used throughout; lengthscales are bounded
by twice the unit-cube side, since longer scales carry no resolvable
structure on the domain.  The surrogate stays fixed during BO, so these
one-off fits are the only place hyperparameters are learned.

Run from the repo root:

    python3 scripts/fit_gp_hyperparams.py [--tasks 8]
"""

from __future__ import annotations

import argparse

import numpy as np
from scipy.optimize import minimize

from nafbo.gp import Dataset, FitBounds, GpHyperparams, KernelSpec, _lml_and_grad
from nafbo.objectives import FamilySpec, sample_task
from nafbo.sobol import sobol_points

# The benchmark families use the default translation/scaling ranges; the
# rhino families vary only their own shape parameters.
FAMILIES = {
    "rhino1": FamilySpec("rhino1", translation_range=(-0.2, 0.2),
                         scaling_range=(1.0, 1.0)),
    "rhino2": FamilySpec("rhino2", translation_range=(0.0, 0.0),
                         scaling_range=(1.0, 1.0)),
    "branin": FamilySpec("branin"),
    "goldstein-price": FamilySpec("goldstein-price"),
    "hartmann3": FamilySpec("hartmann3"),
}
BOUNDS = FitBounds(lengthscale=(1e-2, 2.0), signal_variance=(1e-8, 1e12),
                   noise_variance=(1e-8, 1e6))


def fit_joint(datasets: list[Dataset], kind: str, bounds: FitBounds,
              n_restarts: int, rng: np.random.Generator) -> tuple[GpHyperparams, float]:
    """Maximize the summed LML over datasets sharing one hyperparameter set."""
    d = datasets[0].x.shape[1]
    lo = np.log(np.array([bounds.lengthscale[0]] * d
                         + [bounds.signal_variance[0], bounds.noise_variance[0]]))
    hi = np.log(np.array([bounds.lengthscale[1]] * d
                         + [bounds.signal_variance[1], bounds.noise_variance[1]]))
    y_var = max(float(np.mean([np.var(ds.y) for ds in datasets])), 1e-10)
    first = np.clip(np.log(np.concatenate([np.full(d, 0.3), [y_var, 1e-4 * y_var]])),
                    lo, hi)
    inits = [first] + [rng.uniform(lo, hi) for _ in range(n_restarts - 1)]

    def objective(theta):
        total, grad = 0.0, np.zeros_like(theta)
        for ds in datasets:
            lml, g = _lml_and_grad(ds, kind, theta)
            if not np.isfinite(lml):
                return 1e25, np.zeros_like(theta)
            total += lml
            grad += g
        return -total, -grad

    best_theta, best_val = None, np.inf
    for theta0 in inits:
        res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                       bounds=list(zip(lo, hi)))
        if np.isfinite(res.fun) and res.fun < best_val:
            best_theta, best_val = res.x, res.fun
    hyper = GpHyperparams(
        KernelSpec(kind, np.exp(best_theta[:d]), float(np.exp(best_theta[d]))),
        float(np.exp(best_theta[d + 1])),
    )
    n_total = sum(ds.n for ds in datasets)
    return hyper, -best_val / n_total


def fit_family(spec: FamilySpec, n_tasks: int,
               kind: str = "squared-exponential", seed: int = 0):
    rng = np.random.default_rng(seed)
    pts = sobol_points(spec.dim, 64 * spec.dim)
    datasets = [Dataset(pts, sample_task(spec, rng).evaluate_batch(pts))
                for _ in range(n_tasks)]
    hyper, lml = fit_joint(datasets, kind, BOUNDS, n_restarts=6, rng=rng)
    return {"lengthscales": hyper.kernel.lengthscales,
            "signal_variance": hyper.kernel.signal_variance,
            "noise_variance": hyper.noise_variance, "lml_per_point": lml}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--tasks", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    for base, spec in FAMILIES.items():
        r = fit_family(spec, args.tasks, seed=args.seed)
        ls = np.array2string(r["lengthscales"], precision=4)
        print(f"{base:16s} lml/n={r['lml_per_point']:+9.3f}  ls={ls}  "
              f"sig={r['signal_variance']:.6g}  noise={r['noise_variance']:.4g}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
