"""Objective-function families for meta-training and benchmarking.

Everything is phrased as maximization on the unit cube.  The classical
benchmarks (Branin, Goldstein-Price, Hartmann-3) use their literature
closed forms, rescaled to [0,1]^D and sign-flipped.  Task distributions
arise from per-dimension translations and a global scaling applied to a
base function: g(x) = s * f(x - t).  GP-sample instances are drawn lazily
but consistently: every evaluation conditions on all values drawn so far,
so one instance is a single coherent function.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize

from .gp import Dataset, GpHyperparams, GpPosterior, KernelSpec, kernel_eval
from .sobol import sobol_points

BASE_FAMILIES = ("branin", "goldstein-price", "hartmann3", "rhino1", "rhino2",
                 "gp-sample", "tabular")


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"expected a {dim}-dimensional point, got shape {x.shape}")
        return x.reshape(1, dim), True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected shape (n, {dim}), got {x.shape}")
    return x, False


def eval_branin(x) -> float | np.ndarray:
    """Negated Branin on the unit square (original domain [-5,10]x[0,15])."""
    pts, single = _as_batch(x, 2)
    x1 = 15.0 * pts[:, 0] - 5.0
    x2 = 15.0 * pts[:, 1]
    b = 5.1 / (4.0 * np.pi**2)
    c = 5.0 / np.pi
    val = (x2 - b * x1**2 + c * x1 - 6.0) ** 2
    val += 10.0 * (1.0 - 1.0 / (8.0 * np.pi)) * np.cos(x1) + 10.0
    out = -val
    return float(out[0]) if single else out


def eval_goldstein_price(x) -> float | np.ndarray:
    """Negated Goldstein-Price on the unit square (original domain [-2,2]^2)."""
    pts, single = _as_batch(x, 2)
    a = 4.0 * pts[:, 0] - 2.0
    b = 4.0 * pts[:, 1] - 2.0
    f1 = 1 + (a + b + 1) ** 2 * (19 - 14 * a + 3 * a**2 - 14 * b + 6 * a * b + 3 * b**2)
    f2 = 30 + (2 * a - 3 * b) ** 2 * (18 - 32 * a + 12 * a**2 + 48 * b - 36 * a * b + 27 * b**2)
    out = -(f1 * f2)
    return float(out[0]) if single else out


_H3_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_H3_A = np.array([
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
])
_H3_P = 1e-4 * np.array([
    [3689.0, 1170.0, 2673.0],
    [4699.0, 4387.0, 7470.0],
    [1091.0, 8732.0, 5547.0],
    [381.0, 5743.0, 8828.0],
])


def eval_hartmann3(x) -> float | np.ndarray:
    """Sign-flipped Hartmann-3 (native domain is already the unit cube)."""
    pts, single = _as_batch(x, 3)
    inner = np.einsum("ij,nij->ni", _H3_A, (pts[:, None, :] - _H3_P[None, :, :]) ** 2)
    out = np.exp(-inner) @ _H3_ALPHA
    return float(out[0]) if single else out


def _bump(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def eval_rhino1(x, t: float = 0.0) -> float | np.ndarray:
    """Two fixed bumps, jointly shifted by t: a wide hint and a sharp peak."""
    pts, single = _as_batch(x, 1)
    z = pts[:, 0]
    out = 0.5 * _bump(z, 0.3 - t, 0.1) + 3.0 * _bump(z, 0.7 - t, 0.01)
    return float(out[0]) if single else out


def eval_rhino2(x, h: float) -> float | np.ndarray:
    """Wide bump at 0.2 whose height h equals the sharp peak's location."""
    pts, single = _as_batch(x, 1)
    z = pts[:, 0]
    out = h * _bump(z, 0.2, 0.1) + 2.0 * _bump(z, h, 0.01) - 1.0
    return float(out[0]) if single else out


# Known global maximizers of the base (untranslated) forms in unit-cube
# coordinates; used as polish seeds when computing instance optima.
_BASE_OPTIMIZERS = {
    "branin": np.array([
        [(5.0 - np.pi) / 15.0, 12.275 / 15.0],
        [(5.0 + np.pi) / 15.0, 2.275 / 15.0],
        [(5.0 + 3.0 * np.pi) / 15.0, 2.475 / 15.0],
    ]),
    "goldstein-price": np.array([[0.5, 0.25]]),
    "hartmann3": np.array([[0.114614, 0.555649, 0.852547]]),
    "rhino1": np.array([[0.7]]),
}

_BASE_EVALS = {
    "branin": eval_branin,
    "goldstein-price": eval_goldstein_price,
    "hartmann3": eval_hartmann3,
    "rhino1": eval_rhino1,
}

_BASE_DIMS = {"branin": 2, "goldstein-price": 2, "hartmann3": 3, "rhino1": 1, "rhino2": 1}

RHINO2_H_RANGE = (0.6, 0.9)


@dataclass(frozen=True)
class FamilySpec:
    """A distribution over objective functions.

    ``translation_range`` is sampled independently per dimension;
    ``scaling_range`` gives one multiplicative factor per task.  The GP
    fields only apply to base ``gp-sample``; ``path`` only to ``tabular``.
    """

    base: str
    translation_range: tuple[float, float] = (-0.1, 0.1)
    scaling_range: tuple[float, float] = (0.9, 1.1)
    kernel: str = "squared-exponential"
    lengthscale_range: tuple[float, float] = (0.05, 0.5)
    dimension: int | None = None
    path: str | None = None
    noise_std: float = 0.0
    probe_points: int | None = None
    mirror_translation: bool = False

    def __post_init__(self):
        if self.base not in BASE_FAMILIES:
            raise ValueError(f"unknown base family {self.base!r}; expected one of {BASE_FAMILIES}")
        lo, hi = self.translation_range
        if self.mirror_translation:
            # range gives the magnitude; the sign is drawn per dimension
            if not (0.0 <= lo <= hi <= 0.5):
                raise ValueError("mirrored translation range must lie within [0, 0.5]")
        elif not (-0.5 <= lo <= hi <= 0.5):
            raise ValueError("translation range must be an interval within [-0.5, 0.5]")
        slo, shi = self.scaling_range
        if not (0 < slo <= shi):
            raise ValueError("scaling range must be positive")
        if self.noise_std < 0:
            raise ValueError("noise std must be >= 0")
        if self.base == "gp-sample" and self.dimension is None:
            raise ValueError("gp-sample family requires an explicit dimension")
        if self.base == "tabular" and self.path is None:
            raise ValueError("tabular family requires a data path")

    @property
    def dim(self) -> int:
        if self.base == "gp-sample":
            return int(self.dimension)
        if self.base == "tabular":
            return load_tabular(self.path).grid.shape[1]
        return _BASE_DIMS[self.base]

    def trivial_transform(self) -> bool:
        return self.translation_range == (0.0, 0.0) and self.scaling_range == (1.0, 1.0)


class ObjectiveInstance:
    """One concrete task: a deterministic evaluator plus its optimum.

    ``optimum_value`` is exact where the family permits it (closed forms,
    tabular) and a dense-probe approximation otherwise; ``exact_optimum``
    records which.  Observation noise is *not* applied here; the harness
    adds it so the evaluator stays a pure function.
    """

    def __init__(self, name, dim, fn_batch, optimum_location, optimum_value,
                 exact_optimum, noise_std=0.0, params=None, grid=None):
        self.name = name
        self.dim = dim
        self._fn = fn_batch
        self.optimum_location = None if optimum_location is None else np.asarray(optimum_location)
        self.optimum_value = optimum_value
        self.exact_optimum = exact_optimum
        self.noise_std = noise_std
        self.params = dict(params or {})
        self.grid = grid  # (n, dim) normalized coordinates, tabular only

    def evaluate(self, x) -> float:
        pts, _ = _as_batch(x, self.dim)
        return float(self._fn(pts)[0])

    def evaluate_batch(self, x) -> np.ndarray:
        pts, _ = _as_batch(x, self.dim)
        return np.asarray(self._fn(pts), dtype=np.float64)


def _polish(fn_batch, x0: np.ndarray, dim: int) -> tuple[np.ndarray, float]:
    res = minimize(
        lambda z: -float(fn_batch(z.reshape(1, -1))[0]),
        np.clip(x0, 0.0, 1.0),
        method="L-BFGS-B",
        bounds=[(0.0, 1.0)] * dim,
    )
    return res.x, -res.fun


def approx_optimum(fn_batch, dim: int, n_grid: int = 4096,
                   refine: bool = True) -> tuple[np.ndarray, float]:
    """Best point found by a Sobol probe, optionally polished locally."""
    grid = sobol_points(dim, n_grid)
    vals = np.asarray(fn_batch(grid))
    best = int(np.argmax(vals))
    loc, val = grid[best], float(vals[best])
    if refine:
        loc_r, val_r = _polish(fn_batch, loc, dim)
        if val_r > val:
            loc, val = loc_r, val_r
    return loc, val


class _GpSampleFunction:
    """A single draw from a GP prior, materialized lazily.

    Each new query point is sampled from the conditional given every value
    produced so far, then cached, so the instance behaves as one fixed
    function.  Repeated queries at a cached point return the cached value.
    """

    def __init__(self, kind, lengthscale, dim, rng, jitter=1e-10):
        kern = KernelSpec(kind, np.full(dim, float(lengthscale)), 1.0)
        self.hyper = GpHyperparams(kern, jitter)
        self.dim = dim
        self.rng = rng
        self.post = GpPosterior(self.hyper, Dataset(np.zeros((0, dim)), np.zeros(0)),
                                np.zeros((0, 0)), np.zeros(0))
        self.cache: dict[bytes, float] = {}

    def seed_joint(self, pts: np.ndarray) -> np.ndarray:
        """Draw the function jointly on a probe grid (one Cholesky)."""
        k = kernel_eval(self.hyper.kernel, pts, pts)
        n = len(pts)
        jit = self.hyper.noise_variance
        while True:
            try:
                chol = cholesky(k + jit * np.eye(n), lower=True)
                break
            except np.linalg.LinAlgError:
                jit *= 100.0
                if jit > 1e-4:
                    raise
        vals = chol @ self.rng.standard_normal(n)
        data = Dataset(pts, vals)
        self.post = GpPosterior(GpHyperparams(self.hyper.kernel, jit), data,
                                chol, cho_solve((chol, True), vals))
        for p, v in zip(pts, vals):
            self.cache[p.tobytes()] = float(v)
        return vals

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        out = np.empty(len(pts))
        for i, p in enumerate(pts):
            key = p.tobytes()
            if key not in self.cache:
                mean, var = self.post.predict(p.reshape(1, -1))
                val = float(mean[0] + np.sqrt(var[0]) * self.rng.standard_normal())
                self.post = self.post.with_observation(p, val)
                self.cache[key] = val
            out[i] = self.cache[key]
        return out


def sample_gp_function(kernel_kind: str, lengthscale: float, dim: int,
                       rng: np.random.Generator,
                       probe_points: int | None = None) -> ObjectiveInstance:
    """Draw one GP-sample task; its optimum comes from a creation-time probe."""
    fn = _GpSampleFunction(kernel_kind, lengthscale, dim, rng)
    n_probe = min(1024 * dim, 4096) if probe_points is None else probe_points
    if n_probe > 0:
        pts = sobol_points(dim, n_probe)
        vals = fn.seed_joint(pts)
        best = int(np.argmax(vals))
        loc, val = pts[best], float(vals[best])
    else:
        loc, val = None, None
    return ObjectiveInstance(
        f"gp-sample-{dim}d", dim, fn, loc, val, exact_optimum=False,
        params={"kernel": kernel_kind, "lengthscale": lengthscale},
    )


def sample_task(spec: FamilySpec, rng: np.random.Generator) -> ObjectiveInstance:
    """Draw one task from the family distribution."""
    if spec.base == "tabular":
        if not spec.trivial_transform():
            raise ValueError("tabular families do not support translations or scalings")
        return tabular_instance(load_tabular(spec.path), noise_std=spec.noise_std)
    if spec.base == "gp-sample":
        if not spec.trivial_transform():
            raise ValueError("gp-sample families do not support translations or scalings")
        ls = rng.uniform(*spec.lengthscale_range)
        inst = sample_gp_function(spec.kernel, ls, spec.dim, rng, spec.probe_points)
        inst.noise_std = spec.noise_std
        return inst

    dim = spec.dim
    t = rng.uniform(spec.translation_range[0], spec.translation_range[1], size=dim)
    if spec.mirror_translation:
        t *= rng.choice([-1.0, 1.0], size=dim)
    s = float(rng.uniform(*spec.scaling_range))
    params = {"translation": t, "scaling": s}
    if spec.base == "rhino2":
        h = float(rng.uniform(*RHINO2_H_RANGE))
        params["h"] = h
        base = lambda pts: eval_rhino2(pts, h)
        seeds = np.array([[h]])
    else:
        base = _BASE_EVALS[spec.base]
        seeds = _BASE_OPTIMIZERS[spec.base]

    def fn_batch(pts, _base=base, _t=t, _s=s):
        return _s * np.asarray(_base(pts - _t))

    # exact optimum whenever a known base maximizer stays inside the cube
    candidates = [x + t for x in seeds if np.all((x + t >= 0) & (x + t <= 1))]
    best_loc, best_val = None, -np.inf
    for x0 in candidates:
        loc, val = _polish(fn_batch, x0, dim)
        if val > best_val:
            best_loc, best_val = loc, val
    probe_loc, probe_val = approx_optimum(fn_batch, dim, n_grid=spec.probe_points or 4096)
    exact = bool(candidates)
    if probe_val > best_val:
        best_loc, best_val = probe_loc, probe_val
    return ObjectiveInstance(
        spec.base, dim, fn_batch, best_loc, best_val,
        exact_optimum=exact, noise_std=spec.noise_std, params=params,
    )


@dataclass(frozen=True)
class TabularObjective:
    """A finite configuration grid with one recorded outcome per row."""

    grid: np.ndarray
    values: np.ndarray
    columns: tuple[str, ...] = field(default=())

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if grid.ndim != 2 or values.shape != (grid.shape[0],):
            raise ValueError("grid must be (n, D) with one value per row")
        if grid.shape[0] == 0:
            raise ValueError("tabular objective must contain at least one row")
        uniq = np.unique(grid, axis=0)
        if uniq.shape[0] != grid.shape[0]:
            raise ValueError("tabular grid contains duplicate configurations")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)


def load_tabular(path: str | Path) -> TabularObjective:
    """Read a ``x1,...,xD,y`` CSV into a tabular objective."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"x{i}" for i in range(1, d + 1)] + ["y"]
        if d < 1 or [h.strip() for h in header] != expected:
            raise ValueError(f"{path}: header must be x1,...,xD,y, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ValueError(f"{path}: line {lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                rows.append([float(tok) for tok in row])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric field") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return TabularObjective(arr[:, :d], arr[:, d], tuple(header[:d]))


def save_tabular(path: str | Path, tab: TabularObjective) -> None:
    """Write a tabular objective back out; round-trips exactly via repr."""
    d = tab.grid.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(1, d + 1)] + ["y"])
        for row, val in zip(tab.grid, tab.values):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(val))])


def tabular_instance(tab: TabularObjective, noise_std: float = 0.0) -> ObjectiveInstance:
    """Wrap a table as an instance on the unit cube (per-column min-max)."""
    lo = tab.grid.min(axis=0)
    span = tab.grid.max(axis=0) - lo
    degenerate = span == 0
    span = np.where(degenerate, 1.0, span)
    norm = (tab.grid - lo) / span
    norm[:, degenerate] = 0.5
    lookup = {row.tobytes(): float(v) for row, v in zip(norm, tab.values)}

    def fn_batch(pts):
        out = np.empty(len(pts))
        for i, p in enumerate(pts):
            key = p.tobytes()
            if key not in lookup:
                raise KeyError("query point is not a grid configuration")
            out[i] = lookup[key]
        return out

    best = int(np.argmax(tab.values))
    return ObjectiveInstance(
        "tabular", tab.grid.shape[1], fn_batch, norm[best], float(tab.values[best]),
        exact_optimum=True, noise_std=noise_std, grid=norm,
    )
