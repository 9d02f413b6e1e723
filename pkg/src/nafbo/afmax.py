"""Gradient-free acquisition maximization on hierarchical Sobol grids.

Stage one scores a fixed N_MS-point Sobol grid.  Stage two re-scores an
N_LS-point Sobol grid scaled into one grid cell (an axis-aligned box of
side N_MS^(-1/D)) around each of the top-k stage-one points, clipped to
the cube.  The best point across both stages wins; ties resolve to the
lowest evaluation index (global grid first, then local grids in seed
order).  The same machinery yields the per-step candidate set: the global
grid plus the k local-grid maximizers.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .sobol import sobol_points


@dataclass(frozen=True)
class XiSet:
    """Candidate set for one step: fixed global grid plus local refinements."""

    global_points: np.ndarray
    local_points: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return np.vstack([self.global_points, self.local_points])

    @property
    def size(self) -> int:
        return self.global_points.shape[0] + self.local_points.shape[0]


def _sanitize(vals: np.ndarray, counter: list[int]) -> np.ndarray:
    vals = np.asarray(vals, dtype=np.float64)
    bad = ~np.isfinite(vals)
    if bad.any():
        counter[0] += int(bad.sum())
        warnings.warn(
            f"acquisition returned {int(bad.sum())} non-finite values; treating as -inf",
            RuntimeWarning,
        )
        vals = np.where(bad, -np.inf, vals)
    return vals


class HierarchicalMaximizer:
    """Reusable maximizer with cached grids for a fixed (dim, N_MS, N_LS, k)."""

    def __init__(self, dim: int, n_global: int, n_local: int | None = None, k: int = 5):
        if n_global < 1 or k < 1:
            raise ValueError("n_global and k must be positive")
        n_local = n_global if n_local is None else n_local
        if k > n_global:
            raise ValueError(f"k={k} exceeds the global grid size {n_global}")
        self.dim = dim
        self.k = k
        self.global_grid = sobol_points(dim, n_global)
        self.cell = n_global ** (-1.0 / dim)
        self._local_offsets = (sobol_points(dim, n_local) - 0.5) * self.cell
        self.nonfinite_count = 0

    def local_grid(self, center: np.ndarray) -> np.ndarray:
        return np.clip(center + self._local_offsets, 0.0, 1.0)

    def _stages(self, af) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        counter = [0]
        g_vals = _sanitize(af(self.global_grid), counter)
        # stable sort keeps the lowest index first among tied seeds
        seeds = np.argsort(-g_vals, kind="stable")[: self.k]
        local_pts, local_vals = [], []
        for s in seeds:
            pts = self.local_grid(self.global_grid[s])
            local_pts.append(pts)
            local_vals.append(_sanitize(af(pts), counter))
        self.nonfinite_count += counter[0]
        return g_vals, local_pts, local_vals

    def maximize(self, af) -> tuple[np.ndarray, float]:
        """Best point over the global grid and all local refinement grids."""
        g_vals, local_pts, local_vals = self._stages(af)
        all_vals = np.concatenate([g_vals] + local_vals)
        best = int(np.argmax(all_vals))  # first occurrence wins ties
        best_val = float(all_vals[best])
        if best_val == -np.inf:
            raise RuntimeError("acquisition was non-finite at every candidate")
        n_g = len(g_vals)
        if best < n_g:
            return self.global_grid[best].copy(), best_val
        best -= n_g
        n_l = local_pts[0].shape[0]
        return local_pts[best // n_l][best % n_l].copy(), best_val

    def xi_set(self, af) -> XiSet:
        """Global grid plus the argmax of each local refinement grid."""
        _, local_pts, local_vals = self._stages(af)
        maximizers = [pts[int(np.argmax(vals))] for pts, vals in zip(local_pts, local_vals)]
        return XiSet(self.global_grid, np.asarray(maximizers))


def maximize_af(af, dim: int, n_global: int, n_local: int | None = None,
                k: int = 5) -> tuple[np.ndarray, float]:
    return HierarchicalMaximizer(dim, n_global, n_local, k).maximize(af)


def build_xi_set(af, dim: int, n_global: int, n_local: int | None = None,
                 k: int = 5) -> XiSet:
    return HierarchicalMaximizer(dim, n_global, n_local, k).xi_set(af)
