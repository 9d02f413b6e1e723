from __future__ import annotations

import numpy as np
import pytest

from nafbo.afmax import HierarchicalMaximizer, build_xi_set, maximize_af
from nafbo.sobol import sobol_points


def test_quadratic_argmax_within_cell_diagonal():
    rng = np.random.default_rng(4)
    for _ in range(10):
        c = rng.uniform(0.1, 0.9, size=2)
        af = lambda pts: -np.sum((pts - c) ** 2, axis=1)
        x, val = maximize_af(af, 2, n_global=256, n_local=256, k=5)
        cell_diag = np.sqrt(2) * 256 ** (-0.5)
        assert np.linalg.norm(x - c) <= cell_diag
        assert val == pytest.approx(-np.linalg.norm(x - c) ** 2)


def test_corner_maximum_is_reached_by_clipping():
    af = lambda pts: pts.sum(axis=1)  # maximal at the (1, 1) corner
    x, _ = maximize_af(af, 2, n_global=128, k=3)
    cell = 128 ** (-0.5)
    assert np.all(x >= 1.0 - cell)


def test_doubling_global_grid_never_hurts():
    c = np.array([0.631, 0.287])
    af = lambda pts: -np.sum((pts - c) ** 2, axis=1)
    vals = [maximize_af(af, 2, n_global=n, n_local=128, k=5)[1] for n in (128, 256, 512)]
    assert vals[0] <= vals[1] <= vals[2]


def test_constant_af_ties_break_to_first_grid_point():
    af = lambda pts: np.zeros(len(pts))
    x, val = maximize_af(af, 2, n_global=64, k=4)
    np.testing.assert_array_equal(x, sobol_points(2, 1)[0])
    assert val == 0.0


def test_nonfinite_values_counted_and_ignored():
    def af(pts):
        vals = pts[:, 0].copy()
        vals[pts[:, 0] > 0.8] = np.nan
        return vals

    m = HierarchicalMaximizer(1, 64, 64, k=3)
    with pytest.warns(RuntimeWarning, match="non-finite"):
        x, val = m.maximize(af)
    assert m.nonfinite_count > 0
    assert np.isfinite(val)
    assert x[0] <= 0.8


def test_all_nonfinite_raises():
    af = lambda pts: np.full(len(pts), np.nan)
    m = HierarchicalMaximizer(2, 32, 32, k=2)
    with pytest.warns(RuntimeWarning):
        with pytest.raises(RuntimeError, match="non-finite at every"):
            m.maximize(af)


def test_xi_set_structure():
    c = np.array([0.4, 0.77])
    af = lambda pts: -np.sum((pts - c) ** 2, axis=1)
    xi = build_xi_set(af, 2, n_global=256, n_local=64, k=5)
    assert xi.global_points.shape == (256, 2)
    assert xi.local_points.shape == (5, 2)
    assert xi.size == 261
    np.testing.assert_array_equal(xi.points[:256], xi.global_points)
    np.testing.assert_array_equal(xi.global_points, sobol_points(2, 256))
    # every local maximizer stays inside its seed's cell (after clipping)
    cell = 256 ** (-0.5)
    g_vals = af(xi.global_points)
    seeds = xi.global_points[np.argsort(-g_vals, kind="stable")[:5]]
    for loc, seed in zip(xi.local_points, seeds):
        assert np.all(np.abs(loc - seed) <= cell / 2 + 1e-12)
    # the refinement beats the best global point for a smooth peak
    assert af(xi.local_points.reshape(-1, 2)).max() >= g_vals.max()


def test_deterministic_across_calls():
    af = lambda pts: np.sin(7 * pts[:, 0]) * np.cos(3 * pts[:, 1])
    a = maximize_af(af, 2, 128, 64, 5)
    b = maximize_af(af, 2, 128, 64, 5)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_validation():
    with pytest.raises(ValueError):
        HierarchicalMaximizer(2, 4, k=5)
    with pytest.raises(ValueError):
        HierarchicalMaximizer(2, 0)
