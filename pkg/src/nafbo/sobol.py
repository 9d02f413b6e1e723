"""Sobol low-discrepancy point sets built from vendored direction numbers.

The sequence is defined entirely by the direction-number table shipped with
the package (``data/joe_kuo_d21.txt``, the widely used Joe-Kuo
initialisation for the first 21 dimensions).  Coordinates are dyadic
rationals with 52 fractional bits, so every value is exact in double
precision and reruns are bit-identical.

By convention the all-zeros point at sequence index 0 is skipped: index 1
is the first point handed out.
"""
from __future__ import annotations

import functools
from importlib import resources

import numpy as np

N_BITS = 52
_SCALE = 2.0 ** -N_BITS


def _parse_direction_file(text: str) -> list[tuple[int, int, list[int]]]:
    """Parse rows ``d s a m_1 ... m_s`` into (degree, a, initial m) tuples."""
    rows = []
    lines = text.strip().splitlines()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        d, s, a = int(parts[0]), int(parts[1]), int(parts[2])
        m = [int(tok) for tok in parts[3:]]
        if len(m) != s:
            raise ValueError(
                f"direction-number file line {lineno}: expected {s} initial "
                f"values for dimension {d}, got {len(m)}"
            )
        if d != len(rows) + 2:
            raise ValueError(f"direction-number file line {lineno}: dimensions out of order")
        rows.append((s, a, m))
    return rows


@functools.lru_cache(maxsize=1)
def _table() -> list[tuple[int, int, list[int]]]:
    text = resources.files("nafbo").joinpath("data/joe_kuo_d21.txt").read_text()
    return _parse_direction_file(text)


def max_dimension() -> int:
    """Highest dimension supported by the vendored table."""
    return len(_table()) + 1


@functools.lru_cache(maxsize=64)
def direction_numbers(dim: int) -> np.ndarray:
    """Direction numbers ``v_k`` for the first ``dim`` coordinates.

    Returns an int64 array of shape (dim, N_BITS); entry [j, k-1] holds
    ``m_k * 2**(N_BITS - k)`` for coordinate j.  Coordinate 0 uses the
    trivial recurrence m_k = 1 (van der Corput in base 2); the rest follow
    the primitive-polynomial recurrence seeded from the vendored table.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if dim > max_dimension():
        raise ValueError(
            f"dim={dim} exceeds the vendored direction-number table "
            f"(capacity {max_dimension()})"
        )
    v = np.zeros((dim, N_BITS), dtype=np.int64)
    v[0] = [1 << (N_BITS - k) for k in range(1, N_BITS + 1)]
    for j in range(1, dim):
        s, a, m_init = _table()[j - 1]
        m = list(m_init)
        for i in range(s, N_BITS):
            # m_i = m_{i-s} XOR 2^s m_{i-s} XOR sum_k 2^k a_k m_{i-k}
            mi = m[i - s] ^ (m[i - s] << s)
            for k in range(1, s):
                if (a >> (s - 1 - k)) & 1:
                    mi ^= m[i - k] << k
            m.append(mi)
        v[j] = [m[k] << (N_BITS - 1 - k) for k in range(N_BITS)]
    v.setflags(write=False)
    return v


def _point_index_bits(index: int, v: np.ndarray) -> np.ndarray:
    """Integer lattice coordinates of one sequence point, by Gray code."""
    g = index ^ (index >> 1)
    x = np.zeros(v.shape[0], dtype=np.int64)
    k = 0
    while g:
        if g & 1:
            x ^= v[:, k]
        g >>= 1
        k += 1
    return x


def sobol_points(dim: int, n: int, start: int = 1) -> np.ndarray:
    """First ``n`` points of the ``dim``-dimensional sequence from ``start``.

    ``start`` indexes into the underlying sequence, whose index-0 point is
    the excluded all-zeros point; the default returns indices 1..n.  Output
    has shape (n, dim) with values in (0, 1).
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if start < 1:
        raise ValueError(f"start must be >= 1 (the zero point is excluded), got {start}")
    v = direction_numbers(dim)
    out = np.empty((n, dim), dtype=np.int64)
    if n == 0:
        return out.astype(np.float64)
    x = _point_index_bits(start, v)
    out[0] = x
    for i in range(1, n):
        # Antonov-Saleev update: flip the direction of the lowest set bit.
        idx = start + i
        x = x ^ v[:, (idx & -idx).bit_length() - 1]
        out[i] = x
    return out * _SCALE
