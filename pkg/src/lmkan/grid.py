"""Unbounded static percentile grid.

Interior grid points sit at equispaced percentile levels of a cheap
sigmoid-like function ``sigma``, so the interval holding ``x`` is
``floor(sigma(x) * G)`` and can be found in O(1).  Two ghost points, one
beyond each end, give the edge basis functions a finite slope on the
unbounded intervals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "SigmaGrid",
    "Preamble",
    "sigma",
    "sigma_inv",
    "build_grid",
    "interval_index",
    "preamble",
]


def sigma(x):
    """Laplace CDF, a one-exponential stand-in for the Gaussian CDF.

    ``0.5 * exp(x)`` for ``x <= 0`` and ``1 - 0.5 * exp(-x)`` otherwise.
    Accepts scalars or arrays; NaN propagates.
    """
    xa = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(xa))
    out = np.where(xa > 0, 1.0 - 0.5 * t, 0.5 * t)
    if np.ndim(x) == 0:
        return float(out)
    return out


def sigma_inv(p):
    """Inverse of :func:`sigma`; ``p`` must lie strictly inside (0, 1)."""
    pa = np.asarray(p, dtype=np.float64)
    if not np.all((pa > 0.0) & (pa < 1.0)):
        raise ValueError("sigma_inv is defined on the open interval (0, 1)")
    with np.errstate(divide="ignore"):
        out = np.where(pa <= 0.5, np.log(2.0 * pa), -np.log(2.0 * (1.0 - pa)))
    if np.ndim(p) == 0:
        return float(out)
    return out


@dataclass(frozen=True, eq=False)
class SigmaGrid:
    """Immutable grid with ``G`` intervals and ``G + 1`` nodes (ghosts included).

    ``points[0]`` and ``points[G]`` are the ghost nodes; ``inv_areas[i1, i2]``
    is the reciprocal area of cell ``(i1, i2)``.
    """

    G: int
    points: np.ndarray
    inv_areas: np.ndarray

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def interior(self) -> np.ndarray:
        return self.points[1:-1]


def build_grid(G: int) -> SigmaGrid:
    if int(G) != G or G < 3:
        raise ConfigError(f"need an integer G >= 3, got {G!r}", field="G")
    G = int(G)
    pts = np.empty(G + 1)
    # build the left half and mirror it so the grid is exactly antisymmetric
    for k in range(1, (G + 1) // 2):
        pts[k] = np.log(2.0 * k / G)
        pts[G - k] = -pts[k]
    if G % 2 == 0:
        pts[G // 2] = 0.0
    pts[0] = 2.0 * pts[1] - pts[2]
    pts[G] = -pts[0]
    h = np.diff(pts)
    inv_areas = 1.0 / np.outer(h, h)
    pts.flags.writeable = False
    inv_areas.flags.writeable = False
    return SigmaGrid(G=G, points=pts, inv_areas=inv_areas)


def interval_index(grid: SigmaGrid, x):
    """Index of the grid interval holding ``x``, clamped into ``[0, G-1]``.

    Interval ``i`` spans ``[points[i], points[i+1])``; intervals 0 and
    ``G-1`` extend to minus and plus infinity.
    """
    s = np.asarray(sigma(x)) * grid.G
    with np.errstate(invalid="ignore"):
        idx = np.clip(np.floor(s), 0, grid.G - 1)
    idx = np.where(np.isnan(idx), 0, idx).astype(np.int64)
    if np.ndim(x) == 0:
        return int(idx)
    return idx


@dataclass(frozen=True)
class Preamble:
    """Cell indices and the four bilinear weights ``w[a][b]`` for corner ``(i1+a, i2+b)``."""

    i1: np.ndarray
    i2: np.ndarray
    w00: np.ndarray
    w10: np.ndarray
    w01: np.ndarray
    w11: np.ndarray

    def __iter__(self):
        return iter((self.i1, self.i2, self.w00, self.w10, self.w01, self.w11))


def preamble(grid: SigmaGrid, x1, x2) -> Preamble:
    """Shared per-argument-pair work: cell lookup plus four bilinear weights.

    On the two unbounded edge intervals the weights extrapolate linearly
    through the ghost nodes and may leave [0, 1]; they always sum to 1.
    """
    scalar = np.ndim(x1) == 0 and np.ndim(x2) == 0
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    i1 = np.asarray(interval_index(grid, x1))
    i2 = np.asarray(interval_index(grid, x2))
    pts = grid.points
    a = grid.inv_areas[i1, i2]
    u1 = pts[i1 + 1] - x1
    l1 = x1 - pts[i1]
    u2 = pts[i2 + 1] - x2
    l2 = x2 - pts[i2]
    w00 = u1 * u2 * a
    w10 = l1 * u2 * a
    w01 = u1 * l2 * a
    w11 = l1 * l2 * a
    if scalar:
        return Preamble(int(i1), int(i2), float(w00), float(w10), float(w01), float(w11))
    return Preamble(i1, i2, w00, w10, w01, w11)
