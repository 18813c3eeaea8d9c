"""Standalone 2D splined functions on a :class:`~lmkan.grid.SigmaGrid`.

``eval2d`` and ``grad2d`` use the O(1) four-corner lookup.  ``basis_weight_1d``
and ``eval2d_dense_oracle`` follow the piecewise definition of the basis
directly (no sigma lookup) and are kept in the library as the reference
every fast path is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .grid import SigmaGrid, interval_index, preamble

__all__ = [
    "Func2D",
    "Grad2D",
    "basis_weight_1d",
    "eval2d",
    "eval2d_dense_oracle",
    "grad2d",
    "linear_sheet",
]


@dataclass
class Func2D:
    """Coefficient sheet ``coeffs[i1, i2]``: the function value at node ``(i1, i2)``."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.coeffs.shape[1]:
            raise ShapeError(f"coefficient sheet must be square, got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coefficient sheet contains non-finite values")

    def check_grid(self, grid: SigmaGrid) -> None:
        if self.coeffs.shape != (grid.G + 1, grid.G + 1):
            raise ShapeError(
                f"sheet shape {self.coeffs.shape} does not match grid with G={grid.G}"
            )


def linear_sheet(grid: SigmaGrid, a, b, c) -> np.ndarray:
    """Sheet sampling ``a*x1 + b*x2 + c`` at every node, ghosts included."""
    pts = grid.points
    return a * pts[:, None] + b * pts[None, :] + c


def basis_weight_1d(grid: SigmaGrid, i: int, x):
    """Value of the ``i``-th 1D basis function at ``x``.

    Interior hats rise from ``points[i-1]`` to 1 at ``points[i]`` and fall to
    0 at ``points[i+1]``.  Functions touching an unbounded interval keep their
    slope there: basis 0 lives on ``x < points[1]``, basis ``G`` on
    ``x > points[G-1]``, and hats 1 and ``G-1`` extend their outer ramp to
    infinity (going negative past the ghost node).
    """
    G = grid.G
    if not 0 <= i <= G:
        raise IndexError(f"basis index {i} outside [0, {G}]")
    pts = grid.points
    xa = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(xa)
    if i == 0:
        m = xa < pts[1]
        out = np.where(m, (pts[1] - xa) / (pts[1] - pts[0]), out)
    elif i == G:
        m = xa >= pts[G - 1]
        out = np.where(m, (xa - pts[G - 1]) / (pts[G] - pts[G - 1]), out)
    else:
        rising = (xa - pts[i - 1]) / (pts[i] - pts[i - 1])
        falling = (pts[i + 1] - xa) / (pts[i + 1] - pts[i])
        left = xa < pts[i] if i == 1 else (xa >= pts[i - 1]) & (xa < pts[i])
        right = xa >= pts[i] if i == G - 1 else (xa >= pts[i]) & (xa < pts[i + 1])
        out = np.where(left, rising, np.where(right, falling, out))
    if np.ndim(x) == 0:
        return float(out)
    return out


def eval2d(grid: SigmaGrid, f: Func2D, x1, x2):
    """O(1) evaluation: four-term lookup around the cell holding ``(x1, x2)``.

    The bilinear form is written in corner-difference form, which keeps
    constant sheets exact far out in the tails where the individual corner
    weights grow large and cancel.
    """
    p = f.coeffs
    pts = grid.points
    i1 = interval_index(grid, x1)
    i2 = interval_index(grid, x2)
    t1 = (x1 - pts[i1]) / (pts[i1 + 1] - pts[i1])
    t2 = (x2 - pts[i2]) / (pts[i2 + 1] - pts[i2])
    p00 = p[i1, i2]
    p10 = p[i1 + 1, i2]
    p01 = p[i1, i2 + 1]
    p11 = p[i1 + 1, i2 + 1]
    out = p00 + t1 * (p10 - p00) + t2 * (p01 - p00) + (t1 * t2) * (p11 - p10 - p01 + p00)
    return float(out) if np.ndim(out) == 0 else out


def eval2d_dense_oracle(grid: SigmaGrid, f: Func2D, x1, x2):
    """Reference semantics: full double sum over all ``(G+1)**2`` basis products."""
    f.check_grid(grid)
    G = grid.G
    b1 = np.stack([np.asarray(basis_weight_1d(grid, i, x1)) for i in range(G + 1)])
    b2 = np.stack([np.asarray(basis_weight_1d(grid, i, x2)) for i in range(G + 1)])
    total = np.zeros(np.broadcast(b1[0], b2[0]).shape)
    for i1 in range(G + 1):
        for i2 in range(G + 1):
            total = total + f.coeffs[i1, i2] * (b1[i1] * b2[i2])
    return float(total) if total.ndim == 0 else total


class Grad2D(NamedTuple):
    df_dx1: float
    df_dx2: float
    i1: int
    i2: int
    weights: np.ndarray  # weights[a, b] = d f / d coeffs[i1 + a, i2 + b]

    def coeff_grad(self, G: int) -> np.ndarray:
        """Scatter the four active weights into a dense ``(G+1, G+1)`` sheet."""
        out = np.zeros((G + 1, G + 1))
        out[self.i1:self.i1 + 2, self.i2:self.i2 + 2] = self.weights
        return out


def grad2d(grid: SigmaGrid, f: Func2D, x1: float, x2: float) -> Grad2D:
    """Input and coefficient gradients of ``eval2d`` at a single point.

    On a cell boundary the derivative of the cell picked by the floor index
    (the right-hand cell) is returned.
    """
    p = f.coeffs
    pts = grid.points
    i1, i2, w00, w10, w01, w11 = preamble(grid, float(x1), float(x2))
    a = grid.inv_areas[i1, i2]
    u1, l1 = pts[i1 + 1] - x1, x1 - pts[i1]
    u2, l2 = pts[i2 + 1] - x2, x2 - pts[i2]
    d1 = ((p[i1 + 1, i2] - p[i1, i2]) * u2 + (p[i1 + 1, i2 + 1] - p[i1, i2 + 1]) * l2) * a
    d2 = ((p[i1, i2 + 1] - p[i1, i2]) * u1 + (p[i1 + 1, i2 + 1] - p[i1 + 1, i2]) * l1) * a
    w = np.array([[w00, w01], [w10, w11]])
    return Grad2D(float(d1), float(d2), i1, i2, w)
