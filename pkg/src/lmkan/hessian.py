"""Finite-difference Hessian penalty on coefficient sheets.

For each sheet the squared Frobenius norm of the Hessian
``H = D11**2 + 2*D12**2 + D22**2`` is estimated at every node whose three
point stencils exist (``1 <= i, j <= G-1``; ghost coefficients act as
neighbours only) using the non-uniform spacings of the grid, and averaged.
The stencils are exact on quadratics, so the penalty vanishes exactly on
sheets of the form ``a*x1 + b*x2 + c``.

All functions accept a single ``(G+1, G+1)`` sheet or a stack
``(G+1, G+1, *batch)`` such as a layer's ``P`` tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .grid import SigmaGrid
from .spline2d import Func2D

__all__ = [
    "HessianPenaltyConfig",
    "second_differences",
    "hessian_penalty",
    "hessian_penalty_grad",
    "sheets_penalty",
    "sheets_penalty_and_grad",
    "model_penalty",
    "model_penalty_and_grads",
]


@dataclass(frozen=True)
class HessianPenaltyConfig:
    lam: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}", field="lambda")


def _coeffs(grid: SigmaGrid, f) -> np.ndarray:
    c = f.coeffs if isinstance(f, Func2D) else np.asarray(f, dtype=np.float64)
    if c.ndim < 2 or c.shape[:2] != (grid.G + 1, grid.G + 1):
        raise ShapeError(f"sheet shape {c.shape[:2]} does not match grid with G={grid.G}")
    return c


def _stencil_weights(grid: SigmaGrid, extra_dims: int):
    h = np.diff(grid.points)
    hl, hr = h[:-1], h[1:]
    den = hl * hr * (hl + hr)
    shape = (-1,) + (1,) * extra_dims
    plus = (2.0 * hl / den).reshape(shape)
    mid = (-2.0 * (hl + hr) / den).reshape(shape)
    minus = (2.0 * hr / den).reshape(shape)
    span = (hl + hr).reshape(shape)
    return plus, mid, minus, span


def second_differences(grid: SigmaGrid, f):
    """``(D11, D12, D22)``, each of shape ``(G-1, G-1, *batch)``."""
    p = _coeffs(grid, f)
    nb = p.ndim - 2
    plus, mid, minus, span = _stencil_weights(grid, nb + 1)
    plus_j, mid_j, minus_j, span_j = (w.reshape((1, -1) + (1,) * nb) for w in _stencil_weights(grid, nb))
    c = p[1:-1, 1:-1]
    d11 = plus * p[2:, 1:-1] + mid * c + minus * p[:-2, 1:-1]
    d22 = plus_j * p[1:-1, 2:] + mid_j * c + minus_j * p[1:-1, :-2]
    d12 = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / (span * span_j)
    return d11, d12, d22


def sheets_penalty(grid: SigmaGrid, f) -> np.ndarray:
    """Per-sheet mean of ``H`` over the ``(G-1)**2`` stencil-valid nodes."""
    d11, d12, d22 = second_differences(grid, f)
    H = d11 * d11 + 2.0 * d12 * d12 + d22 * d22
    return H.mean(axis=(0, 1))


def sheets_penalty_and_grad(grid: SigmaGrid, f):
    """Sum of per-sheet penalties and its gradient with respect to every coefficient."""
    p = _coeffs(grid, f)
    nb = p.ndim - 2
    d11, d12, d22 = second_differences(grid, p)
    n_nodes = (grid.G - 1) ** 2
    total = float((d11 * d11 + 2.0 * d12 * d12 + d22 * d22).sum()) / n_nodes
    plus, mid, minus, span = _stencil_weights(grid, nb + 1)
    plus_j, mid_j, minus_j, span_j = (w.reshape((1, -1) + (1,) * nb) for w in _stencil_weights(grid, nb))
    g = np.zeros_like(p)
    a = (2.0 / n_nodes) * d11
    g[2:, 1:-1] += plus * a
    g[1:-1, 1:-1] += mid * a
    g[:-2, 1:-1] += minus * a
    a = (2.0 / n_nodes) * d22
    g[1:-1, 2:] += plus_j * a
    g[1:-1, 1:-1] += mid_j * a
    g[1:-1, :-2] += minus_j * a
    b = (4.0 / n_nodes) * d12 / (span * span_j)
    g[2:, 2:] += b
    g[2:, :-2] -= b
    g[:-2, 2:] -= b
    g[:-2, :-2] += b
    return total, g


def hessian_penalty(grid: SigmaGrid, f) -> float:
    """Mean Hessian energy of one sheet."""
    p = _coeffs(grid, f)
    if p.ndim != 2:
        raise ShapeError("hessian_penalty takes a single sheet; use sheets_penalty for stacks")
    return float(sheets_penalty(grid, p))


def hessian_penalty_grad(grid: SigmaGrid, f) -> np.ndarray:
    p = _coeffs(grid, f)
    if p.ndim != 2:
        raise ShapeError("hessian_penalty_grad takes a single sheet")
    return sheets_penalty_and_grad(grid, p)[1]


def model_penalty(model, config) -> float:
    """``lam`` times the summed penalty of every sheet in every lmKAN layer."""
    lam = config.lam if isinstance(config, HessianPenaltyConfig) else float(config)
    if lam == 0.0:
        return 0.0
    total = 0.0
    for block in model.lmkan_blocks():
        total += float(sheets_penalty(block.layer.grid, block.layer.P).sum())
    return lam * total


def model_penalty_and_grads(model):
    """Unscaled penalty sum and a list of ``(block, dP)`` gradients."""
    total = 0.0
    grads = []
    for block in model.lmkan_blocks():
        layer = block.layer
        s, g = kernels.hessian_penalty_grad_sheets(layer.packed, layer.grid.points)
        total += s
        grads.append((block, g.transpose(1, 2, 0, 3)))
    return total, grads
