"""Inference-time absorption of preconditioning branches and batch norms.

Because coefficients are function values at grid nodes and edge intervals
extrapolate linearly, any function that is linear on every grid interval
(including the two unbounded ones) is represented exactly by sampling it at
the nodes.  ``ReLU(x)`` qualifies when 0 is a node, i.e. when ``G`` is even.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FusionError
from .layers import BatchNorm, Linear, LmKanLayer, PrecondBlock
from .model import Model

__all__ = [
    "fuse_relu_first",
    "fuse_output_batchnorm",
    "absorb_gamma",
    "fuse_linear_batchnorm",
    "fuse_model",
    "FuseReport",
    "linear_surrogate",
]


def fuse_relu_first(block: PrecondBlock) -> LmKanLayer:
    """Fold ``gamma`` and the ``linW @ ReLU(x) + linB`` branch into the coefficients.

    The bias is spread evenly over the ``n_in / 2`` functions feeding each output.
    """
    if block.mode != "relu_first":
        raise FusionError(f"cannot fuse a {block.mode!r} block into a pure lookup layer")
    layer = block.layer
    G = layer.G
    if block.branch_relu and G % 2:
        raise FusionError(f"ReLU is only representable on an even grid, got G={G}")
    pts = layer.grid.points
    node = np.maximum(pts, 0.0) if block.branch_relu else pts
    w_even = block.linW[:, 0::2].T  # (n_pairs, n_out)
    w_odd = block.linW[:, 1::2].T
    P = layer.gamma * layer.P
    P = P + node[:, None, None, None] * w_even[None, None]
    P = P + node[None, :, None, None] * w_odd[None, None]
    P = P + block.linB / layer.n_pairs
    return LmKanLayer(layer.n_in, layer.n_out, layer.grid, P, gamma=1.0, tile=layer.tile)


def fuse_output_batchnorm(layer: LmKanLayer, bn: BatchNorm) -> LmKanLayer:
    """Fold an inference-mode batch norm applied to the layer output into ``P``."""
    if not bn.has_stats:
        raise FusionError("batch norm running statistics are not initialized")
    if bn.dim != layer.n_out:
        raise FusionError("batch norm width differs from layer output width")
    scale, shift = bn.scale_shift()
    P = layer.P * (layer.gamma * scale) + shift / layer.n_pairs
    return LmKanLayer(layer.n_in, layer.n_out, layer.grid, P, gamma=1.0, tile=layer.tile)


def absorb_gamma(block: PrecondBlock, bn: BatchNorm | None = None) -> PrecondBlock:
    """Partial fusion for blocks that keep their branch (``relu_last``).

    ``gamma`` moves into ``P``; a following batch norm is folded into both
    branches, which is exact for ReLU because the BN scale is positive unless
    an affine weight is negative.
    """
    layer = block.layer
    P = layer.gamma * layer.P
    linW = None if block.linW is None else block.linW.copy()
    linB = None if block.linB is None else block.linB.copy()
    if bn is not None:
        if not bn.has_stats:
            raise FusionError("batch norm running statistics are not initialized")
        scale, shift = bn.scale_shift()
        if block.mode == "relu_last" and block.branch_relu and np.any(scale < 0):
            raise FusionError("negative batch norm scale cannot pass through ReLU")
        P = P * scale + shift / layer.n_pairs
        if linW is not None:
            linW *= scale[:, None]
            linB *= scale
    new = LmKanLayer(layer.n_in, layer.n_out, layer.grid, P, gamma=1.0, tile=layer.tile)
    return PrecondBlock(new, linW, linB, block.mode, block.branch_relu)


def fuse_linear_batchnorm(lin: Linear, bn: BatchNorm) -> Linear:
    """Standard BN folding for the MLP baseline."""
    if not bn.has_stats:
        raise FusionError("batch norm running statistics are not initialized")
    scale, shift = bn.scale_shift()
    return Linear(lin.W * scale[:, None], lin.b * scale + shift)


@dataclass
class FuseReport:
    fused_blocks: int = 0
    partial_blocks: int = 0
    warnings: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.partial_blocks == 0


def fuse_model(model: Model):
    """Return ``(fused_model, report)``.

    ``relu_first`` blocks (and branch-free ones) become pure lookup layers with
    their output batch norm absorbed.  ``relu_last`` blocks only absorb
    ``gamma`` and the batch norm; they are counted as partial in the report.
    Raises :class:`FusionError` on an odd grid with a ReLU branch.
    """
    mods = model.modules
    out = []
    report = FuseReport()
    i = 0
    while i < len(mods):
        m = mods[i]
        nxt = mods[i + 1] if i + 1 < len(mods) else None
        bn = nxt if isinstance(nxt, BatchNorm) else None
        if isinstance(m, PrecondBlock):
            if m.mode == "relu_last":
                out.append(absorb_gamma(m, bn))
                report.partial_blocks += 1
                report.warnings.append(
                    f"module {i}: relu_last branch kept; only gamma and batch norm absorbed"
                )
            else:
                layer = fuse_relu_first(m) if m.mode == "relu_first" else m.layer.copy()
                if bn is not None:
                    layer = fuse_output_batchnorm(layer, bn)
                elif layer.gamma != 1.0:
                    layer = LmKanLayer(layer.n_in, layer.n_out, layer.grid,
                                       layer.gamma * layer.P, 1.0, layer.tile)
                out.append(PrecondBlock(layer, mode="none"))
                if m.mode == "relu_first":
                    report.fused_blocks += 1
            i += 2 if bn is not None else 1
        elif isinstance(m, Linear) and bn is not None:
            out.append(fuse_linear_batchnorm(m, bn))
            i += 2
        else:
            out.append(m.copy())
            i += 1
    return Model(out), report


def linear_surrogate(layer: LmKanLayer):
    """Best plane fit of every sheet, as a dense map ``X @ Wt + c``.

    Exact when all sheets are linear, in which case the layer is literally a
    linear layer of the same shape.
    """
    pts = layer.grid.points
    n = len(pts)
    A = np.column_stack([np.repeat(pts, n), np.tile(pts, n), np.ones(n * n)])
    coef, *_ = np.linalg.lstsq(A, layer.P.reshape(n * n, -1), rcond=None)
    coef = layer.gamma * coef.reshape(3, layer.n_pairs, layer.n_out)
    Wt = np.empty((layer.n_in, layer.n_out))
    Wt[0::2] = coef[0]
    Wt[1::2] = coef[1]
    return Wt, coef[2].sum(axis=0)
