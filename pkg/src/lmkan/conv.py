"""Lowering of strided 2D convolutions to row-wise (fully connected) layers.

Patch columns are ordered ``(dy, dx, channel)`` with the channel index
fastest, so column ``(dy * k + dx) * C + c`` holds ``image[y0 + dy, x0 + dx, c]``.
Rows enumerate output positions row-major.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = ["unfold_conv", "fold_conv", "conv2d"]


def unfold_conv(image, k: int, s: int):
    """Return ``(patches, (H_out, W_out))`` for an ``(H, W, C)`` or ``(N, H, W, C)`` image.

    Batched input yields ``N * H_out * W_out`` rows, image-major.
    """
    image = np.asarray(image)
    batched = image.ndim == 4
    if not batched:
        if image.ndim != 3:
            raise ShapeError(f"expected an (H, W, C) image, got shape {image.shape}")
        image = image[None]
    _, H, W, C = image.shape
    if k < 1 or s < 1 or k > H or k > W:
        raise ShapeError(f"kernel {k} / stride {s} invalid for a {H}x{W} image")
    if (H - k) % s or (W - k) % s:
        raise ShapeError(f"(H-k) and (W-k) must be divisible by the stride: H={H}, W={W}, k={k}, s={s}")
    ho, wo = (H - k) // s + 1, (W - k) // s + 1
    win = sliding_window_view(image, (k, k), axis=(1, 2))[:, ::s, ::s]
    # win: (N, ho, wo, C, k, k) -> (N, ho, wo, k, k, C)
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * C)
    return patches, (ho, wo)


def fold_conv(rows, out_hw, n_images=None):
    """Reshape per-position outputs back into ``(H_out, W_out, C_out)`` (or batched) maps."""
    ho, wo = out_hw
    rows = np.asarray(rows)
    if n_images is None:
        return rows.reshape(ho, wo, -1)
    return rows.reshape(n_images, ho, wo, -1)


def conv2d(fn, image, k: int, s: int):
    """Apply a row-wise map ``fn`` (any layer's forward) as a ``k x k`` stride-``s`` convolution."""
    image = np.asarray(image)
    patches, hw = unfold_conv(image, k, s)
    out = fn(patches)
    return fold_conv(out, hw, image.shape[0] if image.ndim == 4 else None)
