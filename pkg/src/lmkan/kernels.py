"""Compiled CPU kernels for batched lmKAN layers.

Forward work is split in two: a preamble pass that computes, once per row
and input pair, the cell indices and four bilinear weights, and a lookup
pass that spends four multiply-adds per (pair, output).  The lookup pass
walks (pair, output) tiles over large row blocks; coefficients are stored
pair-major (``[p, i1, i2, q]``) so one pair's sheets are contiguous and stay
cache resident while every row of the block is looked up.

Every reduction runs in a fixed order.  Rows are independent in the forward
and input-gradient kernels; the parameter-gradient kernel is split over
input pairs, each of which owns a disjoint slice of ``dP``.  Results are
therefore bitwise reproducible for any thread count or tile size.
"""

from __future__ import annotations

import math
import os

import numba
import numpy as np
from numba import njit, prange

__all__ = [
    "preamble_batch",
    "lookup_forward",
    "lookup_backward_params",
    "lookup_backward_inputs",
    "dense_matmul_tiled",
    "hessian_penalty_grad_sheets",
    "adam_update",
    "set_threads",
    "DEFAULT_TILE",
]

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is often too old; skip straight to the portable layers
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

DEFAULT_TILE = (16, 64)
_ROW_BLOCK = 1024


def set_threads(n=None) -> int:
    """Pin the kernel thread count; ``LMKAN_THREADS`` is used when ``n`` is None."""
    if n is None:
        env = os.environ.get("LMKAN_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@njit(cache=True, inline="always")
def _cell(x, G, pts):
    t = math.exp(-abs(x))
    s = 1.0 - 0.5 * t if x > 0.0 else 0.5 * t
    f = math.floor(s * G)
    if not f >= 0.0:  # also catches NaN
        return 0
    if f > G - 1:
        return G - 1
    return int(f)


@njit(parallel=True, cache=True)
def preamble_batch(X, pts, inv_areas):
    """Cell indices ``(B, n_pairs)`` and weights ``(B, n_pairs, 4)`` ordered w00, w10, w01, w11."""
    B, n_in = X.shape
    n_pairs = n_in // 2
    G = pts.shape[0] - 1
    I1 = np.empty((B, n_pairs), np.int64)
    I2 = np.empty((B, n_pairs), np.int64)
    W = np.empty((B, n_pairs, 4), np.float64)
    for r in prange(B):
        for p in range(n_pairs):
            x1 = X[r, 2 * p]
            x2 = X[r, 2 * p + 1]
            i1 = _cell(x1, G, pts)
            i2 = _cell(x2, G, pts)
            a = inv_areas[i1, i2]
            u1 = pts[i1 + 1] - x1
            l1 = x1 - pts[i1]
            u2 = pts[i2 + 1] - x2
            l2 = x2 - pts[i2]
            I1[r, p] = i1
            I2[r, p] = i2
            W[r, p, 0] = u1 * u2 * a
            W[r, p, 1] = l1 * u2 * a
            W[r, p, 2] = u1 * l2 * a
            W[r, p, 3] = l1 * l2 * a
    return I1, I2, W


@njit(parallel=True, cache=True)
def lookup_forward(I1, I2, W, Pp, gamma, tile_pairs, tile_out):
    """``Y[r, q] = gamma * sum_p f_qp(x_r)`` using the cached preamble.

    ``Pp`` is the pair-major coefficient tensor ``[p, i1, i2, q]``.  Within a
    row block each pair's sheets are swept over all rows before moving on,
    so the working set is one pair's ``(G+1)**2 * tile_out`` slice.
    Accumulation order over pairs is ascending regardless of tiling.
    """
    B, n_pairs = I1.shape
    n_out = Pp.shape[3]
    Y = np.zeros((B, n_out), np.float64)
    n_blocks = (B + _ROW_BLOCK - 1) // _ROW_BLOCK
    for blk in prange(n_blocks):
        r0 = blk * _ROW_BLOCK
        r1 = min(r0 + _ROW_BLOCK, B)
        for q0 in range(0, n_out, tile_out):
            q1 = min(q0 + tile_out, n_out)
            for p0 in range(0, n_pairs, tile_pairs):
                p1 = min(p0 + tile_pairs, n_pairs)
                for p in range(p0, p1):
                    for r in range(r0, r1):
                        i1 = I1[r, p]
                        i2 = I2[r, p]
                        w00 = W[r, p, 0]
                        w10 = W[r, p, 1]
                        w01 = W[r, p, 2]
                        w11 = W[r, p, 3]
                        for q in range(q0, q1):
                            Y[r, q] += (
                                w00 * Pp[p, i1, i2, q]
                                + w10 * Pp[p, i1 + 1, i2, q]
                                + w01 * Pp[p, i1, i2 + 1, q]
                                + w11 * Pp[p, i1 + 1, i2 + 1, q]
                            )
    if gamma != 1.0:
        for r in prange(B):
            for q in range(n_out):
                Y[r, q] *= gamma
    return Y


@njit(parallel=True, cache=True)
def lookup_backward_params(I1, I2, W, dY, gamma, G):
    """Adjoint w.r.t. ``Pp`` (pair-major); each pair accumulates rows in ascending order."""
    B, n_pairs = I1.shape
    n_out = dY.shape[1]
    dP = np.zeros((n_pairs, G + 1, G + 1, n_out), np.float64)
    for p in prange(n_pairs):
        for r in range(B):
            i1 = I1[r, p]
            i2 = I2[r, p]
            w00 = gamma * W[r, p, 0]
            w10 = gamma * W[r, p, 1]
            w01 = gamma * W[r, p, 2]
            w11 = gamma * W[r, p, 3]
            for q in range(n_out):
                g = dY[r, q]
                dP[p, i1, i2, q] += w00 * g
                dP[p, i1 + 1, i2, q] += w10 * g
                dP[p, i1, i2 + 1, q] += w01 * g
                dP[p, i1 + 1, i2 + 1, q] += w11 * g
    return dP


@njit(parallel=True, cache=True)
def lookup_backward_inputs(X, I1, I2, Pp, dY, pts, inv_areas, gamma):
    """Adjoint w.r.t. the inputs, differentiating the bilinear form of the active cell."""
    B, n_in = X.shape
    n_pairs = n_in // 2
    n_out = Pp.shape[3]
    dX = np.zeros((B, n_in), np.float64)
    for r in prange(B):
        for p in range(n_pairs):
            i1 = I1[r, p]
            i2 = I2[r, p]
            g00 = 0.0
            g10 = 0.0
            g01 = 0.0
            g11 = 0.0
            for q in range(n_out):
                g = dY[r, q]
                g00 += Pp[p, i1, i2, q] * g
                g10 += Pp[p, i1 + 1, i2, q] * g
                g01 += Pp[p, i1, i2 + 1, q] * g
                g11 += Pp[p, i1 + 1, i2 + 1, q] * g
            x1 = X[r, 2 * p]
            x2 = X[r, 2 * p + 1]
            a = gamma * inv_areas[i1, i2]
            u1 = pts[i1 + 1] - x1
            l1 = x1 - pts[i1]
            u2 = pts[i2 + 1] - x2
            l2 = x2 - pts[i2]
            dX[r, 2 * p] = ((g10 - g00) * u2 + (g11 - g01) * l2) * a
            dX[r, 2 * p + 1] = ((g01 - g00) * u1 + (g11 - g10) * l1) * a
    return dX


@njit(parallel=True, cache=True)
def dense_matmul_tiled(X, Wt, tile_k, tile_out):
    """``X @ Wt`` with the same row-block/tile traversal as :func:`lookup_forward`.

    Serves as the same-shape dense baseline in throughput comparisons.
    """
    B, n_in = X.shape
    n_out = Wt.shape[1]
    Y = np.zeros((B, n_out), np.float64)
    n_blocks = (B + _ROW_BLOCK - 1) // _ROW_BLOCK
    for blk in prange(n_blocks):
        r0 = blk * _ROW_BLOCK
        r1 = min(r0 + _ROW_BLOCK, B)
        for q0 in range(0, n_out, tile_out):
            q1 = min(q0 + tile_out, n_out)
            for k0 in range(0, n_in, tile_k):
                k1 = min(k0 + tile_k, n_in)
                for r in range(r0, r1):
                    for k in range(k0, k1):
                        xv = X[r, k]
                        for q in range(q0, q1):
                            Y[r, q] += xv * Wt[k, q]
    return Y


@njit(cache=True)
def hessian_penalty_grad_sheets(P, pts):
    """Summed mean Hessian energy of every sheet in ``P[A, G+1, G+1, C]`` and its gradient.

    Sheets are indexed by ``(a, c)``; a layer's pair-major tensor passes
    directly, a canonical ``[G+1, G+1, F]`` stack as ``P[None]``.  Single-pass
    version of :func:`lmkan.hessian.sheets_penalty_and_grad`.
    """
    A = P.shape[0]
    n = P.shape[1]
    C = P.shape[3]
    G = n - 1
    inv_nodes = 1.0 / ((G - 1) * (G - 1))
    plus = np.empty(G - 1)
    mid = np.empty(G - 1)
    minus = np.empty(G - 1)
    span = np.empty(G - 1)
    for i in range(1, G):
        hl = pts[i] - pts[i - 1]
        hr = pts[i + 1] - pts[i]
        den = hl * hr * (hl + hr)
        plus[i - 1] = 2.0 * hl / den
        mid[i - 1] = -2.0 * (hl + hr) / den
        minus[i - 1] = 2.0 * hr / den
        span[i - 1] = hl + hr
    g = np.zeros_like(P)
    total = 0.0
    for a in range(A):
        for i in range(1, G):
            a_p = plus[i - 1]
            a_m = mid[i - 1]
            a_n = minus[i - 1]
            for j in range(1, G):
                b_p = plus[j - 1]
                b_m = mid[j - 1]
                b_n = minus[j - 1]
                inv_span = 1.0 / (span[i - 1] * span[j - 1])
                for f in range(C):
                    c = P[a, i, j, f]
                    d11 = a_p * P[a, i + 1, j, f] + a_m * c + a_n * P[a, i - 1, j, f]
                    d22 = b_p * P[a, i, j + 1, f] + b_m * c + b_n * P[a, i, j - 1, f]
                    d12 = (P[a, i + 1, j + 1, f] - P[a, i + 1, j - 1, f]
                           - P[a, i - 1, j + 1, f] + P[a, i - 1, j - 1, f]) * inv_span
                    total += d11 * d11 + 2.0 * d12 * d12 + d22 * d22
                    e11 = 2.0 * inv_nodes * d11
                    e22 = 2.0 * inv_nodes * d22
                    e12 = 4.0 * inv_nodes * d12 * inv_span
                    g[a, i + 1, j, f] += a_p * e11
                    g[a, i, j, f] += a_m * e11 + b_m * e22
                    g[a, i - 1, j, f] += a_n * e11
                    g[a, i, j + 1, f] += b_p * e22
                    g[a, i, j - 1, f] += b_n * e22
                    g[a, i + 1, j + 1, f] += e12
                    g[a, i + 1, j - 1, f] -= e12
                    g[a, i - 1, j + 1, f] -= e12
                    g[a, i - 1, j - 1, f] += e12
    return total * inv_nodes, g


@njit(cache=True)
def adam_update(p, g, m, v, beta1, beta2, step_size, eps, inv_bc2):
    """In-place Adam update on flat contiguous views."""
    for k in range(p.shape[0]):
        gk = g[k]
        mk = beta1 * m[k] + (1.0 - beta1) * gk
        vk = beta2 * v[k] + (1.0 - beta2) * (gk * gk)
        m[k] = mk
        v[k] = vk
        p[k] -= step_size * mk / (math.sqrt(vk * inv_bc2) + eps)
