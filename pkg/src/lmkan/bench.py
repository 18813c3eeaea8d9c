"""Inference throughput harness.

Each batch size gets ``warmup`` discarded runs followed by ``timed`` runs;
the median run time is reported.  The same rows are pushed through a dense
model of identical layer shapes (our own tiled kernel, same thread count)
to give a slowdown ratio.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .cost import model_flops
from .fusion import linear_surrogate
from .layers import Linear, PrecondBlock
from .model import Model

__all__ = ["BenchReport", "run_bench", "dense_reference", "dense_forward", "time_runs"]


@dataclass
class BenchReport:
    batch_size: int
    warmup: int
    timed: int
    run_seconds: list = field(repr=False)
    median_seconds: float
    throughput: float
    flops: int
    params: int
    dense_median_seconds: float
    dense_throughput: float
    slowdown: float

    def as_dict(self):
        return asdict(self)


def dense_reference(model: Model):
    """``(Wt, bias)`` pairs of a dense chain with the model's layer shapes.

    lmKAN blocks contribute the plane fit of their sheets, so a model of
    linear-sheet lmKAN layers and its dense reference agree exactly.
    """
    mats = []
    for m in model.modules:
        if isinstance(m, PrecondBlock):
            mats.append(linear_surrogate(m.layer))
        elif isinstance(m, Linear):
            mats.append((np.ascontiguousarray(m.W.T), m.b))
    return mats


def dense_forward(mats, X, tile=kernels.DEFAULT_TILE):
    X = np.ascontiguousarray(X, dtype=np.float64)
    for Wt, b in mats:
        X = kernels.dense_matmul_tiled(X, Wt, *tile)
        X += b
    return X


def time_runs(fn, warmup, timed):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(timed):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def run_bench(model: Model, batch_sizes, warmup=10, timed=20, seed=0, threads=None):
    kernels.set_threads(threads)
    mats = dense_reference(model)
    tile = kernels.DEFAULT_TILE
    rng = np.random.default_rng(seed)
    flops = model_flops(model)
    params = model.n_params()
    reports = []
    for bs in batch_sizes:
        if bs <= 0:
            raise ValueError(f"batch size must be positive, got {bs}")
        X = rng.standard_normal((bs, model.in_dim))
        runs = time_runs(lambda: model.forward(X), warmup, timed)
        dense = time_runs(lambda: dense_forward(mats, X, tile), warmup, timed)
        med = float(np.median(runs))
        dmed = float(np.median(dense))
        reports.append(BenchReport(
            batch_size=bs, warmup=warmup, timed=timed, run_seconds=runs,
            median_seconds=med, throughput=bs / med, flops=flops, params=params,
            dense_median_seconds=dmed, dense_throughput=bs / dmed, slowdown=med / dmed,
        ))
    return reports
