"""Sequential container and the student/teacher architectures."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import Activation, BatchNorm, Linear, PrecondBlock

__all__ = ["Model", "build_lmkan_student", "build_mlp_student", "build_mlp"]


class Model:
    """Ordered list of modules applied one after another."""

    def __init__(self, modules):
        self.modules = list(modules)
        width = None
        for i, m in enumerate(self.modules):
            if m.n_in is None:
                continue
            if width is not None and m.n_in != width:
                raise ShapeError(f"module {i} expects width {m.n_in}, previous output is {width}")
            width = m.n_out

    @property
    def in_dim(self):
        return next(m.n_in for m in self.modules if m.n_in is not None)

    @property
    def out_dim(self):
        return next(m.n_out for m in reversed(self.modules) if m.n_out is not None)

    def forward(self, X, training=False):
        for m in self.modules:
            X = m.forward(X, training)
        return X

    __call__ = forward

    def backward(self, dY):
        for m in reversed(self.modules):
            dY = m.backward(dY)
        return dY

    def named_params(self):
        """Yield ``(key, module, name, array)`` for every trainable array."""
        for i, m in enumerate(self.modules):
            for name, arr in m.params().items():
                yield f"{i}.{name}", m, name, arr

    def lmkan_blocks(self):
        return [m for m in self.modules if isinstance(m, PrecondBlock)]

    def set_gamma(self, gamma):
        for b in self.lmkan_blocks():
            b.gamma = gamma

    def n_params(self) -> int:
        return int(sum(arr.size for *_, arr in self.named_params()))

    def copy(self):
        return Model([m.copy() for m in self.modules])


def _dims(in_dim, hidden_dim, out_dim, n_hidden):
    return [in_dim] + [hidden_dim] * n_hidden + [out_dim]


def build_lmkan_student(
    in_dim, hidden_dim, out_dim, G, n_hidden=2, precond="relu_first",
    rng=None, init_scale=None, bn_momentum=0.1, input_bn=False,
) -> Model:
    """lmKAN -> BN(affine=False) repeated, ending in a bare lmKAN layer.

    With ``relu_first`` the first block's branch is purely linear; with
    ``relu_last`` the last one is.  ``input_bn`` prepends an affine-free batch
    norm that standardizes the raw inputs.
    """
    dims = _dims(in_dim, hidden_dim, out_dim, n_hidden)
    for name, d in zip(("in_dim", "hidden_dim"), dims[:2]):
        if d % 2:
            raise ConfigError(f"lmKAN layers pair their inputs, so {name} must be even (got {d})", field=name)
    rng = rng if rng is not None else np.random.default_rng()
    mods = []
    if input_bn:
        mods.append(BatchNorm(in_dim, affine=False, momentum=bn_momentum))
    n_layers = len(dims) - 1
    for k in range(n_layers):
        if precond == "relu_first":
            relu = k > 0
        elif precond == "relu_last":
            relu = k < n_layers - 1
        else:
            relu = True
        mods.append(
            PrecondBlock.create(dims[k], dims[k + 1], G, precond, relu, rng, init_scale)
        )
        if k < n_layers - 1:
            mods.append(BatchNorm(dims[k + 1], affine=False, momentum=bn_momentum))
    return Model(mods)


def build_mlp_student(in_dim, hidden_dim, out_dim, n_hidden=2, rng=None, bn_momentum=0.1) -> Model:
    """Linear -> BN(affine) -> ReLU repeated, ending in a bare Linear."""
    dims = _dims(in_dim, hidden_dim, out_dim, n_hidden)
    rng = rng if rng is not None else np.random.default_rng()
    mods = []
    for k in range(len(dims) - 1):
        mods.append(Linear.create(dims[k], dims[k + 1], rng))
        if k < len(dims) - 2:
            mods += [BatchNorm(dims[k + 1], affine=True, momentum=bn_momentum), Activation("relu")]
    return Model(mods)


def build_mlp(in_dim, hidden_dim, out_dim, depth, activation="tanh", rng=None, weight_scale=1.0) -> Model:
    """Plain MLP with ``depth`` hidden layers; weight matrices (not biases) scaled."""
    dims = _dims(in_dim, hidden_dim, out_dim, depth)
    rng = rng if rng is not None else np.random.default_rng()
    mods = []
    for k in range(len(dims) - 1):
        lin = Linear.create(dims[k], dims[k + 1], rng)
        lin.W *= weight_scale
        mods.append(lin)
        if k < len(dims) - 2:
            mods.append(Activation(activation))
    return Model(mods)
