"""Trainable building blocks with hand-written backward passes.

Every module follows the same small protocol:

* ``forward(X, training=False)`` caches what ``backward`` needs,
* ``backward(dY)`` returns ``dX`` and fills ``self.grads``,
* ``params()`` maps names to the trainable arrays (updated in place).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .grid import SigmaGrid, build_grid

__all__ = [
    "LmKanLayer",
    "PrecondBlock",
    "BatchNorm",
    "Linear",
    "Activation",
    "init_layer",
    "PRECOND_MODES",
]

PRECOND_MODES = ("relu_first", "relu_last", "none")


def _as_batch(X, width, what="input"):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != width:
        raise ShapeError(f"{what} must have shape (batch, {width}), got {X.shape}")
    return X


class LmKanLayer:
    """2D lookup layer: ``y_q = gamma * sum_p f_qp(x_2p, x_2p+1)``.

    ``P[i1, i2, p, q]`` is the value of ``f_qp`` at node ``(i1, i2)``.  There
    is no output bias; constant offsets live in the coefficients.

    Storage is pair-major (``packed[p, i1, i2, q]``); ``P`` is a writable view
    of it in the ``[i1, i2, p, q]`` order, so in-place updates through either
    name are shared.  Assigning to ``P`` repacks.
    """

    def __init__(self, n_in, n_out, grid, P=None, gamma=0.0, tile=kernels.DEFAULT_TILE):
        if n_in <= 0 or n_in % 2:
            raise ConfigError(f"n_in must be a positive even integer, got {n_in}", field="n_in")
        if n_out <= 0:
            raise ConfigError(f"n_out must be positive, got {n_out}", field="n_out")
        if not isinstance(grid, SigmaGrid):
            grid = build_grid(grid)
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.grid = grid
        if P is None:
            P = np.zeros((grid.G + 1, grid.G + 1, self.n_pairs, self.n_out))
        self.P = P
        self.gamma = float(gamma)
        self.tile = tuple(tile)

    @property
    def P(self):
        return self.packed.transpose(1, 2, 0, 3)

    @P.setter
    def P(self, value):
        shape = (self.grid.G + 1, self.grid.G + 1, self.n_pairs, self.n_out)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != shape:
            raise ShapeError(f"P must have shape {shape}, got {value.shape}")
        self.packed = np.ascontiguousarray(value.transpose(2, 0, 1, 3))

    @property
    def G(self) -> int:
        return self.grid.G

    @property
    def n_pairs(self) -> int:
        return self.n_in // 2

    @property
    def n_functions(self) -> int:
        return self.n_pairs * self.n_out

    def preamble(self, X):
        X = _as_batch(X, self.n_in)
        return kernels.preamble_batch(X, self.grid.points, self.grid.inv_areas)

    def forward(self, X, pre=None):
        X = _as_batch(X, self.n_in)
        if pre is None:
            pre = self.preamble(X)
        I1, I2, W = pre
        return kernels.lookup_forward(I1, I2, W, self.packed, self.gamma, *self.tile)

    def backward(self, X, dY, pre=None):
        """Return ``(dP, dX)`` for upstream gradient ``dY``; ``dP`` has the layout of ``P``."""
        X = _as_batch(X, self.n_in)
        dY = _as_batch(dY, self.n_out, "output gradient")
        if dY.shape[0] != X.shape[0]:
            raise ShapeError("input and output gradient batch sizes differ")
        if pre is None:
            pre = self.preamble(X)
        I1, I2, W = pre
        dP = kernels.lookup_backward_params(I1, I2, W, dY, self.gamma, self.G)
        dX = kernels.lookup_backward_inputs(
            X, I1, I2, self.packed, dY, self.grid.points, self.grid.inv_areas, self.gamma
        )
        return dP.transpose(1, 2, 0, 3), dX

    def copy(self):
        return LmKanLayer(self.n_in, self.n_out, self.grid, self.P.copy(), self.gamma, self.tile)


def init_layer(n_in, n_out, G, seed=0, init_scale=None) -> LmKanLayer:
    """Layer with i.i.d. ``N(0, init_scale**2)`` coefficients and ``gamma = 0``.

    ``init_scale`` defaults to ``(n_in / 2) ** -0.5``.  ``seed`` may be an
    int or a ``numpy.random.Generator``.
    """
    if n_in % 2:
        raise ConfigError(f"n_in must be even to pair inputs, got {n_in}", field="n_in")
    layer = LmKanLayer(n_in, n_out, G)
    if init_scale is None:
        init_scale = (n_in / 2) ** -0.5
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layer.P[...] = init_scale * rng.standard_normal(layer.P.shape)
    return layer


def _fan_in_uniform(rng, n_out, n_in):
    bound = 1.0 / np.sqrt(n_in)
    W = rng.uniform(-bound, bound, size=(n_out, n_in))
    b = rng.uniform(-bound, bound, size=n_out)
    return W, b


class PrecondBlock:
    """lmKAN layer plus an optional linear preconditioning branch.

    ``relu_first``: ``gamma * lmKAN(x) + linW @ ReLU(x) + linB``
    ``relu_last``:  ``gamma * lmKAN(x) + ReLU(linW @ x + linB)``
    ``none``:       ``gamma * lmKAN(x)``

    ``branch_relu=False`` drops the ReLU from the branch; a model built with
    ``relu_first`` does this in its first block and ``relu_last`` in its last,
    so at ``gamma = 0`` the network is exactly a ReLU MLP.
    """

    kind = "lmkan"

    def __init__(self, layer: LmKanLayer, linW=None, linB=None, mode="relu_first", branch_relu=True):
        if mode not in PRECOND_MODES:
            raise ConfigError(f"unknown preconditioning mode {mode!r}", field="mode")
        self.layer = layer
        self.mode = mode
        self.branch_relu = bool(branch_relu)
        if mode == "none":
            self.linW = self.linB = None
        else:
            if linW is None:
                linW = np.zeros((layer.n_out, layer.n_in))
            if linB is None:
                linB = np.zeros(layer.n_out)
            self.linW = np.ascontiguousarray(linW, dtype=np.float64)
            self.linB = np.ascontiguousarray(linB, dtype=np.float64)
            if self.linW.shape != (layer.n_out, layer.n_in) or self.linB.shape != (layer.n_out,):
                raise ShapeError("linear branch shapes do not match the lmKAN layer")
        self.grads = {}
        self._cache = None

    @classmethod
    def create(cls, n_in, n_out, G, mode="relu_first", branch_relu=True, rng=None, init_scale=None):
        rng = rng if rng is not None else np.random.default_rng()
        layer = init_layer(n_in, n_out, G, rng, init_scale)
        if mode == "none":
            return cls(layer, mode=mode)
        W, b = _fan_in_uniform(rng, n_out, n_in)
        return cls(layer, W, b, mode=mode, branch_relu=branch_relu)

    @property
    def n_in(self):
        return self.layer.n_in

    @property
    def n_out(self):
        return self.layer.n_out

    @property
    def gamma(self):
        return self.layer.gamma

    @gamma.setter
    def gamma(self, value):
        self.layer.gamma = float(value)

    def params(self):
        if self.mode == "none":
            return {"P": self.layer.P}
        return {"P": self.layer.P, "linW": self.linW, "linB": self.linB}

    def forward(self, X, training=False):
        X = _as_batch(X, self.n_in)
        layer = self.layer
        pre = layer.preamble(X)
        if layer.gamma != 0.0:
            Y = layer.forward(X, pre)
        else:
            Y = np.zeros((X.shape[0], self.n_out))
        z = None
        if self.mode == "relu_first":
            xb = np.maximum(X, 0.0) if self.branch_relu else X
            Y += xb @ self.linW.T + self.linB
        elif self.mode == "relu_last":
            z = X @ self.linW.T + self.linB
            Y += np.maximum(z, 0.0) if self.branch_relu else z
        self._cache = (X, pre, z)
        return Y

    def backward(self, dY):
        X, pre, z = self._cache
        dY = _as_batch(dY, self.n_out, "output gradient")
        layer = self.layer
        if layer.gamma != 0.0:
            dP, dX = layer.backward(X, dY, pre)
        else:
            dP, dX = np.zeros_like(layer.P), np.zeros_like(X)
        self.grads = {"P": dP}
        if self.mode == "relu_first":
            xb = np.maximum(X, 0.0) if self.branch_relu else X
            self.grads["linW"] = dY.T @ xb
            self.grads["linB"] = dY.sum(axis=0)
            dxb = dY @ self.linW
            dX += dxb * (X > 0.0) if self.branch_relu else dxb
        elif self.mode == "relu_last":
            dz = dY * (z > 0.0) if self.branch_relu else dY
            self.grads["linW"] = dz.T @ X
            self.grads["linB"] = dz.sum(axis=0)
            dX += dz @ self.linW
        return dX

    def copy(self):
        return PrecondBlock(
            self.layer.copy(),
            None if self.linW is None else self.linW.copy(),
            None if self.linB is None else self.linB.copy(),
            self.mode,
            self.branch_relu,
        )


class BatchNorm:
    """1D batch normalization; ``affine=False`` gives the parameter-free variant.

    Training mode normalizes with the biased batch variance and folds the
    unbiased one into the running estimate, like ``torch.nn.BatchNorm1d``.
    Running statistics are ``None`` until the first training batch (or until
    they are assigned explicitly).
    """

    kind = "batchnorm"

    def __init__(self, dim, affine=False, momentum=0.1, eps=1e-5, running_mean=None, running_var=None):
        self.dim = int(dim)
        self.affine = bool(affine)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.running_mean = None if running_mean is None else np.array(running_mean, dtype=np.float64)
        self.running_var = None if running_var is None else np.array(running_var, dtype=np.float64)
        if self.affine:
            self.weight = np.ones(self.dim)
            self.bias = np.zeros(self.dim)
        else:
            self.weight = self.bias = None
        self.grads = {}
        self._cache = None

    @property
    def n_in(self):
        return self.dim

    @property
    def n_out(self):
        return self.dim

    @property
    def has_stats(self) -> bool:
        return self.running_mean is not None and self.running_var is not None

    def params(self):
        return {"weight": self.weight, "bias": self.bias} if self.affine else {}

    def forward(self, X, training=False):
        X = _as_batch(X, self.dim)
        if training:
            n = X.shape[0]
            if n < 2:
                raise ShapeError("batch norm needs at least 2 rows in training mode")
            mean = X.mean(axis=0)
            var = X.var(axis=0)
            m = self.momentum
            unbiased = var * (n / (n - 1))
            if self.has_stats:
                self.running_mean = (1.0 - m) * self.running_mean + m * mean
                self.running_var = (1.0 - m) * self.running_var + m * unbiased
            else:
                # first batch: start from the torch defaults (0, 1)
                self.running_mean = m * mean
                self.running_var = (1.0 - m) + m * unbiased
        else:
            if not self.has_stats:
                raise ValueError("batch norm running statistics are not initialized")
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (X - mean) * inv_std
        self._cache = (xhat, inv_std, training)
        if self.affine:
            return xhat * self.weight + self.bias
        return xhat

    def backward(self, dY):
        xhat, inv_std, training = self._cache
        dY = _as_batch(dY, self.dim, "output gradient")
        if self.affine:
            self.grads = {"weight": (dY * xhat).sum(axis=0), "bias": dY.sum(axis=0)}
            dxhat = dY * self.weight
        else:
            self.grads = {}
            dxhat = dY
        if not training:
            return dxhat * inv_std
        n = dY.shape[0]
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )

    def scale_shift(self):
        """Inference-mode map as ``y = x * scale + shift``."""
        if not self.has_stats:
            raise ValueError("batch norm running statistics are not initialized")
        s = 1.0 / np.sqrt(self.running_var + self.eps)
        shift = -self.running_mean * s
        if self.affine:
            return s * self.weight, shift * self.weight + self.bias
        return s, shift

    def copy(self):
        bn = BatchNorm(self.dim, self.affine, self.momentum, self.eps, self.running_mean, self.running_var)
        if self.affine:
            bn.weight = self.weight.copy()
            bn.bias = self.bias.copy()
        return bn


class Linear:
    kind = "linear"

    def __init__(self, W, b):
        self.W = np.ascontiguousarray(W, dtype=np.float64)
        self.b = np.ascontiguousarray(b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError("Linear expects W of shape (n_out, n_in) and b of shape (n_out,)")
        self.grads = {}
        self._x = None

    @classmethod
    def create(cls, n_in, n_out, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        return cls(*_fan_in_uniform(rng, n_out, n_in))

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    def params(self):
        return {"W": self.W, "b": self.b}

    def forward(self, X, training=False):
        X = _as_batch(X, self.n_in)
        self._x = X
        return X @ self.W.T + self.b

    def backward(self, dY):
        self.grads = {"W": dY.T @ self._x, "b": dY.sum(axis=0)}
        return dY @ self.W

    def copy(self):
        return Linear(self.W.copy(), self.b.copy())


class Activation:
    kind = "activation"
    FUNCTIONS = ("relu", "tanh", "identity")

    def __init__(self, name):
        if name not in self.FUNCTIONS:
            raise ConfigError(f"unknown activation {name!r}", field="activation")
        self.name = name
        self.grads = {}
        self._cache = None

    n_in = n_out = None

    def params(self):
        return {}

    def forward(self, X, training=False):
        if self.name == "relu":
            self._cache = X > 0.0
            return np.where(self._cache, X, 0.0)
        if self.name == "tanh":
            Y = np.tanh(X)
            self._cache = Y
            return Y
        return np.array(X, dtype=np.float64)

    def backward(self, dY):
        if self.name == "relu":
            return dY * self._cache
        if self.name == "tanh":
            return dY * (1.0 - self._cache * self._cache)
        return dY

    def copy(self):
        return Activation(self.name)
