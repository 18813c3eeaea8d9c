import numpy as np
import pytest

from conftest import heavy_tailed
from lmkan.errors import FusionError
from lmkan.fusion import (
    absorb_gamma,
    fuse_linear_batchnorm,
    fuse_model,
    fuse_output_batchnorm,
    fuse_relu_first,
    linear_surrogate,
)
from lmkan.grid import build_grid
from lmkan.layers import BatchNorm, Linear, LmKanLayer, PrecondBlock, init_layer
from lmkan.model import Model, build_lmkan_student, build_mlp_student


def tail_rows(rng, n, width, n_tail=100):
    """Normal rows; the first ``n_tail`` have one coordinate at +-1e3."""
    X = rng.standard_normal((n, width))
    cols = rng.integers(0, width, n_tail)
    X[np.arange(n_tail), cols] = rng.choice([-1e3, 1e3], n_tail)
    return X


def joint_tail_rows(rng, n, width):
    """Every coordinate far out, so bilinear cell weights reach ~1e6."""
    return heavy_tailed(rng, n * width).reshape(n, width) + rng.choice([-1e3, 1e3], (n, width))


def test_zero_branch_scales_by_gamma(rng):
    b = PrecondBlock.create(4, 3, 6, "relu_first", True, rng)
    b.linW[:] = 0
    b.linB[:] = 0
    b.gamma = 0.3
    fused = fuse_relu_first(b)
    np.testing.assert_array_equal(fused.P, 0.3 * b.layer.P)
    assert fused.gamma == 1.0


@pytest.mark.parametrize("G", [4, 6, 12])
def test_relu_is_exactly_representable(G):
    layer = LmKanLayer(2, 1, G, np.zeros((G + 1, G + 1, 1, 1)))
    b = PrecondBlock(layer, np.array([[1.0, 0.0]]), np.zeros(1), "relu_first", True)
    fused = fuse_relu_first(b)
    x = np.concatenate([np.linspace(-1e3, 1e3, 4001), [-1e6, -5.0, 0.0, 1e-9, 5.0, 1e6]])
    X = np.column_stack([x, np.random.default_rng(0).standard_normal(x.size) * 50])
    y = fused.forward(X)[:, 0]
    np.testing.assert_allclose(y, np.maximum(x, 0.0), rtol=1e-12, atol=1e-12)


def test_odd_grid_with_relu_branch_rejected(rng):
    b = PrecondBlock.create(4, 2, 5, "relu_first", True, rng)
    with pytest.raises(FusionError):
        fuse_relu_first(b)
    # a purely linear branch is representable on any grid
    lin = PrecondBlock.create(4, 2, 5, "relu_first", False, rng)
    lin.gamma = 0.3
    X = rng.standard_normal((200, 4)) * 10
    np.testing.assert_allclose(fuse_relu_first(lin).forward(X), lin.forward(X), rtol=1e-12, atol=1e-10)


def test_relu_last_is_not_fusable(rng):
    with pytest.raises(FusionError):
        fuse_relu_first(PrecondBlock.create(4, 2, 4, "relu_last", True, rng))


def test_random_block_fusion_with_tails(rng):
    b = PrecondBlock.create(6, 4, 4, "relu_first", True, rng)
    b.gamma = 0.3
    X = tail_rows(rng, 10_100, 6)
    assert np.max(np.abs(fuse_relu_first(b).forward(X) - b.forward(X))) <= 1e-10


def test_joint_tail_fusion_is_rounding_limited(rng):
    # outputs reach ~1e7 here, where one ulp alone exceeds 1e-9; the two
    # routes still agree to a few ulps of the output magnitude
    b = PrecondBlock.create(6, 4, 4, "relu_first", True, rng)
    b.gamma = 0.3
    X = joint_tail_rows(rng, 2000, 6)
    ref = b.forward(X)
    err = np.abs(fuse_relu_first(b).forward(X) - ref)
    assert np.all(err <= 1e-13 * np.maximum(1.0, np.max(np.abs(ref), axis=1, keepdims=True)))


def _bn(dim, rng, eps=1e-5):
    return BatchNorm(dim, eps=eps, running_mean=rng.standard_normal(dim), running_var=rng.uniform(0.2, 3, dim))


def test_output_batchnorm_identity_and_scaling(rng):
    layer = init_layer(4, 3, 6, seed=rng)
    layer.gamma = 1.0
    ident = BatchNorm(3, eps=0.0, running_mean=np.zeros(3), running_var=np.ones(3))
    np.testing.assert_array_equal(fuse_output_batchnorm(layer, ident).P, layer.P)
    three = BatchNorm(3, eps=0.0, running_mean=np.zeros(3), running_var=np.full(3, 3.0))
    X = rng.standard_normal((50, 4))
    np.testing.assert_allclose(fuse_output_batchnorm(layer, three).forward(X),
                               layer.forward(X) / np.sqrt(3.0), rtol=1e-13, atol=1e-15)


def test_block_with_batchnorm_fusion_with_tails(rng):
    b = PrecondBlock.create(8, 6, 6, "relu_first", True, rng)
    b.gamma = 0.3
    bn = _bn(6, rng)
    fused = fuse_output_batchnorm(fuse_relu_first(b), bn)
    X = tail_rows(rng, 10_100, 8)
    assert np.max(np.abs(fused.forward(X) - bn.forward(b.forward(X)))) <= 1e-10


def test_output_batchnorm_random(rng):
    layer = init_layer(6, 5, 8, seed=rng)
    layer.gamma = 0.4
    bn = _bn(5, rng)
    X = rng.standard_normal((500, 6)) * 3
    ref = bn.forward(layer.forward(X))
    np.testing.assert_allclose(fuse_output_batchnorm(layer, bn).forward(X), ref, rtol=1e-12, atol=1e-12)
    with pytest.raises(FusionError):
        fuse_output_batchnorm(layer, BatchNorm(5))


def test_linear_batchnorm_folding(rng):
    lin = Linear.create(4, 3, rng)
    bn = BatchNorm(3, affine=True, running_mean=rng.standard_normal(3), running_var=rng.uniform(0.5, 2, 3))
    bn.weight, bn.bias = rng.standard_normal(3), rng.standard_normal(3)
    X = rng.standard_normal((40, 4))
    np.testing.assert_allclose(fuse_linear_batchnorm(lin, bn).forward(X), bn.forward(lin.forward(X)),
                               rtol=1e-12, atol=1e-12)


def _trained_stats(model, rng, steps=3):
    for _ in range(steps):
        model.forward(rng.standard_normal((128, model.in_dim)), training=True)


def test_full_model_fusion(rng):
    model = build_lmkan_student(8, 12, 2, 6, precond="relu_first", rng=rng)
    model.set_gamma(0.3)
    _trained_stats(model, rng)
    fused, report = fuse_model(model)
    assert report.complete and report.fused_blocks == 3
    assert all(isinstance(m, PrecondBlock) and m.mode == "none" for m in fused.modules)
    X = tail_rows(rng, 10_100, 8)
    err = np.abs(fused.forward(X) - model.forward(X))
    assert np.max(err[100:]) <= 1e-10
    # a 1e3 input drives later layers deep into their tails (outputs ~1e10)
    ref = np.abs(model.forward(X[:100]))
    assert np.all(err[:100] <= 1e-13 * np.maximum(1.0, ref.max(axis=1, keepdims=True)))
    again, rep2 = fuse_model(fused)
    assert rep2.fused_blocks == 0 and rep2.complete
    for a, b in zip(again.modules, fused.modules):
        np.testing.assert_array_equal(a.layer.P, b.layer.P)


def test_relu_last_partial_fusion(rng):
    model = build_lmkan_student(4, 6, 2, 4, precond="relu_last", rng=rng)
    model.set_gamma(0.3)
    _trained_stats(model, rng)
    fused, report = fuse_model(model)
    assert not report.complete and report.partial_blocks == 3 and report.warnings
    X = rng.standard_normal((300, 4)) * 3
    np.testing.assert_allclose(fused.forward(X), model.forward(X), rtol=1e-11, atol=1e-11)
    assert all(b.gamma == 1.0 for b in fused.lmkan_blocks())


def test_absorb_gamma_without_bn(rng):
    b = PrecondBlock.create(4, 2, 4, "relu_last", True, rng)
    b.gamma = 0.25
    X = rng.standard_normal((30, 4))
    np.testing.assert_allclose(absorb_gamma(b).forward(X), b.forward(X), rtol=1e-13, atol=1e-14)


def test_mlp_fusion(rng):
    model = build_mlp_student(8, 10, 1, rng=rng)
    _trained_stats(model, rng)
    fused, report = fuse_model(model)
    assert report.complete
    assert not any(isinstance(m, BatchNorm) for m in fused.modules)
    X = rng.standard_normal((200, 8))
    np.testing.assert_allclose(fused.forward(X), model.forward(X), rtol=1e-11, atol=1e-12)


def test_linear_surrogate_exact_on_linear_sheets(rng):
    g = build_grid(7)
    A, B, C = (rng.standard_normal((2, 3)) for _ in range(3))
    P = (A[None, None] * g.points[:, None, None, None]
         + B[None, None] * g.points[None, :, None, None] + C[None, None])
    layer = LmKanLayer(4, 3, g, P, gamma=0.5)
    Wt, c = linear_surrogate(layer)
    X = rng.standard_normal((100, 4)) * 5
    np.testing.assert_allclose(X @ Wt + c, layer.forward(X), rtol=1e-11, atol=1e-11)
