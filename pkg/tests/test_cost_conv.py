import numpy as np
import pytest

from lmkan.conv import conv2d, fold_conv, unfold_conv
from lmkan.cost import (
    deployed_flops,
    flops_main_term,
    linear_flops,
    matched_mlp_width,
    model_flops,
    param_count,
    param_ratio_vs_linear,
)
from lmkan.errors import ConfigError, ShapeError
from lmkan.layers import Linear, init_layer
from lmkan.model import build_lmkan_student, build_mlp_student


def test_main_term_examples():
    assert flops_main_term(256, 256, 2, 2) == 131072
    assert flops_main_term(256, 256) == 2 * linear_flops(256, 256)
    assert flops_main_term(12, 10, 4, 2) == 480
    for n, m in [(4, 6), (32, 32), (10, 3)]:
        assert flops_main_term(n, m, 1, 2) == 2 * n * m == flops_main_term(n, m, 2, 2)


@pytest.mark.parametrize("d,k", [(1, 2), (2, 2), (4, 2), (2, 3), (3, 3)])
def test_main_term_general_formula(d, k):
    n_in, n_out = 12, 7
    assert flops_main_term(n_in, n_out, d, k) * d == k ** d * n_in * n_out


def test_main_term_validation():
    with pytest.raises(ConfigError):
        flops_main_term(5, 3, 2, 2)
    with pytest.raises(ConfigError):
        flops_main_term(4, 3, 0, 2)


def test_param_counts():
    assert param_ratio_vs_linear(20) == 220.5
    assert param_ratio_vs_linear(40) == 840.5
    layer = init_layer(4, 3, 4)
    assert param_count(layer) == 150
    assert param_count(layer) / (4 * 3) == param_ratio_vs_linear(4)


def test_model_and_deployed_flops():
    m = build_lmkan_student(8, 32, 1, 12, rng=np.random.default_rng(0))
    main = 2 * (8 * 32 + 32 * 32 + 32 * 1)
    assert deployed_flops(m) == main == 2624
    assert model_flops(m) == main + main // 2
    mlp = build_mlp_student(8, 47, 1, rng=np.random.default_rng(0))
    assert model_flops(mlp) == 8 * 47 + 47 * 47 + 47 == 2632


def test_matched_width_is_smallest_reaching_target():
    w = matched_mlp_width(2624, 8, 1)
    assert w == 47
    cost = lambda w: 8 * w + w * w + w
    assert cost(w) >= 2624 > cost(w - 1)


def test_unfold_small():
    img = np.arange(4.0).reshape(2, 2, 1)
    rows, hw = unfold_conv(img, 2, 2)
    assert hw == (1, 1)
    np.testing.assert_array_equal(rows, [[0.0, 1.0, 2.0, 3.0]])


def test_unfold_cifar_shape(rng):
    rows, hw = unfold_conv(rng.standard_normal((32, 32, 3)), 2, 2)
    assert rows.shape == (256, 12) and hw == (16, 16)


def test_unfold_column_selection(rng):
    img = rng.standard_normal((6, 6, 3))
    k, s = 2, 2
    for dy in range(k):
        for dx in range(k):
            for c in range(3):
                j = (dy * k + dx) * 3 + c
                W = np.zeros((1, k * k * 3))
                W[0, j] = 1.0
                out = conv2d(Linear(W, np.zeros(1)).forward, img, k, s)
                np.testing.assert_array_equal(out[:, :, 0], img[dy::s, dx::s, c])


def test_conv2d_matches_direct_loop(rng):
    imgs = rng.standard_normal((2, 7, 9, 2))
    k, s = 3, 2
    W = rng.standard_normal((4, k * k * 2))
    b = rng.standard_normal(4)
    out = conv2d(Linear(W, b).forward, imgs, k, s)
    Wk = W.reshape(4, k, k, 2)
    ref = np.zeros((2, 3, 4, 4))
    for n in range(2):
        for i in range(3):
            for j in range(4):
                patch = imgs[n, i * s:i * s + k, j * s:j * s + k]
                ref[n, i, j] = np.tensordot(Wk, patch, axes=([1, 2, 3], [0, 1, 2])) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_with_lmkan_layer(rng):
    layer = init_layer(12, 5, 6, seed=rng)
    layer.gamma = 1.0
    img = rng.standard_normal((8, 8, 3))
    out = conv2d(layer.forward, img, 2, 2)
    assert out.shape == (4, 4, 5)
    rows, _ = unfold_conv(img, 2, 2)
    np.testing.assert_array_equal(out.reshape(-1, 5), layer.forward(rows))


def test_unfold_rejects_bad_stride():
    with pytest.raises(ShapeError):
        unfold_conv(np.zeros((5, 5, 1)), 2, 2)
    with pytest.raises(ShapeError):
        unfold_conv(np.zeros((5, 5)), 2, 1)


def test_fold_batched():
    rows = np.arange(2 * 3 * 4 * 5.0).reshape(-1, 5)
    assert fold_conv(rows, (3, 4), 2).shape == (2, 3, 4, 5)
