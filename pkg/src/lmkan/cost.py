"""Main-term FLOP and parameter accounting.

FLOPs are fused multiply-adds of the O(N_in * N_out) term only; preambles,
biases and activations are O(N) and ignored, for lmKANs and MLPs alike.
"""

from __future__ import annotations

from .errors import ConfigError
from .layers import Linear, LmKanLayer, PrecondBlock

__all__ = [
    "flops_main_term",
    "linear_flops",
    "param_count",
    "param_ratio_vs_linear",
    "block_flops",
    "model_flops",
    "deployed_flops",
    "matched_mlp_width",
]


def flops_main_term(n_in, n_out, d=2, k=2) -> int:
    """``(k**d / d) * n_in * n_out`` for a d-dimensional order-k lookup layer."""
    if d < 1 or k < 2:
        raise ConfigError(f"need d >= 1 and k >= 2, got d={d}, k={k}")
    if n_in % d:
        raise ConfigError(f"d={d} does not divide n_in={n_in}", field="n_in")
    return (k ** d) * (n_in // d) * n_out


def linear_flops(n_in, n_out) -> int:
    return n_in * n_out


def param_count(layer: LmKanLayer) -> int:
    return (layer.G + 1) ** 2 * layer.n_pairs * layer.n_out


def param_ratio_vs_linear(G) -> float:
    """Coefficients per lmKAN layer divided by weights of a same-shape linear layer."""
    if G < 1:
        raise ConfigError(f"G must be >= 1, got {G}", field="G")
    return (G + 1) ** 2 / 2


def block_flops(m) -> int:
    """Cost of one module as it currently stands (an unfused branch counts extra)."""
    if isinstance(m, PrecondBlock):
        f = flops_main_term(m.n_in, m.n_out)
        if m.mode != "none":
            f += linear_flops(m.n_in, m.n_out)
        return f
    if isinstance(m, LmKanLayer):
        return flops_main_term(m.n_in, m.n_out)
    if isinstance(m, Linear):
        return linear_flops(m.n_in, m.n_out)
    return 0


def model_flops(model) -> int:
    return sum(block_flops(m) for m in model.modules)


def deployed_flops(model) -> int:
    """Cost after inference fusion: ``relu_first`` branches vanish, ``relu_last`` ones stay."""
    total = 0
    for m in model.modules:
        if isinstance(m, PrecondBlock) and m.mode == "relu_first":
            total += flops_main_term(m.n_in, m.n_out)
        else:
            total += block_flops(m)
    return total


def matched_mlp_width(target_flops, in_dim, out_dim, n_hidden=2) -> int:
    """Smallest hidden width whose MLP main-term cost is at least ``target_flops``."""
    w = 1
    while in_dim * w + (n_hidden - 1) * w * w + w * out_dim < target_flops:
        w += 1
    return w
