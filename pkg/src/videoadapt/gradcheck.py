"""Central finite-difference gradient checking.

The numerical side perturbs raw parameter storage and re-runs the forward
function, so it is independent of every backward rule it verifies. Scalar
relative error uses |a - n| / max(|a|, |n|, 1), which degrades gracefully
to absolute error for tiny gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    concat_cols,
    concat_rows,
    grad_reverse,
    grouped_attention,
    layer_norm,
)


def numerical_gradient(f: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar f() w.r.t. one leaf tensor."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f().item()
        flat[i] = keep - h
        fm = f().item()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between autodiff and finite differences over all leaves."""
    for leaf in leaves:
        leaf.grad = None
    f().backward()
    analytic = []
    for leaf in leaves:
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        analytic.append(np.array(g, copy=True))
        leaf.grad = None
    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        n = numerical_gradient(f, leaf, h=h)
        worst = max(worst, relative_error(a, n))
    return worst


# ---------------------------------------------------------------------------
# Randomized check suites, shared by the test suite and the CLI.
# ---------------------------------------------------------------------------


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _away_from(rng, shape, kinks: float, margin: float = 5e-3) -> Tensor:
    """Random values guaranteed at least `margin` away from +/- kinks (for FD safety)."""
    x = rng.standard_normal(shape)
    while np.any(np.abs(np.abs(x) - kinks) < margin):
        bad = np.abs(np.abs(x) - kinks) < margin
        x[bad] = rng.standard_normal(int(bad.sum()))
    return Tensor(x, requires_grad=True)


def _op_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    a = _rand(rng, 5, 4)
    b = _rand(rng, 4, 3)
    c = _rand(rng, 5, 4)
    v = _rand(rng, 4)
    row = _rand(rng, 1, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (4, 4)), requires_grad=True)
    gain = _rand(rng, 4)
    bias = _rand(rng, 4)
    s1 = _rand(rng, 3, 4)
    s2 = _rand(rng, 2, 4)
    w1 = _rand(rng, 3, 2)
    w2 = _rand(rng, 3, 2)
    m = _rand(rng, 4, 8)
    relu_in = _away_from(rng, (4, 4), kinks=0.0)
    clip_in = _away_from(rng, (4, 4), kinks=0.9)
    ga_q = _rand(rng, 6, 3)
    ga_k = _rand(rng, 6, 3)
    ga_v = _rand(rng, 6, 2)
    ga_probe = Tensor(rng.standard_normal((6, 2)))
    gm_probe = Tensor(rng.standard_normal((2, 8)))
    return [
        ("matmul", lambda: (a @ b).sum(), [a, b]),
        ("add", lambda: (a + c).mean(), [a, c]),
        ("add_vector", lambda: (a + v).mean(), [a, v]),
        ("add_row", lambda: (a + row).mean(), [a, row]),
        ("sub", lambda: (a - c).mean(), [a, c]),
        ("mul", lambda: (a * c).mean(), [a, c]),
        ("mul_vector", lambda: (a * v).mean(), [a, v]),
        ("scalar_mul", lambda: (a * 2.5).sum(), [a]),
        ("pow", lambda: ((pos**0.5) * (pos**-1.0)).sum(), [pos]),
        ("log", lambda: pos.log().sum(), [pos]),
        ("exp", lambda: (a.exp() * 0.1).sum(), [a]),
        ("relu", lambda: relu_in.relu().sum(), [relu_in]),
        ("gelu", lambda: a.gelu().sum(), [a]),
        ("sigmoid", lambda: a.sigmoid().sum(), [a]),
        ("clip", lambda: (clip_in.clip(-0.9, 0.9) * 2.0).sum(), [clip_in]),
        ("mean", lambda: a.mean(), [a]),
        ("sum", lambda: a.sum(), [a]),
        ("mean_rows", lambda: (a.mean_rows() * v).sum(), [a, v]),
        ("sum_rows", lambda: (a.sum_rows() * v).sum(), [a, v]),
        ("transpose", lambda: (a.T @ c).sum(), [a, c]),
        ("softmax_rows", lambda: (a.softmax_rows() * c).sum(), [a, c]),
        ("layer_norm", lambda: (layer_norm(a, gain, bias) * c).sum(), [a, gain, bias, c]),
        ("grad_reverse_identity", lambda: (grad_reverse(a, 0.0) * c).sum() + a.mean(), [c]),
        ("concat_rows", lambda: (concat_rows([s1, s2]) * 0.5).sum(), [s1, s2]),
        ("concat_cols", lambda: (concat_cols([w1, w2]) ** 2.0).sum(), [w1, w2]),
        ("split_merge_heads", lambda: concat_cols(m.split_heads(2)).sum() + m.split_heads(4)[1].mean(), [m]),
        ("slice_rows", lambda: (a.slice_rows(1, 4) * 3.0).sum(), [a]),
        ("slice_cols", lambda: (a.slice_cols(0, 2) * 3.0).sum(), [a]),
        ("tile_rows", lambda: (row.tile_rows(3) * s1).sum(), [row, s1]),
        ("group_mean_rows", lambda: (m.group_mean_rows(2) * gm_probe).sum(), [m]),
        ("grouped_attention", lambda: (grouped_attention(ga_q, ga_k, ga_v, 3, 0.7) * ga_probe).sum(), [ga_q, ga_k, ga_v]),
    ]


def run_op_suite(rng: np.random.Generator, instances: int = 25, tol: float = 1e-4, h: float = 1e-5):
    """Gradient-check every engine op on randomized small tensors.

    Returns (name, max_error) pairs, one per op, where max_error is the worst
    over all instances.
    """
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, f, leaves in _op_cases(rng):
            err = check_gradients(f, leaves, h=h)
            worst[name] = max(worst.get(name, 0.0), err)
    return [(name, err, err < tol) for name, err in worst.items()]
