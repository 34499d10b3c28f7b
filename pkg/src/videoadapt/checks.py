"""Finite-difference suites for whole blocks and losses.

These run the same machinery as training but in fully differentiable
form: reversal layers are removed and attention scores keep their graph,
because finite differences can only certify true derivatives. The
deliberate gradient surgeries (reversal sign, score detachment) have
their own dual-run tests.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderModel
from .errors import ConfigError
from .gradcheck import check_gradients
from .heads import AdversarialHead, ClassifierHead, loss_adv, loss_cls, loss_soft_entropy
from .transfer import AdaptConfig


def _tiny_encoder(rng, positions, adapt: AdaptConfig) -> EncoderModel:
    cfg = EncoderConfig(
        feat_dim=3,
        k_tokens=3,
        d_model=6,
        n_heads=2,
        n_layers=1,
        mlp_ratio=2,
        adapt_positions=positions,
        adapt=adapt,
    )
    return EncoderModel(cfg, rng)


def _check_standard_block(rng) -> float:
    model = _tiny_encoder(rng, positions=(), adapt=AdaptConfig())
    x = Tensor(rng.standard_normal((6, 6)), requires_grad=True)  # two videos of three tokens
    probe = Tensor(rng.standard_normal((6, 6)))

    def f():
        return (model.standard_block(x, 0, 2) * probe).sum()

    return check_gradients(f, [x] + list(model.parameters().values()))


def _check_embed(rng) -> float:
    model = _tiny_encoder(rng, positions=(), adapt=AdaptConfig())
    feats = rng.standard_normal((2, 3, 3))
    probe = Tensor(rng.standard_normal((6, 6)))

    def f():
        return (model.embed(feats) * probe).sum()

    return check_gradients(f, list(model.parameters().values()))


def _check_adapt_block(rng) -> float:
    # Fully differentiable configuration: no reversal, scores keep their graph.
    adapt = AdaptConfig(grl_weight=None, backprop_scores=True, use_ib=True, queue_capacity=4)
    model = _tiny_encoder(rng, positions=(0,), adapt=adapt)
    feats = rng.standard_normal((4, 3, 3))
    is_source = np.array([True, True, False, False])
    probe = Tensor(rng.standard_normal((4, 6)))

    def f():
        res = model.encode(feats, is_source, train=True, queues=None, rng=np.random.default_rng(123))
        return (res.features * probe).sum() + res.patch_loss + res.ib

    return check_gradients(f, list(model.parameters().values()))


def _check_losses(rng) -> dict[str, float]:
    d, n_classes, rows = 5, 3, 4
    clf = ClassifierHead(d, n_classes, rng, frozen=False)
    adv = AdversarialHead(d, rng)
    f_leaf = Tensor(rng.standard_normal((rows, d)), requires_grad=True)
    labels = rng.integers(0, n_classes, rows)
    is_source = np.array([True, False, True, False])
    return {
        "loss_cls": check_gradients(
            lambda: loss_cls(clf, f_leaf, labels), [f_leaf] + list(clf.parameters().values())
        ),
        "loss_soft_entropy": check_gradients(
            lambda: loss_soft_entropy(clf, f_leaf), [f_leaf] + list(clf.parameters().values())
        ),
        "loss_adv": check_gradients(
            lambda: loss_adv(adv, f_leaf, is_source, None), [f_leaf] + list(adv.parameters().values())
        ),
    }


def run_scope_suite(scope: str, rng: np.random.Generator, instances: int = 25, tol: float = 1e-4):
    """Repeat one scope's checks on fresh random instances; returns (name, err, ok) rows."""
    worst: dict[str, float] = {}
    for _ in range(instances):
        if scope == "encoder":
            worst["embed"] = max(worst.get("embed", 0.0), _check_embed(rng))
            worst["standard_block"] = max(worst.get("standard_block", 0.0), _check_standard_block(rng))
        elif scope == "dtab":
            worst["adapt_block"] = max(worst.get("adapt_block", 0.0), _check_adapt_block(rng))
        elif scope == "heads":
            for name, err in _check_losses(rng).items():
                worst[name] = max(worst.get(name, 0.0), err)
        else:
            raise ConfigError(f"unknown gradcheck scope {scope!r}")
    return [(name, err, err < tol) for name, err in worst.items()]
