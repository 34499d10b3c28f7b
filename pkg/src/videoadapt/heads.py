"""Classification and adversarial heads plus the training losses.

The classifier is a frozen random linear probe by default: it is never
trained, which pushes class discrimination into the encoder. The
adversarial head is a trainable two-layer MLP behind a gradient reversal,
so its own binary cross-entropy trains it to tell domains apart while the
reversed gradient trains the encoder to blur them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, grad_reverse
from .errors import ConfigError, DataError
from .transfer import trunc_normal

_PREACT_CLIP = 30.0
PROB_FLOOR = 1e-7


class ClassifierHead:
    """Linear map d_model -> n_classes, frozen by default.

    ``hidden=True`` switches to a frozen two-layer variant (same width,
    ReLU). Frozen parameters never require gradients, so optimizers skip
    them and their bits stay fixed for the whole run.
    """

    def __init__(
        self,
        d_model: int,
        n_classes: int,
        rng: np.random.Generator,
        frozen: bool = True,
        hidden: bool = False,
    ):
        if n_classes < 2:
            raise ConfigError(f"need at least two classes, got {n_classes}")
        self.n_classes = n_classes
        self.frozen = frozen
        self.hidden = hidden
        grad = not frozen
        self.params: dict[str, Tensor] = {}
        if hidden:
            self.params["w1"] = Tensor(trunc_normal(rng, (d_model, d_model)), requires_grad=grad)
            self.params["b1"] = Tensor(np.zeros(d_model), requires_grad=grad)
        self.params["w"] = Tensor(trunc_normal(rng, (d_model, n_classes)), requires_grad=grad)
        self.params["b"] = Tensor(np.zeros(n_classes), requires_grad=grad)

    def parameters(self, prefix: str = "classifier.") -> dict[str, Tensor]:
        return {prefix + name: t for name, t in self.params.items()}

    def logits(self, features: Tensor) -> Tensor:
        h = features
        if self.hidden:
            h = (h @ self.params["w1"] + self.params["b1"]).gelu()
        return h @ self.params["w"] + self.params["b"]


class AdversarialHead:
    """Trainable MLP d_model -> d_model/2 -> 1 estimating P(source) per video."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        half = max(d_model // 2, 1)
        self.params = {
            "w1": Tensor(trunc_normal(rng, (d_model, half)), requires_grad=True),
            "b1": Tensor(np.zeros(half), requires_grad=True),
            "w2": Tensor(trunc_normal(rng, (half, 1)), requires_grad=True),
            "b2": Tensor(np.zeros(1), requires_grad=True),
        }

    def parameters(self, prefix: str = "adversary.") -> dict[str, Tensor]:
        return {prefix + name: t for name, t in self.params.items()}

    def prob_source(self, features: Tensor, grl_weight: float | None) -> Tensor:
        """P(source) per row; grl_weight None removes the reversal (tests only)."""
        x = features if grl_weight is None else grad_reverse(features, grl_weight)
        h = (x @ self.params["w1"] + self.params["b1"]).gelu()
        return (h @ self.params["w2"] + self.params["b2"]).clip(-_PREACT_CLIP, _PREACT_CLIP).sigmoid()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_cls(classifier: ClassifierHead, features: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of source predictions against their labels."""
    labels = np.asarray(labels)
    if labels.shape != (features.shape[0],):
        raise DataError(f"need one label per row, got {labels.shape} for {features.shape[0]} rows")
    if labels.min() < 0 or labels.max() >= classifier.n_classes:
        raise DataError(
            f"labels must lie in [0, {classifier.n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    probs = classifier.logits(features).softmax_rows()
    onehot = np.zeros((labels.size, classifier.n_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    return -(probs.log() * onehot).sum() * (1.0 / labels.size)


def loss_soft_entropy(classifier: ClassifierHead, features: Tensor) -> Tensor:
    """Mean predictive entropy on unlabeled rows; minimizing it sharpens predictions."""
    probs = classifier.logits(features).softmax_rows()
    return -(probs * probs.log()).sum() * (1.0 / features.shape[0])


def loss_adv(
    adversary: AdversarialHead,
    features: Tensor,
    is_source: np.ndarray,
    grl_weight: float | None,
) -> Tensor:
    """Domain BCE through the reversal: trains the head, confuses the encoder."""
    is_source = np.asarray(is_source, dtype=bool)
    if is_source.all() or not is_source.any():
        warnings.warn("adversarial loss on a single-domain batch", stacklevel=2)
    p = adversary.prob_source(features, grl_weight).clip(PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = Tensor(is_source.astype(np.float64).reshape(-1, 1))
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


@dataclass(frozen=True)
class LossWeights:
    entropy: float = 1.0
    ib: float = 0.001
    patch: float = 1.0

    def __post_init__(self):
        if min(self.entropy, self.ib, self.patch) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossMask:
    cls: bool = True
    entropy: bool = True
    adv: bool = True
    ib: bool = True


@dataclass
class LossReport:
    cls: float = 0.0
    entropy: float = 0.0
    adv: float = 0.0
    ib: float = 0.0
    patch: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "cls": self.cls,
            "entropy": self.entropy,
            "adv": self.adv,
            "ib": self.ib,
            "patch": self.patch,
            "total": self.total,
        }


def total_loss(
    cls: Tensor | None,
    entropy: Tensor | None,
    adv: Tensor | None,
    ib: Tensor | None,
    patch: Tensor | None,
    weights: LossWeights,
) -> tuple[Tensor, LossReport]:
    """Weighted sum of the active parts; adversarial strength lives in its GRL.

    Pass None for a disabled part — it then contributes exactly nothing to
    any gradient. The report stores unweighted part values and the weighted
    total.
    """
    report = LossReport()
    total = Tensor(0.0)
    if cls is not None:
        report.cls = cls.item()
        total = total + cls
    if entropy is not None:
        report.entropy = entropy.item()
        total = total + weights.entropy * entropy
    if adv is not None:
        report.adv = adv.item()
        total = total + adv
    if ib is not None:
        report.ib = ib.item()
        total = total + weights.ib * ib
    if patch is not None:
        report.patch = patch.item()
        total = total + weights.patch * patch
    report.total = total.item()
    return total, report
