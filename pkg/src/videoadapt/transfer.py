"""Transferability-guided attention and its adaptation losses.

A small per-token domain discriminator scores how hard each token is to
assign to source or target; the binary cross-entropy of that call is the
token's transferability score (high = confusing = transferable). Attention
logits are the outer product of query-side and key-side scores, so the
scored matrix has rank one by construction. The same module owns the
redundancy-reduction loss on paired source/target features and the FIFO
queue of recent source features that backs it.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat_cols, concat_rows, grad_reverse, grouped_attention
from .errors import ConfigError

PROB_FLOOR = 1e-7
VARIANCE_FLOOR = 1e-8
_PREACT_CLIP = 30.0


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    x = rng.standard_normal(shape) * std
    bound = 2.0 * std
    while True:
        bad = np.abs(x) > bound
        if not bad.any():
            return x
        x[bad] = rng.standard_normal(int(bad.sum())) * std


@dataclass(frozen=True)
class AdaptConfig:
    """Knobs of the adaptation block.

    ``grl_weight`` is the reversal strength on the token-discriminator path
    (fixed at 1 for every task); ``None`` removes the reversal entirely,
    which only the dual-run tests use. ``raw_scores`` switches the attention
    scores to the non-negated log form for comparison runs. With
    ``backprop_scores`` off (default), scores entering the attention logits
    are detached, and the discriminator learns only from its own BCE.
    """

    use_attention: bool = True
    use_ib: bool = True
    queue_capacity: int = 1024
    grl_weight: float | None = 1.0
    offdiag_weight: float = 5e-3
    raw_scores: bool = False
    backprop_scores: bool = False

    def __post_init__(self):
        if self.queue_capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {self.queue_capacity}")
        if self.grl_weight is not None and self.grl_weight < 0:
            raise ConfigError(f"grl weight must be non-negative, got {self.grl_weight}")
        if self.offdiag_weight < 0:
            raise ConfigError(f"off-diagonal weight must be non-negative, got {self.offdiag_weight}")


def discriminator_error(p: float, from_source: bool, raw: bool = False) -> float:
    """Per-token transferability score from a P(source) estimate.

    Probabilities are clamped to [1e-7, 1 - 1e-7]. The default form is the
    binary cross-entropy -log(.), non-negative and maximal when the
    discriminator is most confused; ``raw`` negates it (log form).
    """
    p = min(max(p, PROB_FLOOR), 1.0 - PROB_FLOOR)
    value = -math.log(p) if from_source else -math.log(1.0 - p)
    return -value if raw else value


class PatchDiscriminator:
    """Two-layer MLP head_width -> head_width -> 1 estimating P(source) per token.

    One instance is shared across all heads and both query/key roles of a
    block. The sigmoid pre-activation is clamped so outputs stay strictly
    inside (0, 1).
    """

    def __init__(self, head_width: int, rng: np.random.Generator, init_std: float = 0.02):
        self.w1 = Tensor(trunc_normal(rng, (head_width, head_width), init_std), requires_grad=True)
        self.b1 = Tensor(np.zeros(head_width), requires_grad=True)
        self.w2 = Tensor(trunc_normal(rng, (head_width, 1), init_std), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}w1": self.w1,
            f"{prefix}b1": self.b1,
            f"{prefix}w2": self.w2,
            f"{prefix}b2": self.b2,
        }

    def prob_source(self, tokens: Tensor) -> Tensor:
        """[n, head_width] tokens -> [n, 1] probabilities in (0, 1)."""
        h = (tokens @ self.w1 + self.b1).gelu()
        return (h @ self.w2 + self.b2).clip(-_PREACT_CLIP, _PREACT_CLIP).sigmoid()


def _bce_scores(p: Tensor, source_mask: np.ndarray) -> Tensor:
    """Per-row -log BCE of P(source) estimates against known domain labels."""
    y = Tensor(source_mask.astype(np.float64).reshape(-1, 1))
    pc = p.clip(PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -(y * pc.log() + (1.0 - y) * (1.0 - pc).log())


def token_scores(
    tokens: Tensor,
    source_mask: np.ndarray,
    disc: PatchDiscriminator,
    grl_weight: float | None,
) -> Tensor:
    """Transferability scores (BCE form, graph-attached) for projected tokens.

    The reversal sits between the encoder-side tokens and the discriminator,
    so the BCE trains the discriminator normally while pushing the encoder
    to produce domain-confusing tokens.
    """
    x = tokens if grl_weight is None else grad_reverse(tokens, grl_weight)
    return _bce_scores(disc.prob_source(x), source_mask)


def transfer_attention_head(
    q_proj: Tensor,
    k_proj: Tensor,
    v_proj: Tensor,
    video_is_source: bool,
    disc: PatchDiscriminator,
    cfg: AdaptConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """One head on one video: attention weighted by transferability scores.

    Logits are the outer product of the query-side and key-side score
    columns over sqrt(head_width), an [n, n] matrix of rank one. Returns
    (output [n, head_width], query scores [n, 1], key scores [n, 1]); the
    score tensors stay attached to the graph for the discriminator BCE.
    """
    n, dh = q_proj.shape
    mask = np.full(n, video_is_source, dtype=bool)
    e_q = token_scores(q_proj, mask, disc, cfg.grl_weight)
    e_k = token_scores(k_proj, mask, disc, cfg.grl_weight)
    att_q = e_q if cfg.backprop_scores else e_q.detach()
    att_k = e_k if cfg.backprop_scores else e_k.detach()
    if cfg.raw_scores:
        att_q, att_k = -att_q, -att_k
    logits = (att_q @ att_k.T) * (1.0 / math.sqrt(dh))
    out = logits.softmax_rows() @ v_proj
    return out, e_q, e_k


def multi_head_transfer_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    disc: PatchDiscriminator,
    n_heads: int,
    n_videos: int,
    k_tokens: int,
    is_source: np.ndarray,
    cfg: AdaptConfig,
    collect_loss: bool = True,
) -> tuple[Tensor, Tensor | None, np.ndarray]:
    """Transferability attention over a flattened [n_videos * k_tokens, d] batch.

    q/k/v are already projected. The discriminator runs once per head and
    role on the full flattened matrix; attention happens per video. Returns
    the output tokens, the mean BCE over all heads, both roles and every
    token (None when collect_loss is off), and detached per-token query
    scores averaged over heads ([n_videos, k_tokens], diagnostics).
    """
    token_mask = np.repeat(is_source, k_tokens)
    scale = 1.0 / math.sqrt(q.shape[1] // n_heads)
    bce_cols: list[Tensor] = []
    score_acc = np.zeros((n_videos, k_tokens))
    head_outs: list[Tensor] = []
    q_heads, k_heads, v_heads = q.split_heads(n_heads), k.split_heads(n_heads), v.split_heads(n_heads)
    for qh, kh, vh in zip(q_heads, k_heads, v_heads):
        e_q = token_scores(qh, token_mask, disc, cfg.grl_weight)
        e_k = token_scores(kh, token_mask, disc, cfg.grl_weight)
        bce_cols.extend((e_q, e_k))
        att_q = e_q if cfg.backprop_scores else e_q.detach()
        att_k = e_k if cfg.backprop_scores else e_k.detach()
        if cfg.raw_scores:
            att_q, att_k = -att_q, -att_k
        score_acc += e_q.data.reshape(n_videos, k_tokens)
        head_outs.append(grouped_attention(att_q, att_k, vh, k_tokens, scale))
    merged = concat_cols(head_outs)
    patch_loss = None
    if collect_loss:
        patch_loss = concat_rows(bce_cols).mean()
    return merged @ w_out + b_out, patch_loss, score_acc / n_heads


# ---------------------------------------------------------------------------
# Redundancy-reduction (information bottleneck) loss
# ---------------------------------------------------------------------------


def _normalize_per_dim(z: Tensor) -> Tensor:
    centered = z - z.mean_rows()
    norms = ((centered * centered).sum_rows().clip(lo=VARIANCE_FLOOR)) ** 0.5
    return centered * (norms**-1.0)


def ib_loss(z_source: Tensor, z_target: Tensor, offdiag_weight: float) -> Tensor:
    """Cross-correlation alignment of paired source/target features.

    Rows are pairs. Each feature dimension is centered and scaled to unit
    norm over the pairs, the correlation matrix pushes its diagonal to 1
    and (scaled by offdiag_weight) its off-diagonal entries to 0. Fewer
    than two pairs cannot be standardized: warns and contributes 0.
    """
    if z_source.shape != z_target.shape:
        raise ConfigError(f"paired features must align, got {z_source.shape} vs {z_target.shape}")
    m, d = z_source.shape
    if m < 2:
        warnings.warn("ib_loss skipped: fewer than two source/target pairs", stacklevel=2)
        return Tensor(0.0)
    corr = _normalize_per_dim(z_source).T @ _normalize_per_dim(z_target)
    eye = np.eye(d)
    diag_gap = (Tensor(eye) - corr) * eye
    offdiag = corr * (1.0 - eye)
    return (diag_gap * diag_gap).sum() + offdiag_weight * (offdiag * offdiag).sum()


class FeatureQueue:
    """Bounded FIFO of detached source-domain feature vectors."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: deque[np.ndarray] = deque(maxlen=capacity)

    def push(self, vec: np.ndarray) -> None:
        self._items.append(np.array(vec, dtype=np.float64, copy=True).reshape(-1))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self._items[int(rng.integers(len(self._items)))]

    def snapshot(self) -> list[np.ndarray]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)


def build_ib_pairs(
    source_feats: list[Tensor],
    target_feats: list[Tensor],
    queue: FeatureQueue | None,
    rng: np.random.Generator,
) -> tuple[Tensor, Tensor] | None:
    """Pair [1, d] feature rows for the correlation loss.

    The first min(|S|, |T|) pairs match shuffled batch features; leftover
    targets draw a uniformly sampled entry from the queue as it stood at
    the start of the step. Returns None when nothing can be paired.
    """
    ns, nt = len(source_feats), len(target_feats)
    perm_s = rng.permutation(ns)
    perm_t = rng.permutation(nt)
    m = min(ns, nt)
    src_rows = [source_feats[perm_s[i]] for i in range(m)]
    tgt_rows = [target_feats[perm_t[i]] for i in range(m)]
    for j in perm_t[m:]:
        if queue is None or len(queue) == 0:
            break
        src_rows.append(Tensor(queue.sample(rng).reshape(1, -1)))
        tgt_rows.append(target_feats[j])
    if not src_rows:
        return None
    return concat_rows(src_rows), concat_rows(tgt_rows)
