"""Token embedding, transformer blocks, and the pooled video representation.

Videos enter as [B, k, feat_dim] arrays of sampled frame features. A
per-token MLP maps them to model width, optionally adding a learned
positional table. Blocks are pre-norm (LayerNorm, attention, residual,
LayerNorm, MLP, residual); the block at each configured adaptation
position swaps content attention for transferability attention and
collects the adaptation losses. The readout is the mean over the k
tokens of each video — no CLS token anywhere.

Evaluation may share a model across threads read-only; training mutates
parameters and must stay on a single thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat_cols, grouped_attention, layer_norm
from .errors import ConfigError, ShapeError, UsageError
from .transfer import (
    AdaptConfig,
    FeatureQueue,
    PatchDiscriminator,
    build_ib_pairs,
    ib_loss,
    multi_head_transfer_attention,
    trunc_normal,
)

POSITIONAL_MODES = ("learned", "none")


@dataclass(frozen=True)
class EncoderConfig:
    feat_dim: int
    k_tokens: int
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 4
    mlp_ratio: int = 4
    adapt_positions: tuple[int, ...] | None = None  # None -> last block only
    positional: str = "learned"
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def __post_init__(self):
        if self.feat_dim < 1 or self.k_tokens < 1 or self.d_model < 1:
            raise ConfigError("feat_dim, k_tokens and d_model must be positive")
        if self.n_layers < 1 or self.mlp_ratio < 1:
            raise ConfigError("n_layers and mlp_ratio must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.positional not in POSITIONAL_MODES:
            raise ConfigError(f"positional must be one of {POSITIONAL_MODES}, got {self.positional!r}")
        for pos in self.adapt_positions or ():
            if not 0 <= pos < self.n_layers:
                raise ConfigError(f"adaptation position {pos} outside [0, {self.n_layers})")

    @property
    def positions(self) -> tuple[int, ...]:
        if self.adapt_positions is None:
            return (self.n_layers - 1,)
        return tuple(sorted(set(self.adapt_positions)))

    @property
    def head_width(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class EncodeResult:
    features: Tensor  # [B, d_model] pooled video features
    patch_loss: Tensor | None = None
    ib: Tensor | None = None
    scores: dict[int, np.ndarray] = field(default_factory=dict)  # position -> [B, k]


class EncoderModel:
    """Owns every trainable tensor of the encoder stack."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, r = cfg.d_model, cfg.mlp_ratio
        p: dict[str, Tensor] = {}
        p["embed.w1"] = _param(rng, (cfg.feat_dim, d))
        p["embed.b1"] = _zeros(d)
        p["embed.w2"] = _param(rng, (d, d))
        p["embed.b2"] = _zeros(d)
        if cfg.positional == "learned":
            p["pos"] = _param(rng, (cfg.k_tokens, d))
        for i in range(cfg.n_layers):
            blk = f"block{i}."
            for name in ("wq", "wk", "wv", "wo"):
                p[blk + name] = _param(rng, (d, d))
            for name in ("bq", "bk", "bv", "bo"):
                p[blk + name] = _zeros(d)
            p[blk + "ln1.g"] = Tensor(np.ones(d), requires_grad=True)
            p[blk + "ln1.b"] = _zeros(d)
            p[blk + "ln2.g"] = Tensor(np.ones(d), requires_grad=True)
            p[blk + "ln2.b"] = _zeros(d)
            p[blk + "mlp.w1"] = _param(rng, (d, r * d))
            p[blk + "mlp.b1"] = _zeros(r * d)
            p[blk + "mlp.w2"] = _param(rng, (r * d, d))
            p[blk + "mlp.b2"] = _zeros(d)
        self.params = p
        self.discriminators: dict[int, PatchDiscriminator] = {}
        if cfg.adapt.use_attention:
            for i in cfg.positions:
                self.discriminators[i] = PatchDiscriminator(cfg.head_width, rng)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for i, disc in self.discriminators.items():
            out.update(disc.parameters(prefix=f"block{i}.disc."))
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    # -- forward pieces ------------------------------------------------------

    def embed(self, feats: np.ndarray) -> Tensor:
        """[B, k, feat_dim] -> flattened [B * k, d_model] tokens."""
        if feats.ndim != 3 or feats.shape[1] != self.cfg.k_tokens or feats.shape[2] != self.cfg.feat_dim:
            raise ConfigError(
                f"expected [B, {self.cfg.k_tokens}, {self.cfg.feat_dim}] features, got {feats.shape}"
            )
        n_videos = feats.shape[0]
        p = self.params
        x = Tensor(feats.reshape(n_videos * self.cfg.k_tokens, self.cfg.feat_dim))
        h = ((x @ p["embed.w1"] + p["embed.b1"]).gelu() @ p["embed.w2"]) + p["embed.b2"]
        if self.cfg.positional == "learned":
            h = h + p["pos"].tile_rows(n_videos)
        return h

    def _mlp(self, x: Tensor, block: int) -> Tensor:
        p = self.params
        blk = f"block{block}."
        return ((x @ p[blk + "mlp.w1"] + p[blk + "mlp.b1"]).gelu() @ p[blk + "mlp.w2"]) + p[blk + "mlp.b2"]

    def _project_qkv(self, x: Tensor, block: int) -> tuple[Tensor, Tensor, Tensor]:
        p = self.params
        blk = f"block{block}."
        return (
            x @ p[blk + "wq"] + p[blk + "bq"],
            x @ p[blk + "wk"] + p[blk + "bk"],
            x @ p[blk + "wv"] + p[blk + "bv"],
        )

    def _content_attention(self, x: Tensor, block: int, n_videos: int) -> Tensor:
        """Scaled dot-product attention per video over the flattened token matrix."""
        cfg = self.cfg
        q, k, v = self._project_qkv(x, block)
        scale = 1.0 / math.sqrt(cfg.head_width)
        heads = [
            grouped_attention(qh, kh, vh, cfg.k_tokens, scale)
            for qh, kh, vh in zip(
                q.split_heads(cfg.n_heads), k.split_heads(cfg.n_heads), v.split_heads(cfg.n_heads)
            )
        ]
        p = self.params
        return concat_cols(heads) @ p[f"block{block}.wo"] + p[f"block{block}.bo"]

    def _norm(self, x: Tensor, block: int, which: int) -> Tensor:
        p = self.params
        return layer_norm(x, p[f"block{block}.ln{which}.g"], p[f"block{block}.ln{which}.b"])

    def standard_block(self, x: Tensor, block: int, n_videos: int) -> Tensor:
        x = x + self._content_attention(self._norm(x, block, 1), block, n_videos)
        return x + self._mlp(self._norm(x, block, 2), block)

    def adapt_block(
        self,
        x: Tensor,
        block: int,
        n_videos: int,
        is_source: np.ndarray | None,
        train: bool,
        queue: FeatureQueue | None,
        rng: np.random.Generator | None,
    ) -> tuple[Tensor, Tensor | None, Tensor | None, np.ndarray | None]:
        """Block with transferability attention and the paired-feature loss.

        Returns (tokens, patch_loss, ib, scores); the losses are None in
        eval mode or when the corresponding component is disabled.
        """
        cfg = self.cfg
        acfg = cfg.adapt
        xn = self._norm(x, block, 1)
        patch_loss = None
        scores = None
        if acfg.use_attention:
            q, k, v = self._project_qkv(xn, block)
            attn, patch_loss, scores = multi_head_transfer_attention(
                q,
                k,
                v,
                self.params[f"block{block}.wo"],
                self.params[f"block{block}.bo"],
                self.discriminators[block],
                cfg.n_heads,
                n_videos,
                cfg.k_tokens,
                is_source,
                acfg,
                collect_loss=train,
            )
        else:
            attn = self._content_attention(xn, block, n_videos)
        x = x + attn
        x = x + self._mlp(self._norm(x, block, 2), block)
        ib = None
        if train and acfg.use_ib:
            pooled = self._pool_videos(x, n_videos)
            src = [pooled.slice_rows(i, i + 1) for i in range(n_videos) if is_source[i]]
            tgt = [pooled.slice_rows(i, i + 1) for i in range(n_videos) if not is_source[i]]
            if src and tgt:
                pairs = build_ib_pairs(src, tgt, queue, rng)
                if pairs is not None:
                    ib = ib_loss(pairs[0], pairs[1], acfg.offdiag_weight)
            if queue is not None:
                for i in range(n_videos):
                    if is_source[i]:
                        queue.push(pooled.data[i])
        return x, patch_loss, ib, scores

    def _pool_videos(self, x: Tensor, n_videos: int = 0) -> Tensor:
        """Mean over each video's tokens: [B*k, d] -> [B, d]."""
        return x.group_mean_rows(self.cfg.k_tokens)

    def encode(
        self,
        feats: np.ndarray,
        is_source: np.ndarray | None = None,
        train: bool = False,
        queues: dict[int, FeatureQueue] | None = None,
        rng: np.random.Generator | None = None,
    ) -> EncodeResult:
        """Run the full stack and pool each video's tokens into one feature row.

        Domain flags are needed whenever an adaptation block runs (its
        attention scores condition on them); in train mode their absence
        is an error.
        """
        cfg = self.cfg
        positions = set(cfg.positions)
        if positions and is_source is None:
            if train:
                raise UsageError("training with adaptation blocks requires per-video domain flags")
            is_source = np.zeros(feats.shape[0], dtype=bool)
        if train and positions and cfg.adapt.use_ib and rng is None:
            raise UsageError("training with the paired-feature loss requires an rng")
        n_videos = feats.shape[0]
        x = self.embed(feats)
        patch_terms: list[Tensor] = []
        ib_terms: list[Tensor] = []
        scores: dict[int, np.ndarray] = {}
        for block in range(cfg.n_layers):
            if block in positions:
                queue = queues.get(block) if queues else None
                x, patch, ib, sc = self.adapt_block(x, block, n_videos, is_source, train, queue, rng)
                if patch is not None:
                    patch_terms.append(patch)
                if ib is not None:
                    ib_terms.append(ib)
                if sc is not None:
                    scores[block] = sc
            else:
                x = self.standard_block(x, block, n_videos)
        features = self._pool_videos(x, n_videos)
        return EncodeResult(
            features=features,
            patch_loss=_mean_terms(patch_terms),
            ib=_mean_terms(ib_terms),
            scores=scores,
        )


def _param(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(trunc_normal(rng, shape), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _mean_terms(terms: list[Tensor]) -> Tensor | None:
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))
