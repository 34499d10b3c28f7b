"""Optimization loop, evaluation, and the three ablation protocols.

Each step builds a joint batch (source half first, then target half),
encodes it once, applies the active losses, and takes one Adam step.
Epochs pass once over the smaller domain while cycling the larger. All
randomness flows from one seeded generator consumed in a fixed order, so
a (config, seed) pair reproduces its metrics log byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .errors import ConfigError, NumericError, UsageError
from .featureio import Dataset, make_batch, write_features
from .heads import LossMask, LossWeights, loss_adv, loss_cls, loss_soft_entropy, total_loss
from .model import Model, build_model, save_checkpoint
from .synth import SynthSpec, generate
from .transfer import FeatureQueue


@dataclass(frozen=True)
class Preset:
    batch_size: int
    k_tokens: int
    queue_capacity: int
    ib_weight: float
    adv_grl_weight: float


# One preset per adaptation task; the synthetic preset is sized for CPU runs.
PRESETS: dict[str, Preset] = {
    "ucf-hmdb": Preset(batch_size=32, k_tokens=53, queue_capacity=1024, ib_weight=0.001, adv_grl_weight=1.0),
    "hmdb-ucf": Preset(batch_size=32, k_tokens=53, queue_capacity=1024, ib_weight=0.001, adv_grl_weight=0.5),
    "kinetics-gameplay": Preset(batch_size=64, k_tokens=23, queue_capacity=512, ib_weight=0.001, adv_grl_weight=0.05),
    "kinetics-necdrone": Preset(batch_size=64, k_tokens=53, queue_capacity=512, ib_weight=0.025, adv_grl_weight=0.5),
    "synthetic": Preset(batch_size=16, k_tokens=8, queue_capacity=64, ib_weight=0.01, adv_grl_weight=0.5),
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    weight_decay: float = 5e-4
    epochs: int = 300
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    task: str | None = None
    adv_grl_weight: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    mask: LossMask = field(default_factory=LossMask)
    decoupled_weight_decay: bool = False
    eval_every: int = 25
    checkpoint_every: int = 25

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("lr must be positive, epochs >= 1, batch_size >= 2")
        if self.weight_decay < 0 or self.adv_grl_weight < 0:
            raise ConfigError("weight_decay and adv_grl_weight must be non-negative")
        if self.task is not None and self.task not in PRESETS:
            raise ConfigError(f"unknown task preset {self.task!r}; known: {sorted(PRESETS)}")


class Adam(object):
    """Adam with classic L2-coupled weight decay (decoupled behind a flag).

    Only tensors with requires_grad get moment state; frozen parameters are
    invisible to the optimizer. A NaN gradient aborts, naming the tensor.
    """

    def __init__(self, params: dict[str, "Tensor"], cfg: TrainConfig):
        self.params = {name: t for name, t in params.items() if t.requires_grad}
        self.cfg = cfg
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        cfg = self.cfg
        self.step_count += 1
        bc1 = 1.0 - cfg.beta1**self.step_count
        bc2 = 1.0 - cfg.beta2**self.step_count
        for name in sorted(self.params):
            t = self.params[name]
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient in parameter {name!r}")
            if cfg.weight_decay and not cfg.decoupled_weight_decay:
                g = g + cfg.weight_decay * t.data
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + cfg.eps)
            if cfg.weight_decay and cfg.decoupled_weight_decay:
                update = update + cfg.weight_decay * t.data
            t.data = t.data - cfg.lr * update


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    final_accuracy: float
    best_accuracy: float
    epochs: int
    steps: int
    param_hash: str
    metrics_path: Path | None = None


def _epoch_pairs(src_ids, tgt_ids, half: int, rng) -> list[tuple[list[str], list[str]]]:
    """Chunk one shuffled pass of the smaller domain, cycling the larger."""
    src = [src_ids[i] for i in rng.permutation(len(src_ids))]
    tgt = [tgt_ids[i] for i in rng.permutation(len(tgt_ids))]
    small, large = (src, tgt) if len(src) <= len(tgt) else (tgt, src)
    n_steps = (len(small) + half - 1) // half
    reps = (n_steps * half + len(large) - 1) // len(large)
    large_cycled = [x for _ in range(reps) for x in large][: n_steps * half]
    out = []
    for s in range(n_steps):
        a = small[s * half : (s + 1) * half]
        b = large_cycled[s * half : s * half + len(a)]
        out.append((a, b) if small is src else (b, a))
    return out


class _MetricsLog:
    def __init__(self, path: Path | None):
        self.path = path
        self._fh = open(path, "w") if path else None

    def write(self, record: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def train(
    model: Model,
    train_ds: Dataset,
    test_ds: Dataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    score_log: bool = False,
) -> TrainResult:
    enc_cfg = model.cfg
    src_ids = train_ds.manifest.ids("source")
    tgt_ids = train_ds.manifest.ids("target")
    if not src_ids or not tgt_ids:
        raise UsageError("training needs at least one source and one target video")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = _MetricsLog(out_dir / "metrics.jsonl" if out_dir else None)
    scores_fh = open(out_dir / "transfer_scores.jsonl", "w") if (score_log and out_dir) else None

    rng = np.random.default_rng(cfg.seed)
    queues = {pos: FeatureQueue(enc_cfg.adapt.queue_capacity) for pos in enc_cfg.positions}
    optimizer = Adam(model.trainable_parameters(), cfg)
    mask = cfg.mask
    half = cfg.batch_size // 2
    step = 0
    best_accuracy = -1.0
    final_accuracy = 0.0

    for epoch in range(cfg.epochs):
        for src_chunk, tgt_chunk in _epoch_pairs(src_ids, tgt_ids, half, rng):
            ids = src_chunk + tgt_chunk
            batch = make_batch(train_ds, ids, enc_cfg.k_tokens, "train_random", rng)
            res = model.encoder.encode(
                batch.features, batch.is_source, train=True, queues=queues, rng=rng
            )
            ns = len(src_chunk)
            f_src = res.features.slice_rows(0, ns)
            f_tgt = res.features.slice_rows(ns, len(ids))
            cls = loss_cls(model.classifier, f_src, batch.labels[:ns]) if mask.cls else None
            ent = loss_soft_entropy(model.classifier, f_tgt) if mask.entropy else None
            adv = (
                loss_adv(model.adversary, res.features, batch.is_source, cfg.adv_grl_weight)
                if mask.adv
                else None
            )
            ib = res.ib if mask.ib else None
            total, report = total_loss(cls, ent, adv, ib, res.patch_loss, cfg.weights)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            step += 1
            record = {"type": "step", "step": step, "epoch": epoch, "lr": cfg.lr, "seed": cfg.seed}
            record.update(report.as_dict())
            log.write(record)
            if scores_fh:
                for pos, sc in res.scores.items():
                    scores_fh.write(
                        json.dumps(
                            {"step": step, "block": pos, "ids": ids, "scores": np.round(sc, 6).tolist()},
                            sort_keys=True,
                        )
                        + "\n"
                    )
        last_epoch = epoch == cfg.epochs - 1
        if last_epoch or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
            result = evaluate(model, test_ds)
            log.write(
                {
                    "type": "eval",
                    "epoch": epoch,
                    "accuracy": result.accuracy,
                    "per_class": result.per_class,
                    "seed": cfg.seed,
                }
            )
            final_accuracy = result.accuracy
            if result.accuracy > best_accuracy:
                best_accuracy = result.accuracy
                if out_dir:
                    save_checkpoint(model, out_dir / "checkpoint_best.tack")
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"checkpoint_{epoch + 1:04d}.tack")

    if out_dir:
        save_checkpoint(model, out_dir / "checkpoint_final.tack")
    log.write({"type": "final", "final_accuracy": final_accuracy, "best_accuracy": best_accuracy})
    log.close()
    if scores_fh:
        scores_fh.close()
    return TrainResult(
        final_accuracy=final_accuracy,
        best_accuracy=best_accuracy,
        epochs=cfg.epochs,
        steps=step,
        param_hash=model.parameter_hash(),
        metrics_path=log.path,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[str, float]
    n_videos: int
    exported: int = 0


def evaluate(
    model: Model,
    dataset: Dataset,
    batch_size: int = 32,
    export_dir: str | Path | None = None,
) -> EvalResult:
    """Top-1 accuracy with deterministic center sampling; optional feature export."""
    ids = [rec.id for rec in dataset.manifest.videos if rec.label is not None]
    if not ids:
        raise UsageError("evaluation needs labeled videos")
    classes = dataset.manifest.classes
    hits = np.zeros(len(classes))
    counts = np.zeros(len(classes))
    exported = 0
    export_dir = Path(export_dir) if export_dir else None
    if export_dir:
        export_dir.mkdir(parents=True, exist_ok=True)
    for lo in range(0, len(ids), batch_size):
        chunk = ids[lo : lo + batch_size]
        batch = make_batch(dataset, chunk, model.cfg.k_tokens, "eval_center")
        res = model.encoder.encode(batch.features, batch.is_source, train=False)
        logits = model.classifier.logits(res.features).data
        pred = logits.argmax(axis=1)
        for row, video_id in enumerate(chunk):
            label = batch.labels[row]
            counts[label] += 1
            hits[label] += float(pred[row] == label)
            if export_dir:
                write_features(res.features.data[row : row + 1], export_dir / f"{video_id}.feat")
                exported += 1
    per_class = {
        classes[i]: (hits[i] / counts[i] if counts[i] else 0.0) for i in range(len(classes))
    }
    return EvalResult(
        accuracy=float(hits.sum() / counts.sum()),
        per_class=per_class,
        n_videos=int(counts.sum()),
        exported=exported,
    )


# ---------------------------------------------------------------------------
# Ablation protocols
# ---------------------------------------------------------------------------

PROTOCOLS = ("components", "losses", "positions")


@dataclass
class AblationRow:
    label: str
    accuracies: list[float]
    mean: float


def _component_variants(enc: EncoderConfig, mask: LossMask):
    adapt = enc.adapt
    return [
        ("standard", replace(enc, adapt_positions=()), mask),
        ("attention", replace(enc, adapt=replace(adapt, use_attention=True, use_ib=False)), mask),
        ("ib", replace(enc, adapt=replace(adapt, use_attention=False, use_ib=True)), mask),
        ("full", replace(enc, adapt=replace(adapt, use_attention=True, use_ib=True)), mask),
    ]


def _loss_variants(enc: EncoderConfig, mask: LossMask):
    rows = [
        ("cls", LossMask(cls=True, entropy=False, adv=False, ib=False)),
        ("cls+ent", LossMask(cls=True, entropy=True, adv=False, ib=False)),
        ("cls+ent+adv", LossMask(cls=True, entropy=True, adv=True, ib=False)),
        ("cls+ent+ib", LossMask(cls=True, entropy=True, adv=False, ib=True)),
        ("cls+ent+adv+ib", LossMask(cls=True, entropy=True, adv=True, ib=True)),
    ]
    return [(label, enc, m) for label, m in rows]


def _position_variants(enc: EncoderConfig, mask: LossMask):
    last = enc.n_layers - 1
    layouts = [
        ("all", tuple(range(enc.n_layers))),
        ("first", (0,)),
        ("even", tuple(i for i in range(enc.n_layers) if i % 2 == 0)),
        ("odd", tuple(i for i in range(enc.n_layers) if i % 2 == 1)),
        ("last", (last,)),
    ]
    return [(label, replace(enc, adapt_positions=pos), mask) for label, pos in layouts]


def run_ablation(
    protocol: str,
    synth_spec: SynthSpec,
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    n_classes: int,
    work_dir: str | Path,
    seeds: tuple[int, ...] = (0, 1, 2),
    cache: dict | None = None,
) -> list[AblationRow]:
    """Train and evaluate every variant of one protocol on synthetic data.

    Each seed gets its own dataset draw and model init. `cache` (keyed by
    seed and resolved config) lets callers share identical runs between
    protocols.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; known: {PROTOCOLS}")
    builders = {
        "components": _component_variants,
        "losses": _loss_variants,
        "positions": _position_variants,
    }
    variants = builders[protocol](enc_cfg, train_cfg.mask)
    work_dir = Path(work_dir)
    cache = cache if cache is not None else {}
    rows = []
    for label, enc_variant, mask_variant in variants:
        accs = []
        for seed in seeds:
            data_dir = work_dir / f"data_seed{seed}"
            if not (data_dir / "train_manifest.jsonl").exists():
                generate(replace(synth_spec, seed=seed), data_dir)
            key = (seed, json.dumps(dataclasses.asdict(enc_variant), sort_keys=True, default=str),
                   json.dumps(dataclasses.asdict(mask_variant), sort_keys=True))
            if key not in cache:
                train_ds = Dataset.open(data_dir / "train_manifest.jsonl")
                test_ds = Dataset.open(data_dir / "test_manifest.jsonl")
                cfg = replace(train_cfg, seed=seed, mask=mask_variant)
                mdl = build_model(enc_variant, n_classes, seed)
                cache[key] = train(mdl, train_ds, test_ds, cfg).final_accuracy
            accs.append(cache[key])
        rows.append(AblationRow(label=label, accuracies=accs, mean=float(np.mean(accs))))
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    return json.dumps(
        [{"label": r.label, "accuracies": r.accuracies, "mean": r.mean} for r in rows],
        indent=2,
        sort_keys=True,
    )
