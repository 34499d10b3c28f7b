"""Run configuration files: strict YAML loading and preset resolution.

Unknown keys are rejected with their dotted path so typos fail loudly.
Task presets fill batch size, frame count, queue capacity, and the two
adaptation strengths; explicit file values override them. The raw config
bytes are echoed verbatim into each run directory for provenance.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .errors import ConfigError
from .heads import LossMask, LossWeights
from .synth import SynthSpec
from .trainer import PRESETS, TrainConfig
from .transfer import AdaptConfig


@dataclass
class RunConfig:
    task: str | None = None
    train_manifest: str | None = None
    test_manifest: str | None = None
    out: str | None = None
    encoder: dict = field(default_factory=dict)
    adapt: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    loss_mask: dict = field(default_factory=dict)
    loss_weights: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    raw_text: str = ""


_ENCODER_KEYS = {f.name for f in dataclasses.fields(EncoderConfig)} - {"adapt"}
_ADAPT_KEYS = {f.name for f in dataclasses.fields(AdaptConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"weights", "mask"}
_MASK_KEYS = {f.name for f in dataclasses.fields(LossMask)}
_WEIGHT_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthSpec)}
_TOP_KEYS = {"task", "data", "encoder", "train", "losses", "out", "synth", "ablation"}


def _expect_mapping(value, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
    return value


def _take(section: dict, allowed: set[str], where: str) -> dict:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}")
    return dict(section)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    doc = _expect_mapping(doc, str(path))
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown top-level key(s) {sorted(unknown)}; allowed: {sorted(_TOP_KEYS)}")

    data = _take(_expect_mapping(doc.get("data"), "data"), {"train_manifest", "test_manifest"}, "data")
    encoder = _expect_mapping(doc.get("encoder"), "encoder")
    adapt = _take(_expect_mapping(encoder.pop("adapt", None), "encoder.adapt"), _ADAPT_KEYS, "encoder.adapt")
    encoder = _take(encoder, _ENCODER_KEYS, "encoder")
    train = _take(_expect_mapping(doc.get("train"), "train"), _TRAIN_KEYS - {"task"}, "train")
    losses = _expect_mapping(doc.get("losses"), "losses")
    mask = _take(_expect_mapping(losses.get("mask"), "losses.mask"), _MASK_KEYS, "losses.mask")
    weights = _take(_expect_mapping(losses.get("weights"), "losses.weights"), _WEIGHT_KEYS, "losses.weights")
    extra_losses = set(losses) - {"mask", "weights"}
    if extra_losses:
        raise ConfigError(f"losses: unknown key(s) {sorted(extra_losses)}; allowed: ['mask', 'weights']")
    synth = _take(_expect_mapping(doc.get("synth"), "synth"), _SYNTH_KEYS, "synth")
    ablation = _take(_expect_mapping(doc.get("ablation"), "ablation"), {"seeds"}, "ablation")

    task = doc.get("task")
    if task is not None and task not in PRESETS:
        raise ConfigError(f"task: unknown preset {task!r}; known: {sorted(PRESETS)}")
    if "adapt_positions" in encoder and encoder["adapt_positions"] is not None:
        encoder["adapt_positions"] = tuple(encoder["adapt_positions"])
    if "frames" in synth:
        synth["frames"] = tuple(synth["frames"])

    seeds = ablation.get("seeds", [0, 1, 2])
    return RunConfig(
        task=task,
        train_manifest=data.get("train_manifest"),
        test_manifest=data.get("test_manifest"),
        out=doc.get("out"),
        encoder=encoder,
        adapt=adapt,
        train=train,
        loss_mask=mask,
        loss_weights=weights,
        synth=synth,
        ablation_seeds=tuple(int(s) for s in seeds),
        raw_text=text,
    )


def resolve_encoder_config(run: RunConfig, feat_dim: int | None = None) -> EncoderConfig:
    """Merge defaults, task preset, and file values into the encoder config."""
    values: dict = {}
    if run.task:
        preset = PRESETS[run.task]
        values["k_tokens"] = preset.k_tokens
    values.update(run.encoder)
    adapt_values: dict = {}
    if run.task:
        adapt_values["queue_capacity"] = PRESETS[run.task].queue_capacity
    adapt_values.update(run.adapt)
    if feat_dim is not None and "feat_dim" not in values:
        values["feat_dim"] = feat_dim
    if "feat_dim" not in values:
        raise ConfigError("encoder.feat_dim missing and no manifest to infer it from")
    if "k_tokens" not in values:
        raise ConfigError("encoder.k_tokens missing (set it or pick a task preset)")
    try:
        return EncoderConfig(adapt=AdaptConfig(**adapt_values), **values)
    except TypeError as exc:
        raise ConfigError(f"encoder: {exc}") from None


def resolve_train_config(run: RunConfig) -> TrainConfig:
    """Merge defaults, task preset, and file values into the train config."""
    values: dict = {"task": run.task}
    if run.task:
        preset = PRESETS[run.task]
        values["batch_size"] = preset.batch_size
        values["adv_grl_weight"] = preset.adv_grl_weight
    values.update(run.train)
    weight_values = {"ib": PRESETS[run.task].ib_weight} if run.task else {}
    weight_values.update(run.loss_weights)
    try:
        return TrainConfig(
            weights=LossWeights(**weight_values),
            mask=LossMask(**run.loss_mask),
            **values,
        )
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None


def resolve_synth_spec(run: RunConfig) -> SynthSpec:
    try:
        return SynthSpec(**run.synth)
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from None


def load_synth_spec(path: str | Path) -> SynthSpec:
    """A synth spec file is the bare `synth` section of a run config."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    doc = _take(_expect_mapping(doc, str(path)), _SYNTH_KEYS, str(path))
    if "frames" in doc:
        doc["frames"] = tuple(doc["frames"])
    return SynthSpec(**doc)


def echo_config(run: RunConfig, out_dir: Path) -> None:
    """Write the raw config bytes into the run directory, byte-identical."""
    (out_dir / "config.yaml").write_text(run.raw_text)


def resolved_summary(enc: EncoderConfig, train_cfg: TrainConfig) -> dict:
    """The fully resolved settings, for the run report."""
    return {
        "task": train_cfg.task,
        "batch_size": train_cfg.batch_size,
        "k_tokens": enc.k_tokens,
        "queue_capacity": enc.adapt.queue_capacity,
        "ib_weight": train_cfg.weights.ib,
        "adv_grl_weight": train_cfg.adv_grl_weight,
        "lr": train_cfg.lr,
        "weight_decay": train_cfg.weight_decay,
        "epochs": train_cfg.epochs,
        "seed": train_cfg.seed,
        "d_model": enc.d_model,
        "n_heads": enc.n_heads,
        "n_layers": enc.n_layers,
        "adapt_positions": list(enc.positions),
    }
