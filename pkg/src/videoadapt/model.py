"""Full model assembly, parameter accounting, and checkpoints.

A checkpoint is one file: a JSON header line carrying the configuration
echo and the tensor directory, followed by each named tensor serialized
in the same binary container as feature files (parameters are stored as
float32, which is fine for evaluation and warm starts).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import featureio
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderModel
from .errors import FormatError
from .heads import AdversarialHead, ClassifierHead
from .transfer import AdaptConfig

CHECKPOINT_FORMAT = "videoadapt-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Model:
    encoder: EncoderModel
    classifier: ClassifierHead
    adversary: AdversarialHead

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    def parameters(self) -> dict[str, Tensor]:
        out = self.encoder.parameters()
        out.update(self.classifier.parameters())
        out.update(self.adversary.parameters())
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.parameters().items() if t.requires_grad}

    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.trainable_parameters().values())

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.parameters()):
            digest.update(name.encode())
            digest.update(self.parameters()[name].data.tobytes())
        return digest.hexdigest()


def build_model(
    cfg: EncoderConfig,
    n_classes: int,
    seed: int,
    classifier_frozen: bool = True,
    classifier_hidden: bool = False,
) -> Model:
    rng = np.random.default_rng(seed)
    encoder = EncoderModel(cfg, rng)
    classifier = ClassifierHead(cfg.d_model, n_classes, rng, frozen=classifier_frozen, hidden=classifier_hidden)
    adversary = AdversarialHead(cfg.d_model, rng)
    return Model(encoder=encoder, classifier=classifier, adversary=adversary)


def expected_trainable_count(
    cfg: EncoderConfig,
    n_classes: int,
    classifier_frozen: bool = True,
    classifier_hidden: bool = False,
) -> int:
    """Closed-form trainable-parameter count, independent of construction."""
    d, r, dh = cfg.d_model, cfg.mlp_ratio, cfg.head_width
    total = cfg.feat_dim * d + d + d * d + d  # embedding MLP
    if cfg.positional == "learned":
        total += cfg.k_tokens * d
    per_block = 4 * (d * d + d) + 4 * d + (d * r * d + r * d + r * d * d + d)
    total += cfg.n_layers * per_block
    if cfg.adapt.use_attention:
        disc = dh * dh + dh + dh + 1
        total += len(cfg.positions) * disc
    half = max(d // 2, 1)
    total += d * half + half + half + 1  # adversarial head
    if not classifier_frozen:
        if classifier_hidden:
            total += d * d + d
        total += d * n_classes + n_classes
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _encode_tensor(arr: np.ndarray) -> bytes:
    mat = np.ascontiguousarray(arr if arr.ndim == 2 else arr.reshape(1, -1), dtype="<f4")
    payload = mat.tobytes()
    header = struct.Struct("<4sHBBQQI4x").pack(
        featureio.MAGIC, featureio.FORMAT_VERSION, featureio.DTYPE_FLOAT32, 0,
        mat.shape[0], mat.shape[1], zlib.crc32(payload),
    )
    return header + payload


def save_checkpoint(model: Model, path: str | Path, extra: dict | None = None) -> None:
    params = model.parameters()
    names = sorted(params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_config": _config_dict(model.cfg),
        "n_classes": model.classifier.n_classes,
        "classifier_frozen": model.classifier.frozen,
        "classifier_hidden": model.classifier.hidden,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    if extra:
        header["extra"] = extra
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode())
    buf.write(b"\n")
    for name in names:
        buf.write(_encode_tensor(params[name].data))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header line")
    header = json.loads(raw[:nl])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg = _config_from_dict(header["encoder_config"])
    model = build_model(
        cfg,
        n_classes=header["n_classes"],
        seed=0,
        classifier_frozen=header["classifier_frozen"],
        classifier_hidden=header["classifier_hidden"],
    )
    params = model.parameters()
    offset = nl + 1
    head_size = struct.calcsize("<4sHBBQQI4x")
    for entry in header["tensors"]:
        block_header = raw[offset : offset + head_size]
        if len(block_header) < head_size:
            raise FormatError(f"{path}: truncated tensor block for {entry['name']}")
        _, _, _, _, rows, cols, crc = struct.unpack("<4sHBBQQI4x", block_header)
        offset += head_size
        nbytes = rows * cols * 4
        payload = raw[offset : offset + nbytes]
        if len(payload) < nbytes:
            raise FormatError(f"{path}: truncated payload for {entry['name']}")
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{path}: checksum mismatch for {entry['name']}")
        offset += nbytes
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        target = params[entry["name"]]
        target.data = arr.reshape(tuple(entry["shape"]))
    return model


def _config_dict(cfg: EncoderConfig) -> dict:
    out = asdict(cfg)
    out["adapt_positions"] = list(cfg.positions)
    out["adapt"]["grl_weight"] = cfg.adapt.grl_weight
    return out


def _config_from_dict(d: dict) -> EncoderConfig:
    adapt = AdaptConfig(**d.pop("adapt"))
    positions = d.pop("adapt_positions", None)
    return EncoderConfig(
        adapt=adapt,
        adapt_positions=tuple(positions) if positions is not None else None,
        **d,
    )
