"""Two-domain synthetic video features with controllable shift.

Each class is a temporal template inside a shared random subspace: a
class-specific frequency and phase traced by sinusoids across frames,
plus a class mean. Single frames are weakly informative; the frequency
code rewards models that relate frames across time. The target domain is
the source construction pushed through a fixed orthogonal rotation
(disjoint random planes, each turned by the same angle), a translation,
and extra noise — at angle 0 with zero extras both domains coincide in
distribution.

Generation is a pure function of the spec, so equal seeds give
byte-identical datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .featureio import Manifest, VideoRecord, write_features


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 6
    feat_dim: int = 64
    frames: tuple[int, int] = (32, 48)
    videos_per_class: int = 60  # per domain, training split
    test_videos_per_class: int = 20
    signal_dims: int = 16
    class_mean_scale: float = 1.0
    temporal_scale: float = 1.6
    noise_scale: float = 0.35
    theta_degrees: float = 60.0
    translation_scale: float = 0.5
    target_noise_scale: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least two classes, got {self.n_classes}")
        if self.signal_dims > self.feat_dim:
            raise ConfigError("signal subspace cannot exceed feat_dim")
        if self.frames[0] < 1 or self.frames[1] < self.frames[0]:
            raise ConfigError(f"bad frame range {self.frames}")


@dataclass
class SynthPaths:
    train_manifest: Path
    test_manifest: Path


def _rotation(rng: np.random.Generator, dim: int, theta_degrees: float) -> np.ndarray:
    """Orthogonal map rotating disjoint random planes, each by the same angle."""
    theta = math.radians(theta_degrees)
    rot = np.eye(dim)
    order = rng.permutation(dim)
    c, s = math.cos(theta), math.sin(theta)
    for p in range(dim // 2):
        i, j = order[2 * p], order[2 * p + 1]
        plane = np.eye(dim)
        plane[i, i] = c
        plane[j, j] = c
        plane[i, j] = -s
        plane[j, i] = s
        rot = plane @ rot
    return rot


class _Generator:
    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        basis = np.linalg.qr(self.rng.standard_normal((spec.feat_dim, spec.signal_dims)))[0]
        self.basis = basis  # [feat_dim, signal_dims], orthonormal columns
        means = self.rng.standard_normal((spec.n_classes, spec.signal_dims))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        self.class_means = spec.class_mean_scale * means @ basis.T
        self.freqs = 1.0 + 0.75 * np.arange(spec.n_classes)
        self.phases = self.rng.uniform(0.0, 2.0 * math.pi, spec.n_classes)
        self.dim_phases = self.rng.uniform(0.0, 2.0 * math.pi, spec.signal_dims)
        self.rotation = _rotation(self.rng, spec.feat_dim, spec.theta_degrees)
        self.translation = spec.translation_scale * self.rng.standard_normal(spec.feat_dim)

    def video(self, label: int, target: bool) -> np.ndarray:
        spec = self.spec
        n = int(self.rng.integers(spec.frames[0], spec.frames[1] + 1))
        t = np.arange(n) / max(n - 1, 1)
        angle = 2.0 * math.pi * self.freqs[label] * t[:, None] + self.phases[label] + self.dim_phases[None, :]
        amp = spec.temporal_scale * (1.0 + 0.1 * self.rng.standard_normal())
        x = amp * np.sin(angle) @ self.basis.T
        x += self.class_means[label]
        x += spec.noise_scale * self.rng.standard_normal((n, spec.feat_dim))
        if target:
            x = x @ self.rotation.T + self.translation
            x += spec.target_noise_scale * self.rng.standard_normal((n, spec.feat_dim))
        return x.astype(np.float32)


def generate(spec: SynthSpec, out_dir: str | Path) -> SynthPaths:
    """Write feature files plus train (source labeled + target unlabeled) and
    test (target labeled) manifests under out_dir."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    gen = _Generator(spec)
    classes = [f"class{i}" for i in range(spec.n_classes)]
    train_videos: list[VideoRecord] = []
    test_videos: list[VideoRecord] = []

    def emit(split: str, domain: str, label: int, index: int, labeled: bool) -> VideoRecord:
        video_id = f"{split}_{domain}_{label}_{index:03d}"
        frames = gen.video(label, target=domain == "target")
        rel = f"features/{video_id}.feat"
        write_features(frames, out_dir / rel)
        return VideoRecord(
            id=video_id,
            path=rel,
            domain=domain,
            n_frames=frames.shape[0],
            label=label if labeled else None,
        )

    for label in range(spec.n_classes):
        for i in range(spec.videos_per_class):
            train_videos.append(emit("train", "source", label, i, labeled=True))
    for label in range(spec.n_classes):
        for i in range(spec.videos_per_class):
            train_videos.append(emit("train", "target", label, i, labeled=False))
    for label in range(spec.n_classes):
        for i in range(spec.test_videos_per_class):
            test_videos.append(emit("test", "target", label, i, labeled=True))

    train_manifest = Manifest("synthetic-train", spec.feat_dim, classes, train_videos)
    test_manifest = Manifest("synthetic-test", spec.feat_dim, classes, test_videos)
    train_path = out_dir / "train_manifest.jsonl"
    test_path = out_dir / "test_manifest.jsonl"
    train_manifest.save(train_path)
    test_manifest.save(test_path)
    return SynthPaths(train_manifest=train_path, test_manifest=test_path)
