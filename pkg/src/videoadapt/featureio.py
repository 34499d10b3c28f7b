"""On-disk features, frame sampling, and batch assembly.

Feature files are a fixed 32-byte header followed by a row-major
little-endian float32 payload:

    offset  size  field
    0       4     magic ``TFAT``
    4       2     format version (u16, currently 1)
    6       1     dtype code (u8, 0 = float32)
    7       1     reserved
    8       8     n_frames (u64)
    16      8     feat_dim (u64)
    24      4     CRC32 of the payload (u32)
    28      4     reserved

Manifests are line-delimited JSON: the first line describes the dataset
(name, feat_dim, class list), each following line one video (id, relative
path, domain, n_frames, optional label). Readers may share files freely;
writing is single-writer per file.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    DataError,
    FormatError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)

MAGIC = b"TFAT"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0
_HEADER = struct.Struct("<4sHBBQQI4x")

SOURCE = "source"
TARGET = "target"


def write_features(frames: np.ndarray, path: str | Path) -> None:
    """Write one video's [n_frames, feat_dim] float32 matrix; lossless on bits."""
    arr = np.ascontiguousarray(frames, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError("feature matrix contains non-finite values")
    payload = arr.tobytes()
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, DTYPE_FLOAT32, 0, arr.shape[0], arr.shape[1], zlib.crc32(payload)
    )
    Path(path).write_bytes(header + payload)


def _parse_header(raw: bytes, path) -> tuple[int, int, int]:
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, dtype, _, n_frames, feat_dim, crc = _HEADER.unpack(raw[: _HEADER.size])
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    return n_frames, feat_dim, crc


def read_header(path: str | Path) -> tuple[int, int, int]:
    """Return (n_frames, feat_dim, payload_crc) without reading the payload."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw, path)


def read_features(path: str | Path) -> np.ndarray:
    """Read a feature file back as a float32 [n_frames, feat_dim] matrix."""
    raw = Path(path).read_bytes()
    n_frames, feat_dim, crc = _parse_header(raw, path)
    payload = raw[_HEADER.size :]
    expected = n_frames * feat_dim * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload CRC mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(n_frames, feat_dim).copy()


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class VideoRecord:
    id: str
    path: str
    domain: str
    n_frames: int
    label: int | None = None


@dataclass
class Manifest:
    dataset: str
    feat_dim: int
    classes: list[str]
    videos: list[VideoRecord] = field(default_factory=list)

    def __post_init__(self):
        for rec in self.videos:
            _check_record(rec)

    def by_id(self) -> dict[str, VideoRecord]:
        return {rec.id: rec for rec in self.videos}

    def ids(self, domain: str | None = None) -> list[str]:
        return [rec.id for rec in self.videos if domain is None or rec.domain == domain]

    def save(self, path: str | Path) -> None:
        lines = [json.dumps({"dataset": self.dataset, "feat_dim": self.feat_dim, "classes": self.classes})]
        for rec in self.videos:
            entry = {"id": rec.id, "path": rec.path, "domain": rec.domain, "n_frames": rec.n_frames}
            if rec.label is not None:
                entry["label"] = rec.label
            lines.append(json.dumps(entry))
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path: str | Path) -> "Manifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise DataError(f"{path}: empty manifest")
        head = json.loads(lines[0])
        videos = []
        for i, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            entry = json.loads(line)
            try:
                rec = VideoRecord(
                    id=entry["id"],
                    path=entry["path"],
                    domain=entry["domain"],
                    n_frames=int(entry["n_frames"]),
                    label=entry.get("label"),
                )
            except KeyError as exc:
                raise DataError(f"{path}:{i}: missing manifest key {exc}") from None
            _check_record(rec, where=f"{path}:{i}")
            videos.append(rec)
        return Manifest(
            dataset=head["dataset"],
            feat_dim=int(head["feat_dim"]),
            classes=list(head["classes"]),
            videos=videos,
        )


def _check_record(rec: VideoRecord, where: str = "") -> None:
    prefix = f"{where}: " if where else ""
    if rec.domain not in (SOURCE, TARGET):
        raise DataError(f"{prefix}domain must be '{SOURCE}' or '{TARGET}', got {rec.domain!r}")
    if rec.n_frames < 1:
        raise DataError(f"{prefix}n_frames must be >= 1, got {rec.n_frames}")
    if rec.domain == SOURCE and rec.label is None:
        raise DataError(f"{prefix}source video {rec.id!r} has no label")


class Dataset:
    """A manifest bound to the directory its relative feature paths live in.

    Loaded frame matrices are memoized (desk-scale datasets fit in memory);
    pass cache=False to re-read files on every access.
    """

    def __init__(self, manifest: Manifest, root: str | Path, cache: bool = True):
        self.manifest = manifest
        self.root = Path(root)
        self._index = manifest.by_id()
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    @staticmethod
    def open(manifest_path: str | Path, cache: bool = True) -> "Dataset":
        manifest_path = Path(manifest_path)
        return Dataset(Manifest.load(manifest_path), manifest_path.parent, cache=cache)

    def record(self, video_id: str) -> VideoRecord:
        return self._index[video_id]

    def load_frames(self, video_id: str) -> np.ndarray:
        if self._cache is not None and video_id in self._cache:
            return self._cache[video_id]
        rec = self._index[video_id]
        frames = read_features(self.root / rec.path)
        if frames.shape != (rec.n_frames, self.manifest.feat_dim):
            raise DataError(
                f"{rec.path}: file shape {frames.shape} disagrees with manifest "
                f"({rec.n_frames}, {self.manifest.feat_dim})"
            )
        if self._cache is not None:
            self._cache[video_id] = frames
        return frames

    def validate(self) -> None:
        """Check every referenced file exists and its header matches the manifest."""
        for rec in self.manifest.videos:
            path = self.root / rec.path
            if not path.exists():
                raise DataError(f"{rec.id}: missing feature file {path}")
            n_frames, feat_dim, _ = read_header(path)
            if (n_frames, feat_dim) != (rec.n_frames, self.manifest.feat_dim):
                raise DataError(
                    f"{rec.id}: header ({n_frames}, {feat_dim}) disagrees with manifest "
                    f"({rec.n_frames}, {self.manifest.feat_dim})"
                )


# ---------------------------------------------------------------------------
# Frame sampling
# ---------------------------------------------------------------------------


def segment_sample(
    n_frames: int,
    k: int,
    mode: str,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Pick one frame per segment; segment i covers [floor(i*n/k), floor((i+1)*n/k)).

    ``train_random`` draws uniformly inside each segment, ``eval_center``
    takes the middle frame. An empty segment (n < k) falls back to the frame
    at its start boundary, which repeats the nearest prior valid frame.
    """
    if n_frames < 1 or k < 1:
        raise DataError(f"need n_frames >= 1 and k >= 1, got {n_frames}, {k}")
    if mode not in ("train_random", "eval_center"):
        raise DataError(f"unknown sampling mode {mode!r}")
    if mode == "train_random" and rng is None:
        raise DataError("train_random sampling requires an rng")
    out = np.empty(k, dtype=np.int64)
    for i in range(k):
        lo = (i * n_frames) // k
        hi = ((i + 1) * n_frames) // k
        if hi <= lo:
            out[i] = min(lo, n_frames - 1)
        elif mode == "eval_center":
            out[i] = (lo + hi - 1) // 2
        else:
            out[i] = int(rng.integers(lo, hi))
    return out


def sliding_window(n_frames: int, window: int = 16) -> np.ndarray:
    """Index windows for clip-level feature expansion.

    Frame p maps to positions p - (window//2 - 1) .. p + window//2; out-of-range
    slots are -1, meaning zero padding. Returns an [n_frames, window] index array.
    """
    if window < 1:
        raise DataError(f"window must be >= 1, got {window}")
    offsets = np.arange(-(window // 2 - 1), window - (window // 2 - 1))
    idx = np.arange(n_frames)[:, None] + offsets[None, :]
    idx[(idx < 0) | (idx >= n_frames)] = -1
    return idx


def expand_clip_features(raw: np.ndarray, clip_fn, window: int = 16) -> np.ndarray:
    """Apply a user-supplied clip-level function over zero-padded sliding windows."""
    n = raw.shape[0]
    windows = sliding_window(n, window)
    rows = []
    for p in range(n):
        clip = np.zeros((window, raw.shape[1]), dtype=raw.dtype)
        valid = windows[p] >= 0
        clip[valid] = raw[windows[p][valid]]
        rows.append(np.asarray(clip_fn(clip)))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # [B, k, feat_dim] float64
    labels: np.ndarray  # int64, -1 where the manifest has no label
    is_source: np.ndarray  # bool per video


def make_batch(
    dataset: Dataset,
    ids: list[str],
    k: int,
    mode: str,
    rng: np.random.Generator | None = None,
) -> Batch:
    """Stack k sampled frames per video; deterministic given (ids order, rng state, mode)."""
    feats = np.empty((len(ids), k, dataset.manifest.feat_dim), dtype=np.float64)
    labels = np.full(len(ids), -1, dtype=np.int64)
    is_source = np.zeros(len(ids), dtype=bool)
    for row, video_id in enumerate(ids):
        rec = dataset.record(video_id)
        frames = dataset.load_frames(video_id)
        picks = segment_sample(rec.n_frames, k, mode, rng)
        feats[row] = frames[picks]
        if rec.label is not None:
            labels[row] = rec.label
        is_source[row] = rec.domain == SOURCE
    return Batch(ids=list(ids), features=feats, labels=labels, is_source=is_source)
