"""Feature sequences, on-disk formats, average pooling and synthetic data.

Feature file layout (little-endian)::

    b"HVFT"  u32 version=1  u32 T  u32 dim  u8 stream (0 spatial, 1 motion)
    T*dim float32, row-major by frame

A manifest is a JSON document listing the class names and, per video, its id,
its positive class ids and the paths (relative to the manifest) of its two
feature files.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import make_rng

STREAMS = ("spatial", "motion")
FEATURE_MAGIC = b"HVFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIB")
MANIFEST_FORMAT = "hybridvc-manifest"


class DataError(Exception):
    """Base class for malformed or inconsistent input data."""


class MissingFileError(DataError):
    pass


class BadMagicError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class LabelError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    frames: np.ndarray
    stream: str = "spatial"

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DimensionMismatchError(f"frames must be a non-empty T x dim array, got shape {frames.shape}")
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream tag {self.stream!r}")
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class VideoSample:
    id: str
    spatial: FeatureSequence
    motion: FeatureSequence
    label: np.ndarray

    def __post_init__(self):
        label = np.asarray(self.label)
        if label.ndim != 1 or not np.isin(label, (0, 1)).all():
            raise LabelError(f"video {self.id}: label must be a 0/1 vector")
        label = label.astype(np.int8)
        label.flags.writeable = False
        object.__setattr__(self, "label", label)

    @property
    def num_classes(self) -> int:
        return self.label.shape[0]

    @property
    def class_index(self) -> int:
        """Index of the first positive class (the class, for single-label data)."""
        pos = np.flatnonzero(self.label)
        if pos.size == 0:
            raise LabelError(f"video {self.id} has no positive label")
        return int(pos[0])


def one_hot(index: int, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.int8)
    y[index] = 1
    return y


def average_pool(seq: FeatureSequence | np.ndarray) -> np.ndarray:
    """Mean over frames; the result has one entry per feature dimension."""
    frames = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("cannot pool an empty sequence")
    return frames.mean(axis=0)


def pooled_arrays(samples: list[VideoSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack pooled spatial features, pooled motion features and label vectors."""
    if not samples:
        raise ValueError("no samples")
    xs = np.stack([average_pool(s.spatial) for s in samples])
    xm = np.stack([average_pool(s.motion) for s in samples])
    y = np.stack([s.label for s in samples]).astype(np.float64)
    return xs, xm, y


def check_consistent(samples: list[VideoSample]) -> None:
    """Raise DimensionMismatchError unless all samples share stream dims and class count."""
    if not samples:
        return
    ref = samples[0]
    for s in samples:
        if s.spatial.dim != ref.spatial.dim or s.motion.dim != ref.motion.dim:
            raise DimensionMismatchError(
                f"video {s.id}: feature dims ({s.spatial.dim}, {s.motion.dim}) differ from "
                f"({ref.spatial.dim}, {ref.motion.dim}) of video {ref.id}"
            )
        if s.num_classes != ref.num_classes:
            raise DimensionMismatchError(f"video {s.id}: label length {s.num_classes} != {ref.num_classes}")


# -- feature files -----------------------------------------------------------


def write_feature_file(path, seq: FeatureSequence) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    T, dim = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, dim, STREAMS.index(seq.stream)))
        fh.write(frames.tobytes())


def read_feature_file(path) -> FeatureSequence:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"feature file not found: {path}") from None
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, T, dim, tag = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if T < 1 or dim < 1:
        raise DataError(f"{path}: empty sequence (T={T}, dim={dim})")
    if tag >= len(STREAMS):
        raise DataError(f"{path}: unknown stream tag {tag}")
    expected = _HEADER.size + 4 * T * dim
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for T={T}, dim={dim}, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, dim).astype(np.float64)
    if not np.isfinite(frames).all():
        raise DataError(f"{path}: non-finite feature values")
    return FeatureSequence(frames, STREAMS[tag])


# -- manifests ---------------------------------------------------------------


def write_dataset(directory, name: str, samples: list[VideoSample], class_names: list[str]) -> Path:
    """Write feature files under ``directory/name/`` and the manifest ``directory/name.json``."""
    directory = Path(directory)
    feat_dir = directory / name
    feat_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        if s.num_classes != len(class_names):
            raise LabelError(f"video {s.id}: label length {s.num_classes} != {len(class_names)} classes")
        rec = {"id": s.id, "labels": [int(i) for i in np.flatnonzero(s.label)]}
        for stream in STREAMS:
            rel = f"{name}/{s.id}.{stream}.hvft"
            write_feature_file(directory / rel, getattr(s, stream))
            rec[stream] = rel
        records.append(rec)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "num_classes": len(class_names),
        "class_names": list(class_names),
        "videos": records,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_manifest(path) -> tuple[list[str], list[VideoSample]]:
    """Read a manifest and every feature file it references.

    Returns the class names and the validated samples.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a {MANIFEST_FORMAT} document")
    C = doc.get("num_classes")
    names = doc.get("class_names") or [f"class{i}" for i in range(C or 0)]
    if not isinstance(C, int) or C < 1 or len(names) != C:
        raise DataError(f"{path}: num_classes and class_names disagree")
    videos = doc.get("videos", [])
    if not videos:
        warnings.warn(f"manifest {path} lists no videos", stacklevel=2)
        return list(names), []

    samples: list[VideoSample] = []
    seen: set[str] = set()
    for rec in videos:
        vid = str(rec.get("id", "?"))
        if vid in seen:
            raise DataError(f"video {vid}: duplicate id in {path}")
        seen.add(vid)
        labels = rec.get("labels", [])
        if not labels:
            raise LabelError(f"video {vid}: no positive label")
        if any(not isinstance(c, int) or c < 0 or c >= C for c in labels) or len(set(labels)) != len(labels):
            raise LabelError(f"video {vid}: labels {labels} must be distinct class ids in [0, {C})")
        streams = {}
        for stream in STREAMS:
            if stream not in rec:
                raise DataError(f"video {vid}: missing {stream} feature path")
            fpath = path.parent / rec[stream]
            try:
                seq = read_feature_file(fpath)
            except DataError as exc:
                raise type(exc)(f"video {vid}: {exc}") from None
            if seq.stream != stream:
                raise DataError(f"video {vid}: {fpath} is tagged {seq.stream}, expected {stream}")
            streams[stream] = seq
        y = np.zeros(C, dtype=np.int8)
        y[labels] = 1
        samples.append(VideoSample(vid, streams["spatial"], streams["motion"], y))
    check_consistent(samples)
    return list(names), samples


def load_dataset(path) -> list[VideoSample]:
    return load_manifest(path)[1]


# -- synthetic data ----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic two-stream dataset.

    ``temporal`` encodes the class in the order of shared segment prototypes,
    so pooled features carry no class information. ``correlation`` puts a
    class code on ``shared_dims`` dimensions of both streams plus separate
    codes on ``unique_dims`` dimensions of each stream; the remaining
    dimensions are nuisance: per-video values of scale ``nuisance`` that carry
    no class information. With both flags set the spatial stream carries the
    order signal and the motion stream the pooled signal, and each signal is
    erased independently per video with probability ``dropout``.
    """

    classes: int = 2
    train_per_class: int = 50
    test_per_class: int = 50
    t_min: int = 6
    t_max: int = 10
    d_s: int = 8
    d_m: int = 8
    temporal: bool = True
    correlation: bool = False
    noise: float = 0.3
    seed: int = 0
    segments: int = 2
    shared_dims: int = 2
    unique_dims: int = 2
    signal: float = 1.0
    nuisance: float = 1.0
    dropout: float = 0.0

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.d_s < 2 or self.d_m < 2:
            raise ValueError("stream dims must be >= 2")
        if self.t_min < 1 or self.t_max < self.t_min:
            raise ValueError(f"invalid length range [{self.t_min}, {self.t_max}]")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ValueError("sample counts must be non-negative")
        if self.noise < 0 or self.nuisance < 0 or not 0 <= self.dropout <= 1:
            raise ValueError("noise and nuisance must be >= 0 and dropout in [0, 1]")
        if not (self.temporal or self.correlation):
            raise ValueError("at least one of temporal/correlation mode must be set")
        if self.temporal:
            if self.t_min < max(2, self.segments):
                raise ValueError(f"temporal mode needs t_min >= max(2, segments={self.segments})")
            if self.classes > math.factorial(self.segments):
                raise ValueError(
                    f"{self.classes} classes need distinct orders of {self.segments} segments "
                    f"but only {math.factorial(self.segments)} exist"
                )
        if self.correlation:
            need = self.shared_dims + self.unique_dims
            room = self.d_m if self.temporal else min(self.d_s, self.d_m)
            if self.shared_dims < 0 or self.unique_dims < 0 or not 1 <= need <= room:
                raise ValueError(f"signal dims ({self.shared_dims} shared + {self.unique_dims} unique) do not fit {room} stream dims")


@dataclass
class _Codebook:
    protos: dict = field(default_factory=dict)  # stream -> segments x dim
    orders: list = field(default_factory=list)  # class -> segment permutation
    codes: dict = field(default_factory=dict)  # stream -> classes x dim (zero outside signal dims)


def _codebook(spec: SynthSpec, rng: np.random.Generator) -> _Codebook:
    book = _Codebook()
    if spec.temporal:
        book.orders = list(itertools.islice(itertools.permutations(range(spec.segments)), spec.classes))
        streams = ("spatial",) if spec.correlation else STREAMS
        for stream in streams:
            d = spec.d_s if stream == "spatial" else spec.d_m
            book.protos[stream] = rng.normal(0.0, spec.signal, size=(spec.segments, d))
    if spec.correlation:
        C, k, u = spec.classes, spec.shared_dims, spec.unique_dims
        shared = rng.normal(0.0, spec.signal, size=(C, k))
        streams = ("motion",) if spec.temporal else STREAMS
        for stream in streams:
            d = spec.d_s if stream == "spatial" else spec.d_m
            code = np.zeros((C, d))
            if spec.temporal:
                code[:, : k + u] = rng.normal(0.0, spec.signal, size=(C, k + u))
            else:
                code[:, :k] = shared
                code[:, k : k + u] = rng.normal(0.0, spec.signal, size=(C, u))
            book.codes[stream] = code
    return book


def _segment_lengths(T: int, segments: int, rng: np.random.Generator) -> np.ndarray:
    # exchangeable split: one frame per segment plus a symmetric multinomial share of the rest
    return 1 + rng.multinomial(T - segments, np.full(segments, 1.0 / segments))


def _make_stream(spec, book, stream, c, T, rng, erase_order, erase_code) -> FeatureSequence:
    d = spec.d_s if stream == "spatial" else spec.d_m
    frames = np.zeros((T, d))
    if stream in book.protos:
        protos = book.protos[stream]
        if erase_order:
            frames += protos.mean(axis=0)
        else:
            lengths = _segment_lengths(T, spec.segments, rng)
            frames += np.repeat(protos[list(book.orders[c])], lengths, axis=0)
    if stream in book.codes and not erase_code:
        frames += book.codes[stream][c]
    if stream in book.codes:
        # per-video offset shared by all frames: jitter on signal dims, nuisance elsewhere
        n_sig = spec.shared_dims + spec.unique_dims
        scale = np.full(d, spec.nuisance)
        scale[:n_sig] = spec.noise
        frames += rng.normal(0.0, 1.0, size=d) * scale
    frames += rng.normal(0.0, spec.noise, size=(T, d))
    # round through float32 so that files written by write_dataset reload bit-exactly
    return FeatureSequence(frames.astype(np.float32).astype(np.float64), stream)


def _make_split(spec, book, rng, per_class, prefix) -> list[VideoSample]:
    out = []
    for i in range(per_class * spec.classes):
        c = i % spec.classes
        T = int(rng.integers(spec.t_min, spec.t_max + 1))
        erase_order = bool(rng.random() < spec.dropout)
        erase_code = bool(rng.random() < spec.dropout)
        seqs = {s: _make_stream(spec, book, s, c, T, rng, erase_order, erase_code) for s in STREAMS}
        out.append(VideoSample(f"{prefix}-{i:05d}", seqs["spatial"], seqs["motion"], one_hot(c, spec.classes)))
    return out


def synthesize(spec: SynthSpec) -> tuple[list[VideoSample], list[VideoSample]]:
    """Generate deterministic (train, test) splits for ``spec``."""
    spec.validate()
    rng = make_rng(spec.seed)
    book = _codebook(spec, rng)
    train = _make_split(spec, book, rng, spec.train_per_class, "train")
    test = _make_split(spec, book, rng, spec.test_per_class, "test")
    return train, test


def class_names_for(n: int) -> list[str]:
    return [f"class{i}" for i in range(n)]


def stratified_split(samples: list[VideoSample], fraction: float, seed: int) -> tuple[list[VideoSample], list[VideoSample]]:
    """Split off roughly ``fraction`` of each class; returns (rest, held_out)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    rng = make_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.class_index, []).append(i)
    held = set()
    for c in sorted(by_class):
        idx = by_class[c]
        k = max(1, int(round(fraction * len(idx))))
        held.update(idx[j] for j in rng.permutation(len(idx))[:k])
    rest = [s for i, s in enumerate(samples) if i not in held]
    out = [s for i, s in enumerate(samples) if i in held]
    return rest, out
