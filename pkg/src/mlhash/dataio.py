"""Feature datasets: synthetic clusters, the MLHF container, and splits."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import stream

MAGIC = b"MLHF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
# refuse headers describing more than this many float64 features
MAX_ELEMENTS = 1 << 34

TRAIN, QUERY, DATABASE = 0, 1, 2
TAG_NAMES = {TRAIN: "train", QUERY: "query", DATABASE: "database"}


class FormatError(ValueError):
    """Malformed artifact file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class UnrecognizedFormat(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class DimensionOverflow(FormatError):
    pass


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


@dataclass
class FeatureDataset:
    features: np.ndarray  # n x feature_dim float64
    labels: np.ndarray  # n x c uint8 multi-hot
    tags: np.ndarray  # n int8, one of TRAIN / QUERY / DATABASE

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.tags is None:
            self.tags = np.full(len(self.features), DATABASE, dtype=np.int8)
        self.tags = np.asarray(self.tags, dtype=np.int8)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise ValueError("features and labels must be 2-D")
        if not (len(self.features) == len(self.labels) == len(self.tags)):
            raise ValueError("features, labels and tags disagree on n")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if len(self.labels) and not np.all(self.labels.sum(axis=1) >= 1):
            raise ValueError("every sample needs at least one label")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def c(self) -> int:
        return self.labels.shape[1]

    def subset(self, tag: int) -> "FeatureDataset":
        keep = self.tags == tag
        return FeatureDataset(self.features[keep], self.labels[keep], self.tags[keep])

    def primary_class(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.tags, other.tags))


def synth_clusters(c: int, n_per_class: int, feature_dim: int, spread: float,
                   seed: int = 0, multi_label_fraction: float = 0.0) -> FeatureDataset:
    """Gaussian clusters around ``c`` random unit-norm means.

    Means come from their own stream, so they depend on ``(seed, c,
    feature_dim)`` only. With ``multi_label_fraction > 0`` that fraction of
    samples also carries a second, different label.
    """
    if spread <= 0:
        raise ValueError("spread must be positive")
    means = stream(seed, "cluster-means").standard_normal((c, feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    cls = np.repeat(np.arange(c), n_per_class)
    noise = stream(seed, "cluster-noise").standard_normal((len(cls), feature_dim))
    features = means[cls] + spread * noise
    labels = np.zeros((len(cls), c), dtype=np.uint8)
    labels[np.arange(len(cls)), cls] = 1
    if multi_label_fraction > 0:
        rng = stream(seed, "multi-label")
        pick = rng.random(len(cls)) < multi_label_fraction
        other = (cls + rng.integers(1, c, size=len(cls))) % c
        labels[np.flatnonzero(pick), other[pick]] = 1
    return FeatureDataset(features, labels, None)


def _round_robin(ids: np.ndarray, classes: np.ndarray, count: int) -> np.ndarray:
    """Take ``count`` ids cycling over classes so per-class counts differ by <= 1."""
    buckets = [list(ids[classes[ids] == k]) for k in np.unique(classes[ids])]
    taken = []
    pos = 0
    while len(taken) < count:
        progressed = False
        for b in buckets:
            if pos < len(b) and len(taken) < count:
                taken.append(b[pos])
                progressed = True
        if not progressed:
            break
        pos += 1
    return np.asarray(taken, dtype=np.intp)


def split(dataset: FeatureDataset, n_query: int, n_train: int, seed: int = 0) -> FeatureDataset:
    """Tag disjoint query and train sets; everything else is database.

    Both selections are stratified by primary label.
    """
    if n_query < 0 or n_train < 0 or n_query + n_train > dataset.n:
        raise ValueError("n_query + n_train must not exceed n")
    classes = dataset.primary_class()
    ids = stream(seed, "split").permutation(dataset.n)
    tags = np.full(dataset.n, DATABASE, dtype=np.int8)
    query = _round_robin(ids, classes, n_query)
    tags[query] = QUERY
    rest = ids[tags[ids] == DATABASE]
    train = _round_robin(rest, classes, n_train)
    tags[train] = TRAIN
    return replace(dataset, tags=tags)


def save_features(dataset: FeatureDataset, path) -> None:
    n, dim, c = dataset.n, dataset.feature_dim, dataset.c
    packed = np.packbits(dataset.labels, axis=1, bitorder="little") if n else b""
    payload = (_HEADER.pack(MAGIC, VERSION, n, dim, c)
               + dataset.features.astype("<f8").tobytes()
               + np.asarray(packed, dtype=np.uint8).tobytes())
    atomic_write_bytes(Path(path), payload)


def load_features(path) -> FeatureDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise UnrecognizedFormat("unrecognized format (expected MLHF)", 0)
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"truncated at offset {len(raw)}", len(raw))
    _, version, n, dim, c = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported feature-file version {version}", 4)
    if n * dim > MAX_ELEMENTS or c == 0:
        raise DimensionOverflow(f"dimension overflow: n={n} dim={dim} c={c}", 8)
    label_bytes = (c + 7) // 8
    feat_end = _HEADER.size + 8 * n * dim
    end = feat_end + n * label_bytes
    if len(raw) < end:
        raise TruncatedFile(f"truncated at offset {len(raw)} (need {end} bytes)", len(raw))
    if len(raw) > end:
        raise FormatError(f"trailing data at offset {end}", end)
    features = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=_HEADER.size).reshape(n, dim)
    packed = np.frombuffer(raw, dtype=np.uint8, count=n * label_bytes, offset=feat_end)
    labels = np.unpackbits(packed.reshape(n, label_bytes), axis=1, count=c, bitorder="little")
    return FeatureDataset(features.astype(np.float64), labels, None)
