"""Signal preprocessing, synthetic sEMG generation and dataset file IO.

Raw recordings are ``(num_samples, num_channels)`` arrays. Features handed to
the network are RMS sequences of shape ``(seq_len, channels)``; one such block
plus its gesture label and posture id forms a :class:`GestureSample`.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DATASET_MAGIC = b"SPKG"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


class SignalError(ValueError):
    """Raised when a preprocessing precondition is violated."""


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be decoded.

    Attributes:
        field: name of the header field or section that failed validation.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class RawRecording:
    samples: np.ndarray
    sample_rate_hz: int = 2000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise SignalError("recording must be a non-empty (num_samples, channels) matrix")
        if not np.all(np.isfinite(samples)):
            raise SignalError("recording contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise SignalError("sample_rate_hz must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def channel_count(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class GestureSample:
    features: np.ndarray
    label: int
    domain_id: int = 0
    num_classes: int = 10
    sample_id: int = 0

    def __post_init__(self):
        if not 0 <= self.label < self.num_classes:
            raise SignalError(f"label {self.label} outside [0, {self.num_classes})")
        if self.domain_id < 0:
            raise SignalError("domain_id must be non-negative")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    num_domains: int = 3
    samples_per_class_per_domain: int = 20
    seq_len: int = 200
    channel_count: int = 8
    noise_std: float = 0.25
    domain_mixing_strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "num_domains", "samples_per_class_per_domain",
                     "seq_len", "channel_count"):
            if int(getattr(self, name)) < 1:
                raise SignalError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise SignalError("noise_std must be non-negative")
        if not 0.0 <= self.domain_mixing_strength <= 1.0:
            raise SignalError("domain_mixing_strength must lie in [0, 1]")
        if not 0 <= int(self.seed) < 2**64:
            raise SignalError("seed must be an unsigned 64-bit integer")


@dataclass
class Dataset:
    """Columnar storage for a list of gesture samples.

    ``features`` is ``(n, seq_len, channels)`` float32 so that file round trips
    are bit-exact.
    """

    features: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray
    num_classes: int
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        n = self.features.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64).reshape(n)
        if self.sample_ids is None:
            self.sample_ids = np.arange(n, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64).reshape(n)
        if self.features.ndim != 3:
            raise SignalError("features must be (n, seq_len, channels)")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise SignalError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __iter__(self) -> Iterator[GestureSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> GestureSample:
        return GestureSample(self.features[i], int(self.labels[i]), int(self.domain_ids[i]),
                             self.num_classes, int(self.sample_ids[i]))

    @property
    def seq_len(self) -> int:
        return self.features.shape[1]

    @property
    def channel_count(self) -> int:
        return self.features.shape[2]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.size == 0:
            index = index.astype(np.int64)
        return Dataset(self.features[index], self.labels[index], self.domain_ids[index],
                       self.num_classes, self.sample_ids[index])

    def select_domain(self, domain_id: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.domain_ids == domain_id))

    def unlabeled(self) -> "Dataset":
        """Copy with every label replaced by 0, for code that must not see labels."""
        return Dataset(self.features, np.zeros(len(self), dtype=np.int64), self.domain_ids,
                       self.num_classes, self.sample_ids)

    def equals(self, other: "Dataset") -> bool:
        return (self.num_classes == other.num_classes
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.domain_ids, other.domain_ids)
                and np.array_equal(self.sample_ids, other.sample_ids))

    @classmethod
    def from_samples(cls, samples: Sequence[GestureSample]) -> "Dataset":
        if not samples:
            raise SignalError("cannot build a dataset from zero samples")
        return cls(np.stack([s.features for s in samples]),
                   [s.label for s in samples], [s.domain_id for s in samples],
                   samples[0].num_classes, [s.sample_id for s in samples])


def rms(window) -> float:
    """Root mean square of a 1-D window."""
    x = np.asarray(window, dtype=np.float64).ravel()
    if x.size == 0:
        raise SignalError("rms of an empty window")
    if not np.all(np.isfinite(x)):
        raise SignalError("rms window contains non-finite values")
    return float(np.sqrt(np.mean(x * x)))


def sliding_rms(recording: RawRecording, window_len_samples: int = 200,
                step_samples: int = 1) -> np.ndarray:
    """Per-channel RMS over a sliding window.

    Returns an array of shape ``(floor((n - window) / step) + 1, channels)``.
    The default window/step correspond to 100 ms / 0.5 ms at 2000 Hz.
    """
    x = recording.samples
    n = x.shape[0]
    if window_len_samples < 1 or step_samples < 1:
        raise SignalError("window and step must be >= 1")
    if window_len_samples > n:
        raise SignalError(f"window of {window_len_samples} samples exceeds recording of {n}")
    csum = np.concatenate([np.zeros((1, x.shape[1])), np.cumsum(x * x, axis=0)])
    starts = np.arange(0, n - window_len_samples + 1, step_samples)
    energy = csum[starts + window_len_samples] - csum[starts]
    # cumsum differences can go slightly negative on near-zero signals
    return np.sqrt(np.maximum(energy, 0.0) / window_len_samples)


def segment_starts(length: int, window_len: int, overlap_fraction: float) -> np.ndarray:
    if not 0.0 <= overlap_fraction < 1.0:
        raise SignalError("overlap_fraction must lie in [0, 1)")
    if window_len < 1 or length < window_len:
        raise SignalError(f"sequence of length {length} is shorter than window {window_len}")
    hop = max(1, int(np.floor(window_len * (1.0 - overlap_fraction))))
    return np.arange(0, length - window_len + 1, hop)


def segment(features, window_len: int = 200, overlap_fraction: float = 0.5) -> list[np.ndarray]:
    """Cut a feature sequence into fixed-length, overlapping blocks."""
    features = np.asarray(features)
    starts = segment_starts(features.shape[0], window_len, overlap_fraction)
    return [features[s:s + window_len] for s in starts]


def _class_templates(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    t = np.arange(spec.seq_len) / spec.seq_len
    shape = (spec.num_classes, spec.channel_count)
    base = rng.uniform(0.2, 1.0, size=shape)
    harmonics = np.arange(1, 4)
    amp = rng.normal(0.0, 0.3, size=shape + (harmonics.size,))
    phase = rng.uniform(0.0, 2 * np.pi, size=shape + (harmonics.size,))
    # (classes, channels, harmonics, time)
    waves = np.cos(np.pi * harmonics[:, None] * t[None, :] + phase[..., None])
    env = base[..., None] + np.sum(amp[..., None] * waves, axis=2)
    return np.maximum(env, 0.05).transpose(0, 2, 1)  # (classes, time, channels)


def mixing_matrices(spec: SynthSpec) -> np.ndarray:
    """Channel-mixing matrices ``(1 - s) I + s P_d`` for every domain.

    The electrodes are treated as a ring (an armband), so a posture change
    bleeds each channel into its ring neighbours. ``P_d`` is a seeded convex
    combination of the identity and the two one-step ring rotations, hence
    doubly stochastic. Domain 0 is the identity.
    """
    rng = np.random.default_rng([int(spec.seed), 0x6D6978])
    c = spec.channel_count
    eye = np.eye(c)
    shifts = [eye, np.roll(eye, 1, axis=1), np.roll(eye, -1, axis=1)]
    s = spec.domain_mixing_strength
    mats = [eye]
    for _ in range(1, spec.num_domains):
        weights = rng.dirichlet([1.0, 2.0, 2.0])
        perm = sum(w * m for w, m in zip(weights, shifts))
        mats.append((1.0 - s) * eye + s * perm)
    return np.stack(mats)


def synth_generate(spec: SynthSpec) -> Dataset:
    """Generate a labelled synthetic RMS-feature dataset with posture shift."""
    rng = np.random.default_rng([int(spec.seed), 0x73796E])
    templates = _class_templates(rng, spec)
    mixes = mixing_matrices(spec)
    n_per = spec.samples_per_class_per_domain
    feats, labels, domains = [], [], []
    for d in range(spec.num_domains):
        for c in range(spec.num_classes):
            noise = rng.normal(0.0, spec.noise_std, size=(n_per, spec.seq_len, spec.channel_count))
            gain = rng.uniform(0.85, 1.15, size=(n_per, 1, 1))
            x = np.abs(gain * templates[c] + noise)
            feats.append(x @ mixes[d].T)
            labels.extend([c] * n_per)
            domains.extend([d] * n_per)
    return Dataset(np.concatenate(feats), labels, domains, spec.num_classes)


def stratified_split(dataset: Dataset, train_fraction: float = 0.7,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded per-(domain, class) split into disjoint train/test subsets."""
    rng = np.random.default_rng([int(seed), 0x73706C])
    train_idx, test_idx = [], []
    for d in np.unique(dataset.domain_ids):
        for c in range(dataset.num_classes):
            idx = np.flatnonzero((dataset.domain_ids == d) & (dataset.labels == c))
            idx = idx[rng.permutation(idx.size)]
            k = int(round(train_fraction * idx.size))
            train_idx.append(idx[:k])
            test_idx.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)


def save_dataset(dataset: Dataset, path) -> None:
    n, seq_len, channels = dataset.features.shape
    if n and (dataset.labels.max() >= 2**16 or dataset.domain_ids.max() >= 2**16):
        raise DatasetFormatError("labels", "labels and domain ids must fit in u16")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, seq_len, channels,
                              dataset.num_classes))
        fh.write(dataset.features.astype("<f4").tobytes())
        fh.write(dataset.labels.astype("<u2").tobytes())
        fh.write(dataset.domain_ids.astype("<u2").tobytes())
        fh.write(dataset.sample_ids.astype("<u4").tobytes())


def load_dataset(path) -> Dataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetFormatError("path", str(exc)) from exc
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("header", "file shorter than header")
    magic, version, n, seq_len, channels, num_classes = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError("magic", f"expected {DATASET_MAGIC!r}, got {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError("version", f"unsupported version {version}")
    if num_classes < 1:
        raise DatasetFormatError("num_classes", "must be >= 1")
    sections = [("features", "<f4", n * seq_len * channels), ("labels", "<u2", n),
                ("domain_ids", "<u2", n), ("sample_ids", "<u4", n)]
    expected = _HEADER.size + sum(np.dtype(dt).itemsize * count for _, dt, count in sections)
    if len(blob) != expected:
        raise DatasetFormatError("num_samples",
                                 f"payload size {len(blob)} bytes does not match header ({expected})")
    offset = _HEADER.size
    arrays = {}
    for name, dt, count in sections:
        arrays[name] = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
        offset += np.dtype(dt).itemsize * count
    labels = arrays["labels"].astype(np.int64)
    if n and labels.max() >= num_classes:
        raise DatasetFormatError("labels", f"label {labels.max()} >= num_classes {num_classes}")
    feats = arrays["features"].reshape(n, seq_len, channels)
    if not np.all(np.isfinite(feats)):
        raise DatasetFormatError("features", "non-finite values")
    return Dataset(feats.copy(), labels, arrays["domain_ids"].astype(np.int64), num_classes,
                   arrays["sample_ids"].astype(np.int64))


def export_csv(dataset: Dataset, path) -> None:
    """Debug export: flattened features followed by label and domain, one row per sample."""
    width = dataset.seq_len * dataset.channel_count
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(width)] + ["label", "domain"])
        for x, y, d in zip(dataset.features, dataset.labels, dataset.domain_ids):
            writer.writerow([repr(float(v)) for v in x.ravel()] + [int(y), int(d)])
