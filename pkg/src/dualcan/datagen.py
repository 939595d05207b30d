"""Synthetic domain pairs with controlled feature and label corruption.

A task is a pair of K-class Gaussian clouds. The source domain samples
around class centers laid out on a circle of radius ``class_center_scale``
in the first two coordinates; the target domain samples the same class
structure and is pushed through a rotation (in the first two axes) plus a
translation, giving a covariate shift with unchanged conditional class
structure.

Corruption is injected per instance. Label corruption flips the observed
label uniformly onto one of the other K-1 classes. Feature corruption adds
Gaussian noise of scale ``feature_noise_sigma`` and independently slams a
fraction of coordinates to +/- the dataset's maximum coordinate magnitude,
the vector analogue of salt-and-pepper masking.

Hidden ground truth (clean labels, per-instance corruption flags) rides
along inside the dataset and its file format, but is only for evaluation
code: training and correction code must never read it.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, StateError, VersionError
from .fileio import atomic_write_bytes, fmt_float

SOURCE = "source"
TARGET = "target"

LABEL_ONLY = "label"
FEATURE_ONLY = "feature"
MIXED = "mixed"

_NOISE_KINDS = (LABEL_ONLY, FEATURE_ONLY, MIXED)

_MAGIC = b"NDS1"
FORMAT_VERSION = 1
_DOMAIN_CODES = {SOURCE: 0, TARGET: 1}
_DOMAIN_NAMES = {0: SOURCE, 1: TARGET}


@dataclass(frozen=True)
class DomainSpec:
    """Geometry and sampling plan for one source/target pair."""

    num_classes: int
    feature_dim: int
    samples_per_class: int
    class_center_scale: float = 2.0
    class_spread: float = 0.5
    shift_rotation: float = 0.0
    shift_translation: tuple[float, ...] | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ParameterError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < 2:
            raise ParameterError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.samples_per_class < 1:
            raise ParameterError("samples_per_class must be >= 1")
        if self.class_center_scale <= 0:
            raise ParameterError("class_center_scale must be > 0")
        if self.class_spread < 0:
            raise ParameterError("class_spread must be >= 0")
        if self.shift_translation is not None and len(self.shift_translation) != self.feature_dim:
            raise ParameterError(
                f"shift_translation has length {len(self.shift_translation)}, "
                f"expected {self.feature_dim}"
            )

    @property
    def translation(self) -> np.ndarray:
        if self.shift_translation is None:
            return np.zeros(self.feature_dim)
        return np.asarray(self.shift_translation, dtype=np.float64)


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption plan. ``mixed`` fires each channel independently at p_noise/2."""

    p_noise: float
    kind: str = MIXED
    feature_noise_sigma: float = 0.0
    feature_mask_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in _NOISE_KINDS:
            raise ParameterError(f"unknown noise kind {self.kind!r}")
        # Mixed levels above 1.0 are meaningful (e.g. 1.6 = 80% + 80% per
        # channel); each channel probability p/2 must itself be a probability.
        upper = 2.0 if self.kind == MIXED else 1.0
        if not 0.0 <= self.p_noise <= upper:
            raise ParameterError(
                f"p_noise={self.p_noise} outside [0, {upper}] for kind {self.kind!r}"
            )
        if self.feature_noise_sigma < 0:
            raise ParameterError("feature_noise_sigma must be >= 0")
        if not 0.0 <= self.feature_mask_fraction <= 1.0:
            raise ParameterError("feature_mask_fraction must be in [0, 1]")

    def channel_probabilities(self) -> tuple[float, float]:
        """(label channel, feature channel) per-instance fire probabilities."""
        if self.kind == LABEL_ONLY:
            return self.p_noise, 0.0
        if self.kind == FEATURE_ONLY:
            return 0.0, self.p_noise
        return self.p_noise / 2.0, self.p_noise / 2.0


@dataclass(eq=False)
class NoiseFlags:
    """Per-instance ground-truth corruption record. Evaluation-only."""

    label_corrupted: np.ndarray
    feature_corrupted: np.ndarray


@dataclass(eq=False)
class NoisyDataset:
    """Feature matrix plus observed labels and hidden ground truth.

    ``observed_labels`` is None for an unlabeled target domain.
    ``clean_labels`` and ``noise_flags`` are hidden ground truth, readable
    only by evaluation code (module contract, not enforced by the runtime).
    """

    features: np.ndarray
    observed_labels: np.ndarray | None
    clean_labels: np.ndarray
    noise_flags: NoiseFlags
    domain: str
    num_classes: int

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def rotation_matrix(angle: float, dim: int) -> np.ndarray:
    """Rotation by ``angle`` radians in the plane of the first two axes."""
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    rot[0, 0] = c
    rot[0, 1] = -s
    rot[1, 0] = s
    rot[1, 1] = c
    return rot


def class_centers(spec: DomainSpec) -> np.ndarray:
    """Source-domain class centers, evenly spaced on a circle in axes 0 and 1."""
    angles = 2.0 * np.pi * np.arange(spec.num_classes) / spec.num_classes
    centers = np.zeros((spec.num_classes, spec.feature_dim))
    centers[:, 0] = spec.class_center_scale * np.cos(angles)
    centers[:, 1] = spec.class_center_scale * np.sin(angles)
    return centers


def make_domain_pair(spec: DomainSpec) -> tuple[NoisyDataset, NoisyDataset]:
    """Sample a clean source/target pair under ``spec``.

    Both domains draw fresh per-instance noise from a single generator
    seeded by ``spec.seed`` (source block first), so the output is a pure
    function of the spec. Target features are the target draws pushed
    through rotation + translation.
    """
    spec.validate()
    k, d, n_per = spec.num_classes, spec.feature_dim, spec.samples_per_class
    n = k * n_per
    rng = np.random.default_rng(spec.seed)
    centers = class_centers(spec)
    labels = np.repeat(np.arange(k, dtype=np.int64), n_per)

    src_noise = rng.normal(size=(n, d))
    tgt_noise = rng.normal(size=(n, d))
    src_features = centers[labels] + spec.class_spread * src_noise
    tgt_frame = centers[labels] + spec.class_spread * tgt_noise
    rot = rotation_matrix(spec.shift_rotation, d)
    tgt_features = tgt_frame @ rot.T + spec.translation

    def fresh_flags() -> NoiseFlags:
        return NoiseFlags(
            label_corrupted=np.zeros(n, dtype=bool),
            feature_corrupted=np.zeros(n, dtype=bool),
        )

    source = NoisyDataset(
        features=src_features,
        observed_labels=labels.copy(),
        clean_labels=labels.copy(),
        noise_flags=fresh_flags(),
        domain=SOURCE,
        num_classes=k,
    )
    target = NoisyDataset(
        features=tgt_features,
        observed_labels=None,
        clean_labels=labels.copy(),
        noise_flags=fresh_flags(),
        domain=TARGET,
        num_classes=k,
    )
    return source, target


def corrupt(dataset: NoisyDataset, noise: NoiseSpec) -> NoisyDataset:
    """Apply the corruption plan and return a new dataset with updated flags.

    Flag soundness is maintained by construction: ``label_corrupted`` is
    recomputed as observed != clean after flipping, so it stays exact even
    if corruption is applied more than once.
    """
    noise.validate()
    p_label, p_feature = noise.channel_probabilities()
    if p_label > 0 and dataset.observed_labels is None:
        raise StateError("label corruption requires observed labels")

    n, d = dataset.features.shape
    k = dataset.num_classes
    rng = np.random.default_rng(noise.seed)
    label_fire = rng.random(n) < p_label
    feature_fire = rng.random(n) < p_feature

    observed = None
    if dataset.observed_labels is not None:
        observed = dataset.observed_labels.copy()
        if p_label > 0:
            # Uniform over the other K-1 classes: offset in [1, K-1].
            offsets = rng.integers(1, k, size=n)
            observed[label_fire] = (observed[label_fire] + offsets[label_fire]) % k

    features = dataset.features.copy()
    if p_feature > 0:
        magnitude = float(np.max(np.abs(dataset.features)))
        additive = rng.normal(size=(n, d)) * noise.feature_noise_sigma
        mask_draw = rng.random((n, d)) < noise.feature_mask_fraction
        signs = rng.integers(0, 2, size=(n, d)) * 2 - 1
        features[feature_fire] += additive[feature_fire]
        masked = feature_fire[:, None] & mask_draw
        features[masked] = (signs * magnitude)[masked]

    if observed is not None:
        label_corrupted = observed != dataset.clean_labels
    else:
        label_corrupted = dataset.noise_flags.label_corrupted.copy()
    feature_corrupted = dataset.noise_flags.feature_corrupted | feature_fire

    return NoisyDataset(
        features=features,
        observed_labels=observed,
        clean_labels=dataset.clean_labels.copy(),
        noise_flags=NoiseFlags(label_corrupted, feature_corrupted),
        domain=dataset.domain,
        num_classes=k,
    )


def datasets_equal(a: NoisyDataset, b: NoisyDataset) -> bool:
    """Field-wise equality, hidden fields included."""
    if a.domain != b.domain or a.num_classes != b.num_classes:
        return False
    if (a.observed_labels is None) != (b.observed_labels is None):
        return False
    if a.observed_labels is not None and not np.array_equal(a.observed_labels, b.observed_labels):
        return False
    return (
        np.array_equal(a.features, b.features)
        and np.array_equal(a.clean_labels, b.clean_labels)
        and np.array_equal(a.noise_flags.label_corrupted, b.noise_flags.label_corrupted)
        and np.array_equal(a.noise_flags.feature_corrupted, b.noise_flags.feature_corrupted)
    )


# ---------------------------------------------------------------------------
# File format
#
# Little-endian, self-describing:
#   magic "NDS1" (4s) | format_version (u32)
#   N (u64) | d (u32) | K (u32) | domain (u8: 0=source, 1=target) | has_observed (u8)
#   features        N*d float64
#   observed_labels N   int32      (present iff has_observed)
#   clean_labels    N   int32
#   label_flags     N   uint8
#   feature_flags   N   uint8
# ---------------------------------------------------------------------------

_HEADER = "<4sI"
_SHAPE = "<QIIBB"


def save_dataset(dataset: NoisyDataset, path) -> None:
    """Serialize to the binary container; round-trips bit-exactly."""
    n, d = dataset.features.shape
    has_observed = dataset.observed_labels is not None
    buf = bytearray()
    buf += struct.pack(_HEADER, _MAGIC, FORMAT_VERSION)
    buf += struct.pack(
        _SHAPE, n, d, dataset.num_classes, _DOMAIN_CODES[dataset.domain], int(has_observed)
    )
    buf += np.ascontiguousarray(dataset.features, dtype="<f8").tobytes()
    if has_observed:
        buf += np.ascontiguousarray(dataset.observed_labels, dtype="<i4").tobytes()
    buf += np.ascontiguousarray(dataset.clean_labels, dtype="<i4").tobytes()
    buf += dataset.noise_flags.label_corrupted.astype(np.uint8).tobytes()
    buf += dataset.noise_flags.feature_corrupted.astype(np.uint8).tobytes()
    atomic_write_bytes(path, bytes(buf))


def load_dataset(path) -> NoisyDataset:
    """Parse the binary container, failing loudly with a byte offset."""
    raw = Path(path).read_bytes()
    offset = 0

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise FormatError(f"truncated while reading {what}", offset)
        chunk = raw[offset : offset + count]
        offset += count
        return chunk

    magic, version = struct.unpack(_HEADER, take(struct.calcsize(_HEADER), "file header"))
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported dataset format version {version}")

    n, d, k, dom_code, has_observed = struct.unpack(
        _SHAPE, take(struct.calcsize(_SHAPE), "shape header")
    )
    if dom_code not in _DOMAIN_NAMES:
        raise FormatError(f"unknown domain code {dom_code}", offset - 2)
    if has_observed not in (0, 1):
        raise FormatError(f"bad has_observed byte {has_observed}", offset - 1)
    if k < 2 or d < 1:
        raise FormatError(f"implausible shape header (N={n}, d={d}, K={k})", 8)

    features = np.frombuffer(take(n * d * 8, "features"), dtype="<f8").reshape(n, d).copy()

    observed = None
    if has_observed:
        block_at = offset
        observed = np.frombuffer(take(n * 4, "observed labels"), dtype="<i4").astype(np.int64)
        if observed.size and (observed.min() < 0 or observed.max() >= k):
            raise FormatError("observed label out of range", block_at)

    block_at = offset
    clean = np.frombuffer(take(n * 4, "clean labels"), dtype="<i4").astype(np.int64)
    if clean.size and (clean.min() < 0 or clean.max() >= k):
        raise FormatError("clean label out of range", block_at)

    block_at = offset
    label_flags = np.frombuffer(take(n, "label flags"), dtype=np.uint8)
    if label_flags.size and label_flags.max() > 1:
        raise FormatError("label flag byte not 0/1", block_at)
    block_at = offset
    feature_flags = np.frombuffer(take(n, "feature flags"), dtype=np.uint8)
    if feature_flags.size and feature_flags.max() > 1:
        raise FormatError("feature flag byte not 0/1", block_at)

    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes", offset)

    return NoisyDataset(
        features=features,
        observed_labels=observed,
        clean_labels=clean,
        noise_flags=NoiseFlags(
            label_corrupted=label_flags.astype(bool),
            feature_corrupted=feature_flags.astype(bool),
        ),
        domain=_DOMAIN_NAMES[dom_code],
        num_classes=k,
    )


def export_csv(dataset: NoisyDataset, path) -> None:
    """Debug export: one row per instance, observed column empty when unlabeled."""
    n, d = dataset.features.shape
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow([f"f{j}" for j in range(d)] + ["observed", "clean", "label_flag", "feature_flag"])
    for i in range(n):
        row = [fmt_float(v) for v in dataset.features[i]]
        row.append("" if dataset.observed_labels is None else str(int(dataset.observed_labels[i])))
        row.append(str(int(dataset.clean_labels[i])))
        row.append(str(int(dataset.noise_flags.label_corrupted[i])))
        row.append(str(int(dataset.noise_flags.feature_corrupted[i])))
        writer.writerow(row)
    atomic_write_bytes(path, out.getvalue().encode("utf-8"))
