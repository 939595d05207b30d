"""Noise identification and correction.

The pipeline runs in three steps on a frozen model snapshot:

1. trust split: instances are sorted by per-instance cross-entropy and the
   smallest ceil(N * p) are trusted; the threshold gamma is the loss of the
   last trusted instance. Ties break toward the lower index.
2. clustering: one cluster per class over trusted feature-space points;
   the centroid is the member mean, the radius the distance of the
   farthest member. A class with no trusted member is seeded with its
   single lowest-loss instance carrying that label, or excluded from the
   nearest-cluster search if no instance carries the label at all.
3. identification and correction: each untrusted instance is assigned to
   its nearest non-empty centroid. Farther than that cluster's radius it
   counts as feature noise: its representation is pulled toward the
   centroid, (1 - eta) * z + eta * mu, and it adopts the assigned
   cluster's class (it joins that cluster). Inside the radius with a
   disagreeing label it counts as label noise and is relabeled to the
   assigned cluster's class; otherwise it is clean. Nothing is discarded:
   every instance comes back, corrected or untouched.

Cluster statistics stay frozen for the whole pass; untrusted instances are
appended to member lists for reporting only. Target-domain correction
relabels every untrusted instance to its nearest cluster and never touches
features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import model as model_mod
from .datagen import NoisyDataset
from .errors import NumericError, ParameterError, StateError


class NoiseVerdict(Enum):
    CLEAN = "clean"
    FEATURE_NOISE = "feature_noise"
    LABEL_NOISE = "label_noise"


@dataclass(eq=False)
class TrustSplit:
    trusted_indices: np.ndarray
    untrusted_indices: np.ndarray
    gamma: float
    losses: np.ndarray


@dataclass(eq=False)
class ClusterModel:
    """Per-class centroids, radii and member lists in feature space.

    ``centroids`` rows of empty clusters hold NaN sentinels and are never
    eligible in nearest-cluster search.
    """

    centroids: np.ndarray
    radii: np.ndarray
    members: list[list[int]]
    empty_mask: np.ndarray


@dataclass(eq=False)
class CorrectionRecord:
    index: int
    verdict: NoiseVerdict
    assigned_cluster: int
    distance_to_centroid: float
    radius: float
    corrected_label: int
    corrected_feature: np.ndarray | None
    eta_used: float


@dataclass(eq=False)
class CorrectedSource:
    """Correction output in trainer-ready form.

    ``labels`` is the full corrected label vector. ``mix_eta`` and
    ``mix_targets`` carry the feature-space correction per instance (eta 0
    and a zero row where no correction applies), matching the reverse-loss
    interface.
    """

    labels: np.ndarray
    mix_eta: np.ndarray
    mix_targets: np.ndarray


def split_small_loss(losses, p: float) -> TrustSplit:
    """Trust the ceil(N * p) smallest losses; gamma is the cut instance's loss."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.shape[0] < 2:
        raise ParameterError("losses must be a vector of length >= 2")
    if not np.all(np.isfinite(losses)):
        raise NumericError("losses contain non-finite values")
    if not 0.0 < p < 1.0:
        raise ParameterError(f"separation ratio must be in (0, 1), got {p}")
    n = losses.shape[0]
    n_trust = min(n, max(1, math.ceil(n * p)))
    order = np.argsort(losses, kind="stable")  # stable: ties break by lower index
    trusted = np.sort(order[:n_trust])
    untrusted = np.sort(order[n_trust:])
    gamma = float(losses[order[n_trust - 1]])
    return TrustSplit(trusted, untrusted, gamma, losses)


def build_clusters(
    trusted_features, trusted_labels, num_classes: int, radius_percentile: float | None = None
) -> ClusterModel:
    """One cluster per class over trusted points: member mean and max-distance radius.

    ``radius_percentile`` swaps the max for a percentile of member
    distances; the default (None) is the exact max rule.
    """
    feats = np.asarray(trusted_features, dtype=np.float64)
    labels = np.asarray(trusted_labels)
    if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
        raise ParameterError("trusted features/labels shape mismatch")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError("trusted label out of range")
    m = feats.shape[1]
    centroids = np.full((num_classes, m), np.nan)
    radii = np.zeros(num_classes)
    members: list[list[int]] = [[] for _ in range(num_classes)]
    empty = np.ones(num_classes, dtype=bool)
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        members[k] = [int(i) for i in idx]
        pts = feats[idx]
        centroids[k] = np.mean(pts, axis=0)
        dists = np.sqrt(np.sum((pts - centroids[k]) ** 2, axis=1))
        if radius_percentile is None:
            radii[k] = float(np.max(dists))
        else:
            radii[k] = float(np.percentile(dists, radius_percentile))
        empty[k] = False
    return ClusterModel(centroids=centroids, radii=radii, members=members, empty_mask=empty)


def distances_to_centroids(z: np.ndarray, clusters: ClusterModel) -> np.ndarray:
    """Distances from each row of z to every centroid; empty clusters get +inf."""
    diff = z[:, None, :] - clusters.centroids[None, :, :]
    dists = np.sqrt(np.sum(diff * diff, axis=2))
    dists[:, clusters.empty_mask] = np.inf
    return dists


def nearest_cluster(z, clusters: ClusterModel) -> tuple[int, float]:
    """Nearest non-empty centroid; ties break toward the smaller class id."""
    if bool(np.all(clusters.empty_mask)):
        raise StateError("no non-empty cluster to assign to")
    z = np.asarray(z, dtype=np.float64)
    dists = distances_to_centroids(z[None, :], clusters)[0]
    k_star = int(np.argmin(dists))  # argmin returns the first minimum
    return k_star, float(dists[k_star])


def identify(z, observed_label: int, clusters: ClusterModel) -> tuple[NoiseVerdict, int, float]:
    """Three-way rule: outside the radius = feature noise, inside with a
    disagreeing label = label noise, otherwise clean. The radius boundary
    is inclusive."""
    k_star, dist = nearest_cluster(z, clusters)
    if dist > clusters.radii[k_star]:
        return NoiseVerdict.FEATURE_NOISE, k_star, dist
    if int(observed_label) != k_star:
        return NoiseVerdict.LABEL_NOISE, k_star, dist
    return NoiseVerdict.CLEAN, k_star, dist


def correct_feature(z, mu, eta: float) -> np.ndarray:
    """Weighted pull toward the centroid: (1 - eta) * z + eta * mu."""
    if not 0.0 <= eta <= 1.0:
        raise ParameterError(f"eta must be in [0, 1], got {eta}")
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    return (1.0 - eta) * z + eta * mu


def eta_schedule(epoch: int, total_epochs: int, eta0: float) -> float:
    """Linear decay from eta0 at epoch 0 to exactly 0 at the final epoch."""
    if total_epochs <= 0:
        raise ParameterError("total_epochs must be > 0")
    if not 0 <= epoch <= total_epochs:
        raise ParameterError("epoch must be in [0, total_epochs]")
    if not 0.0 <= eta0 <= 1.0:
        raise ParameterError("eta0 must be in [0, 1]")
    return eta0 * (1.0 - epoch / total_epochs)


def _seed_empty_clusters(
    clusters: ClusterModel, feats: np.ndarray, labels: np.ndarray, losses: np.ndarray
) -> None:
    """Seed each empty cluster with its lowest-loss instance carrying that label.

    Classes with no instance at all stay empty and excluded from search.
    """
    for k in np.flatnonzero(clusters.empty_mask):
        candidates = np.flatnonzero(labels == k)
        if candidates.size == 0:
            continue
        best = int(candidates[np.argmin(losses[candidates])])  # argmin: lowest index on ties
        clusters.centroids[k] = feats[best]
        clusters.radii[k] = 0.0
        clusters.members[k] = [best]
        clusters.empty_mask[k] = False


def clusters_from_split(
    feats: np.ndarray,
    labels: np.ndarray,
    losses: np.ndarray,
    split: TrustSplit,
    num_classes: int,
    radius_percentile: float | None = None,
) -> ClusterModel:
    """Clusters over the trusted subset, with members holding dataset indices
    and the empty-class fallback applied."""
    clusters = build_clusters(
        feats[split.trusted_indices], labels[split.trusted_indices], num_classes,
        radius_percentile,
    )
    clusters.members = [
        [int(split.trusted_indices[j]) for j in mem] for mem in clusters.members
    ]
    _seed_empty_clusters(clusters, feats, labels, losses)
    return clusters


def nic_source(
    dataset: NoisyDataset,
    model: model_mod.Model,
    p: float,
    eta: float,
    *,
    feature_correction: bool = True,
    label_correction: bool = True,
    radius_percentile: float | None = None,
) -> tuple[CorrectedSource, list[CorrectionRecord], ClusterModel]:
    """Full source-domain pass: split, cluster, identify, correct, recycle.

    Every instance comes back: trusted instances and clean verdicts keep
    their observed labels; feature and label noise adopt the assigned
    cluster's class (when ``label_correction``); feature noise
    additionally gets a feature-space pull toward the centroid (when
    ``feature_correction``). Records cover exactly the untrusted set, in
    index order.
    """
    if dataset.observed_labels is None:
        raise StateError("source correction requires observed labels")
    if not 0.0 <= eta <= 1.0:
        raise ParameterError(f"eta must be in [0, 1], got {eta}")
    x = dataset.features
    y = dataset.observed_labels
    k_classes = dataset.num_classes

    losses = model_mod.instance_losses(model, model_mod.HEAD_SOURCE, x, y)
    split = split_small_loss(losses, p)
    feats = model_mod.features(model, x)
    clusters = clusters_from_split(feats, y, losses, split, k_classes, radius_percentile)
    if bool(np.all(clusters.empty_mask)):
        raise StateError("all clusters empty after fallback seeding")

    labels_out = y.copy()
    n, m = feats.shape
    mix_eta = np.zeros(n)
    mix_targets = np.zeros((n, m))
    records: list[CorrectionRecord] = []

    un = split.untrusted_indices
    dists = distances_to_centroids(feats[un], clusters)
    k_star = np.argmin(dists, axis=1)
    d_min = dists[np.arange(len(un)), k_star]
    is_fn = d_min > clusters.radii[k_star]
    is_ln = ~is_fn & (y[un] != k_star)

    for j, i in enumerate(un):
        i = int(i)
        ks = int(k_star[j])
        if is_fn[j]:
            verdict = NoiseVerdict.FEATURE_NOISE
        elif is_ln[j]:
            verdict = NoiseVerdict.LABEL_NOISE
        else:
            verdict = NoiseVerdict.CLEAN
        corrected_label = int(y[i])
        if verdict is not NoiseVerdict.CLEAN and label_correction:
            corrected_label = ks
        corrected_feature = None
        eta_used = 0.0
        if verdict is NoiseVerdict.FEATURE_NOISE and feature_correction:
            corrected_feature = correct_feature(feats[i], clusters.centroids[ks], eta)
            eta_used = eta
            mix_eta[i] = eta
            mix_targets[i] = clusters.centroids[ks]
        labels_out[i] = corrected_label
        records.append(
            CorrectionRecord(
                index=i,
                verdict=verdict,
                assigned_cluster=ks,
                distance_to_centroid=float(d_min[j]),
                radius=float(clusters.radii[ks]),
                corrected_label=corrected_label,
                corrected_feature=corrected_feature,
                eta_used=eta_used,
            )
        )
        clusters.members[ks].append(i)  # membership for reporting; stats stay frozen

    return CorrectedSource(labels_out, mix_eta, mix_targets), records, clusters


def nic_target(
    features_matrix,
    pseudo_labels,
    model: model_mod.Model,
    p: float,
    *,
    clusters: ClusterModel | None = None,
    radius_percentile: float | None = None,
) -> tuple[np.ndarray, list[CorrectionRecord]]:
    """Target-domain pass: low-confidence pseudo-labels are label noise.

    Per-instance loss is the target head's cross-entropy against the
    pseudo-label, so instances whose target prediction disagrees with
    their pseudo-label land in the untrusted set; each of those is
    relabeled to its nearest cluster. Features are never corrected here.
    By default clusters are built from the target's own trusted split;
    pass ``clusters`` to reuse an externally built model instead.
    """
    x = np.asarray(features_matrix, dtype=np.float64)
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    k_classes = model.config.num_classes

    losses = model_mod.instance_losses(model, model_mod.HEAD_TARGET, x, pseudo)
    split = split_small_loss(losses, p)
    feats = model_mod.features(model, x)

    if clusters is None:
        clusters = clusters_from_split(feats, pseudo, losses, split, k_classes, radius_percentile)
    if bool(np.all(clusters.empty_mask)):
        raise StateError("all clusters empty after fallback seeding")

    corrected = pseudo.copy()
    records: list[CorrectionRecord] = []
    un = split.untrusted_indices
    dists = distances_to_centroids(feats[un], clusters)
    k_star = np.argmin(dists, axis=1)
    d_min = dists[np.arange(len(un)), k_star]
    for j, i in enumerate(un):
        i = int(i)
        ks = int(k_star[j])
        corrected[i] = ks
        records.append(
            CorrectionRecord(
                index=i,
                verdict=NoiseVerdict.LABEL_NOISE,
                assigned_cluster=ks,
                distance_to_centroid=float(d_min[j]),
                radius=float(clusters.radii[ks]),
                corrected_label=ks,
                corrected_feature=None,
                eta_used=0.0,
            )
        )
    return corrected, records
