"""Brute-force per-instance transcription of the correction procedure.

Written independently of the library pipeline as plain loops over
instances: sort losses and cut, average member features per class, take
the farthest-member radius, then walk every untrusted instance through
nearest-centroid assignment, the three-way rule (outside radius = feature
noise; inside with disagreeing label = label noise; else clean), and the
corrections (noisy instances adopt the assigned cluster's class; feature
noise is pulled (1 - eta) * z + eta * mu). Empty classes are seeded with
their lowest-loss instance carrying that label, or stay excluded.

Operates on precomputed per-instance losses and feature vectors so the
comparison isolates the selection/clustering/correction logic itself.
"""

import numpy as np


def reference_split(losses, p):
    n = len(losses)
    n_trust = min(n, max(1, int(np.ceil(n * p))))
    order = sorted(range(n), key=lambda i: (losses[i], i))
    trusted = sorted(order[:n_trust])
    untrusted = sorted(order[n_trust:])
    gamma = float(losses[order[n_trust - 1]])
    return trusted, untrusted, gamma


def reference_clusters(feats, labels, losses, trusted, num_classes, radius_percentile=None):
    m = feats.shape[1]
    centroids = np.full((num_classes, m), np.nan)
    radii = [0.0] * num_classes
    members = [[] for _ in range(num_classes)]
    empty = [True] * num_classes
    for k in range(num_classes):
        member_idx = [i for i in trusted if labels[i] == k]
        if not member_idx:
            continue
        members[k] = list(member_idx)
        pts = feats[np.array(member_idx)]
        centroids[k] = np.mean(pts, axis=0)
        dists = [float(np.sqrt(np.sum((pts[j] - centroids[k]) ** 2))) for j in range(len(member_idx))]
        if radius_percentile is None:
            radii[k] = max(dists)
        else:
            radii[k] = float(np.percentile(np.array(dists), radius_percentile))
        empty[k] = False
    # fallback: seed an empty class with its lowest-loss carrier of that label
    for k in range(num_classes):
        if not empty[k]:
            continue
        candidates = [i for i in range(len(labels)) if labels[i] == k]
        if not candidates:
            continue
        best = min(candidates, key=lambda i: (losses[i], i))
        centroids[k] = feats[best]
        radii[k] = 0.0
        members[k] = [best]
        empty[k] = False
    return centroids, radii, members, empty


def _nearest(z, centroids, empty):
    best_k, best_d = None, None
    for k in range(len(empty)):
        if empty[k]:
            continue
        d = float(np.sqrt(np.sum((z - centroids[k]) ** 2)))
        if best_d is None or d < best_d:
            best_k, best_d = k, d
    return best_k, best_d


def reference_nic_source(
    losses, feats, labels, num_classes, p, eta,
    feature_correction=True, label_correction=True, radius_percentile=None,
):
    """Returns (corrected_labels, mix_eta, mix_targets, records, cluster tuple).

    Records are dicts with the fields: index, verdict ('clean',
    'feature_noise', 'label_noise'), k_star, dist, radius,
    corrected_label, corrected_feature (array or None), eta_used.
    """
    n, m = feats.shape
    trusted, untrusted, _gamma = reference_split(losses, p)
    centroids, radii, members, empty = reference_clusters(
        feats, labels, losses, trusted, num_classes, radius_percentile
    )
    corrected = [int(v) for v in labels]
    mix_eta = np.zeros(n)
    mix_targets = np.zeros((n, m))
    records = []
    for i in untrusted:
        k_star, dist = _nearest(feats[i], centroids, empty)
        if dist > radii[k_star]:
            verdict = "feature_noise"
        elif int(labels[i]) != k_star:
            verdict = "label_noise"
        else:
            verdict = "clean"
        new_label = int(labels[i])
        if verdict != "clean" and label_correction:
            new_label = k_star
        new_feature = None
        eta_used = 0.0
        if verdict == "feature_noise" and feature_correction:
            new_feature = (1.0 - eta) * feats[i] + eta * centroids[k_star]
            eta_used = eta
            mix_eta[i] = eta
            mix_targets[i] = centroids[k_star]
        corrected[i] = new_label
        records.append(
            {
                "index": i,
                "verdict": verdict,
                "k_star": k_star,
                "dist": dist,
                "radius": radii[k_star],
                "corrected_label": new_label,
                "corrected_feature": new_feature,
                "eta_used": eta_used,
            }
        )
        members[k_star].append(i)
    return np.array(corrected), mix_eta, mix_targets, records, (centroids, radii, members, empty)


def reference_nic_target(losses, feats, pseudo_labels, num_classes, p, radius_percentile=None):
    """Every untrusted instance's pseudo-label is treated as label noise and
    replaced by the nearest cluster's class."""
    trusted, untrusted, _gamma = reference_split(losses, p)
    centroids, radii, members, empty = reference_clusters(
        feats, pseudo_labels, losses, trusted, num_classes, radius_percentile
    )
    corrected = [int(v) for v in pseudo_labels]
    records = []
    for i in untrusted:
        k_star, dist = _nearest(feats[i], centroids, empty)
        corrected[i] = k_star
        records.append(
            {
                "index": i,
                "verdict": "label_noise",
                "k_star": k_star,
                "dist": dist,
                "radius": radii[k_star],
                "corrected_label": k_star,
                "corrected_feature": None,
                "eta_used": 0.0,
            }
        )
    return np.array(corrected), records
