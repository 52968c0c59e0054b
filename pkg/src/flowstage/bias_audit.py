"""Scorer-bias analysis over clustered items.

Clusters scored items (or takes given labels), computes each cluster's
coefficient of variation, and summarizes cross-cluster preference as the
coefficient of variation of the cluster means.  A scorer that favors
specific content shows a large cross-cluster value; an even-handed one
stays low regardless of how many clusters the items are split into.

All standard deviations here are population (1/N) ones.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .numerics import RandomSource


@dataclass
class ScoredItem:
    """One scored item; needs features (for clustering) or a label."""

    id: str
    score: float
    features: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        self.score = float(self.score)
        if not math.isfinite(self.score):
            raise DomainError(f"item {self.id!r}: non-finite score")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 1:
                raise ShapeError(f"item {self.id!r}: features must be a vector")
        if self.label is not None:
            self.label = int(self.label)
        if self.features is None and self.label is None:
            raise DomainError(f"item {self.id!r}: needs features or a label")


@dataclass
class ClusterReport:
    """Per-cluster score statistics plus the cross-cluster spread."""

    k: int
    sizes: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    kappas: list  # percent CoV per cluster; None where the mean is zero
    inter_cluster_cov: float
    used_labels: bool

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "std_convention": "population",
            "used_labels": self.used_labels,
            "inter_cluster_cov": self.inter_cluster_cov,
            "clusters": [
                {
                    "index": i,
                    "size": int(self.sizes[i]),
                    "mean": float(self.means[i]),
                    "std": float(self.stds[i]),
                    "kappa": self.kappas[i],
                }
                for i in range(self.k)
            ],
        }

    def write_json(self, fp) -> None:
        json.dump(self.to_dict(), fp, sort_keys=True, indent=2)
        fp.write("\n")

    def write_csv(self, fp) -> None:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["cluster", "size", "mean", "std", "kappa"])
        for i in range(self.k):
            kappa = "" if self.kappas[i] is None else repr(self.kappas[i])
            writer.writerow([i, int(self.sizes[i]), repr(float(self.means[i])),
                             repr(float(self.stds[i])), kappa])


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )


def kmeans(features: np.ndarray, k: int, seed: int = 0, max_iters: int = 100) -> np.ndarray:
    """Lloyd iterations from greedy farthest-point seeding.

    Deterministic under the seed: the first center is a random item, each
    further center is the item farthest from all chosen ones (ties to the
    lowest index), and assignment ties also go to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError("features must be (N, d)")
    n = len(features)
    if not 1 <= k <= n:
        raise DomainError(f"k={k} must lie in [1, {n}]")

    rng = RandomSource(seed)
    first = int(rng.integers(0, n))
    centers = [features[first]]
    min_d = np.sum((features - centers[0]) ** 2, axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(min_d))
        centers.append(features[nxt])
        min_d = np.minimum(min_d, np.sum((features - centers[-1]) ** 2, axis=1))
    centers = np.stack(centers)

    labels = np.argmin(_pairwise_sq_dists(features, centers), axis=1)
    for _ in range(max_iters):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = features[members].mean(axis=0)
            else:
                # adopt the point currently worst-served by its own center
                d = np.sum((features - centers[labels]) ** 2, axis=1)
                centers[j] = features[int(np.argmax(d))]
        new_labels = np.argmin(_pairwise_sq_dists(features, centers), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels.astype(np.int64)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def _pop_std(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))


def cluster_kappa(scores_by_cluster: Sequence[np.ndarray]) -> list:
    """Percent coefficient of variation per cluster: std / |mean| * 100.

    A zero-mean cluster has no defined CoV and maps to None.
    """
    out = []
    for scores in scores_by_cluster:
        scores = np.asarray(scores, dtype=np.float64)
        if len(scores) < 1:
            raise DomainError("empty cluster")
        mean = float(scores.mean())
        if mean == 0.0:
            out.append(None)
        else:
            out.append(_pop_std(scores) / abs(mean) * 100.0)
    return out


def audit(items: Sequence[ScoredItem], k: int | None = None, seed: int = 0,
          max_iters: int = 100) -> ClusterReport:
    """Cluster items (or take their labels when ``k`` is None) and report
    per-cluster and cross-cluster score statistics."""
    if len(items) < 2:
        raise DomainError("need at least 2 items")
    scores = np.array([item.score for item in items])

    if k is None:
        if any(item.label is None for item in items):
            raise DomainError("k not given and some items carry no label")
        labels = np.array([item.label for item in items])
        index_of = {lab: i for i, lab in enumerate(sorted(set(labels.tolist())))}
        labels = np.array([index_of[lab] for lab in labels])
        num_clusters = len(index_of)
        used_labels = True
    else:
        if any(item.features is None for item in items):
            raise DomainError("clustering requested but some items carry no features")
        dims = {item.features.shape for item in items}
        if len(dims) != 1:
            raise ShapeError(f"inconsistent feature dimensions: {sorted(dims)}")
        feats = np.stack([item.features for item in items])
        labels = kmeans(feats, k, seed=seed, max_iters=max_iters)
        num_clusters = k
        used_labels = False

    sizes = np.bincount(labels, minlength=num_clusters)
    if (sizes == 0).any():
        raise DomainError("empty cluster in labeling")
    by_cluster = [scores[labels == j] for j in range(num_clusters)]
    means = np.array([c.mean() for c in by_cluster])
    stds = np.array([_pop_std(c) for c in by_cluster])
    kappas = cluster_kappa(by_cluster)

    grand = float(means.mean())
    inter = float("nan") if grand == 0.0 else _pop_std(means) / abs(grand) * 100.0
    return ClusterReport(
        k=num_clusters,
        sizes=sizes,
        means=means,
        stds=stds,
        kappas=kappas,
        inter_cluster_cov=inter,
        used_labels=used_labels,
    )


# ---------------------------------------------------------------------------
# Tabular I/O
# ---------------------------------------------------------------------------


def read_items_csv(path) -> list:
    """Read items from a CSV with columns ``id``, ``score``, optional
    ``label``, and any further columns treated as feature components."""
    with open(path, newline="") as fp:
        reader = csv.DictReader(fp)
        if reader.fieldnames is None or "id" not in reader.fieldnames \
                or "score" not in reader.fieldnames:
            raise DomainError(f"{path}: need at least 'id' and 'score' columns")
        feature_cols = [c for c in reader.fieldnames if c not in ("id", "score", "label")]
        items = []
        for row in reader:
            label = row.get("label")
            label = int(label) if label not in (None, "") else None
            features = None
            if feature_cols:
                features = np.array([float(row[c]) for c in feature_cols])
            items.append(ScoredItem(id=row["id"], score=float(row["score"]),
                                    features=features, label=label))
    if not items:
        raise DomainError(f"{path}: no items")
    return items
