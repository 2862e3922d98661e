"""Map embedding clusters to known classes or flag them as potential unknowns.

Each unlabeled cluster is compared against per-class centroids of the
labeled embeddings by squared Euclidean distance; a cluster whose nearest
class sits at or beyond the threshold is a potential unknown, otherwise it
temporarily adopts the nearest class as its auxiliary label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

POTENTIAL_UNKNOWN = "potential_unknown"
KNOWN = "known"


@dataclass(frozen=True)
class AlignConfig:
    """Distance threshold; None selects the adaptive rule each step."""

    threshold: float | None = None

    def __post_init__(self):
        if self.threshold is not None and self.threshold <= 0:
            raise ValueError(f"explicit threshold must be positive, got {self.threshold}")


@dataclass(frozen=True)
class AuxiliaryLabel:
    kind: str  # KNOWN or POTENTIAL_UNKNOWN
    class_name: str | None
    distance: float  # achieved minimum squared distance

    @property
    def is_unknown(self) -> bool:
        return self.kind == POTENTIAL_UNKNOWN


@dataclass(frozen=True)
class ClassCentroids:
    """Per-class embedding centroids, stored in class-identifier order.

    `scatters` holds each class's mean squared distance to its own centroid,
    used to calibrate the alignment threshold against the embedding scale.
    """

    classes: tuple[str, ...]
    centroids: np.ndarray  # (M, e)
    counts: tuple[int, ...]
    scatters: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.classes) != self.centroids.shape[0]:
            raise ValueError("class/centroid count mismatch")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("non-finite centroid")
        if list(self.classes) != sorted(self.classes):
            order = sorted(range(len(self.classes)), key=lambda i: self.classes[i])
            object.__setattr__(self, "classes", tuple(self.classes[i] for i in order))
            object.__setattr__(self, "centroids", self.centroids[order])
            object.__setattr__(self, "counts", tuple(self.counts[i] for i in order))
            if self.scatters is not None:
                object.__setattr__(self, "scatters", tuple(self.scatters[i] for i in order))

    @classmethod
    def from_labeled(cls, embeddings: np.ndarray, labels: Sequence[str]) -> "ClassCentroids":
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape[0] != len(labels):
            raise ValueError("one label per embedding required")
        names = sorted(set(labels))
        cents = []
        counts = []
        scatters = []
        labels_arr = np.asarray(labels)
        for name in names:
            rows = embeddings[labels_arr == name]
            mu = centroid(rows)
            cents.append(mu)
            counts.append(rows.shape[0])
            scatters.append(float(np.mean(np.sum((rows - mu) ** 2, axis=1))))
        return cls(tuple(names), np.stack(cents), tuple(counts), tuple(scatters))


def centroid(vectors) -> np.ndarray:
    """Arithmetic mean per coordinate."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValueError("centroid needs a nonempty (n, e) array")
    return vectors.mean(axis=0)


def cluster_class_distance(v_i, mu_m) -> float:
    """Squared Euclidean distance between two embedding-space points."""
    v_i = np.asarray(v_i, dtype=np.float64)
    mu_m = np.asarray(mu_m, dtype=np.float64)
    if v_i.shape != mu_m.shape:
        raise ValueError(f"dimension mismatch: {v_i.shape} vs {mu_m.shape}")
    d = v_i - mu_m
    return float(d @ d)


def adaptive_threshold(cents: ClassCentroids) -> float:
    """Half the median over classes of the squared distance to the nearest other class.

    Scales with the embedding geometry, which drifts as the model retrains.
    Degenerate duplicated centroids yield 0; callers must then fall back to
    an explicit threshold.
    """
    m = len(cents.classes)
    if m < 2:
        raise ValueError("adaptive threshold needs >= 2 class centroids; set an explicit threshold")
    nearest = []
    for i in range(m):
        dists = [cluster_class_distance(cents.centroids[i], cents.centroids[j]) for j in range(m) if j != i]
        nearest.append(min(dists))
    return float(np.median(nearest)) / 2.0


# multiple of the median within-class scatter used as a threshold bound;
# sits in the valley between matching clusters (offsets well under one
# scatter unit) and foreign clusters (several scatter units out)
SCATTER_FACTOR = 8.0


def calibrated_threshold(cents: ClassCentroids) -> float:
    """Data-driven threshold: the tighter of two bounds.

    The nearest-class-gap rule (half the median gap) alone over-accepts when
    training contracts each decision region onto its prototype: unknown
    clusters then sit much closer to a known centroid than the known classes
    sit to each other, yet far beyond the within-class scatter.  Taking the
    minimum with SCATTER_FACTOR times the median within-class scatter keeps
    the threshold anchored to how tightly the labeled data itself aligns, and
    also covers the single-known-class case where no gap exists.
    """
    bounds = []
    if len(cents.classes) >= 2:
        gap = adaptive_threshold(cents)
        if gap > 0:
            bounds.append(gap)
    if cents.scatters:
        positive = [s for s in cents.scatters if s > 0]
        if positive:
            bounds.append(SCATTER_FACTOR * float(np.median(positive)))
    if not bounds:
        raise ValueError("threshold cannot be calibrated from the data; set an explicit threshold")
    return min(bounds)


def resolve_threshold(cents: ClassCentroids, cfg: AlignConfig) -> float:
    """Explicit threshold if configured, else the calibrated rule."""
    if cfg.threshold is not None:
        return cfg.threshold
    return calibrated_threshold(cents)


def align(
    cluster_centroids: Mapping[int, np.ndarray],
    cents: ClassCentroids,
    cfg: AlignConfig,
) -> tuple[dict[int, AuxiliaryLabel], float]:
    """Assign each cluster an auxiliary label by nearest-class distance.

    Returns the per-cluster labels and the threshold actually used.
    Ties on the minimum distance resolve to the smaller class identifier
    (centroids are stored in identifier order).
    """
    if len(cents.classes) == 0:
        raise ValueError("no class centroids")
    t = resolve_threshold(cents, cfg)

    out: dict[int, AuxiliaryLabel] = {}
    for cid in sorted(cluster_centroids):
        v = np.asarray(cluster_centroids[cid], dtype=np.float64)
        diffs = cents.centroids - v
        dists = np.einsum("ij,ij->i", diffs, diffs)
        best = int(np.argmin(dists))  # first minimum wins the tie
        d_min = float(dists[best])
        if d_min >= t:
            out[cid] = AuxiliaryLabel(POTENTIAL_UNKNOWN, None, d_min)
        else:
            out[cid] = AuxiliaryLabel(KNOWN, cents.classes[best], d_min)
    return out, t
