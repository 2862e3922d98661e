"""Density-based clustering of embedding vectors.

Plain O(N^2) DBSCAN over Euclidean distance, deterministic by construction:
points are scanned in ascending index order, cluster ids are assigned in
discovery order, and border points join the first cluster whose expansion
reaches them.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

NOISE = -1
_UNVISITED = -2


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray  # per-point cluster id, NOISE for noise
    n_clusters: int
    eps: float
    min_pts: int

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)

    @property
    def noise_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NOISE)


def _neighbors(points: np.ndarray, i: int, eps_sq: float) -> np.ndarray:
    d = points - points[i]
    return np.flatnonzero(np.einsum("ij,ij->i", d, d) <= eps_sq)


def dbscan(points, eps: float, min_pts: int) -> ClusterAssignment:
    """Cluster points with DBSCAN semantics.

    A point is core iff it has at least `min_pts` neighbors within `eps`
    (distance inclusive, the point itself counts).  Non-core points within
    eps of a cluster become border members of the first cluster that reaches
    them; everything else is noise.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a nonempty (n, e) array")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    finite = np.isfinite(points).all(axis=1)
    if not finite.all():
        raise ValueError(f"non-finite point at index {int(np.flatnonzero(~finite)[0])}")

    n = points.shape[0]
    eps_sq = eps * eps
    labels = np.full(n, _UNVISITED, dtype=np.int64)
    cluster_id = 0

    for i in range(n):
        if labels[i] != _UNVISITED:
            continue
        nbrs = _neighbors(points, i, eps_sq)
        if nbrs.size < min_pts:
            labels[i] = NOISE
            continue
        labels[i] = cluster_id
        queue = deque(int(j) for j in nbrs if j != i)
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cluster_id  # noise becomes border
            if labels[j] != _UNVISITED:
                continue
            labels[j] = cluster_id
            jn = _neighbors(points, j, eps_sq)
            if jn.size >= min_pts:
                queue.extend(int(k) for k in jn)
        cluster_id += 1

    return ClusterAssignment(labels=labels, n_clusters=cluster_id, eps=float(eps), min_pts=int(min_pts))


def suggest_eps(points, min_pts: int) -> float:
    """Knee heuristic: 90th percentile of each point's min_pts-th neighbor distance.

    Neighbor counting excludes the point itself.  Returns 0 for degenerate
    inputs (all points identical); callers must substitute a positive floor.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n <= min_pts:
        raise ValueError(f"need more than min_pts={min_pts} points, got {n}")
    sq = np.sum(points**2, axis=1)
    dist_sq = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (points @ points.T), 0.0)
    # k-th nearest other point: column k after sorting each row (column 0 is self)
    kth = np.sort(dist_sq, axis=1)[:, min_pts]
    kdist = np.sqrt(np.sort(kth))
    idx = min(n - 1, max(0, math.ceil(0.9 * n) - 1))
    return float(kdist[idx])
