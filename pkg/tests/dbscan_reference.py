"""Brute-force DBSCAN reference used as the test oracle.

Materializes the full distance matrix, finds core points, builds clusters
as connected components of the core-core adjacency graph (ordered by their
smallest core index), and attaches each border point to the lowest-ordered
adjacent cluster.  This mirrors the deterministic scan-order semantics of
the production implementation through an independent construction.
"""

import numpy as np

NOISE = -1


def reference_dbscan(points, eps, min_pts):
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    diff = points[:, None, :] - points[None, :, :]
    dist_sq = np.sum(diff * diff, axis=2)
    adjacency = dist_sq <= eps * eps

    core = adjacency.sum(axis=1) >= min_pts
    labels = np.full(n, NOISE, dtype=np.int64)

    # connected components over core points only
    comp = np.full(n, -1, dtype=np.int64)
    n_comp = 0
    for i in range(n):
        if not core[i] or comp[i] != -1:
            continue
        stack = [i]
        comp[i] = n_comp
        while stack:
            u = stack.pop()
            for v in np.flatnonzero(adjacency[u] & core):
                if comp[v] == -1:
                    comp[v] = n_comp
                    stack.append(int(v))
        n_comp += 1

    # components were discovered by ascending min core index, so comp ids
    # already match the scan-order cluster ids
    labels[core] = comp[core]

    for i in range(n):
        if core[i]:
            continue
        reachable = comp[np.flatnonzero(adjacency[i] & core)]
        if reachable.size:
            labels[i] = reachable.min()
    return labels, n_comp
