"""Lloyd's k-means with k-means++ seeding and empty-cluster repair.

The tree builder calls this at every internal split, so determinism under a
fixed seed matters as much as quality: identical inputs must reproduce the
same clustering bit-for-bit. All arithmetic runs in float64.

Empty clusters are repaired by moving the point farthest from its assigned
centroid into the empty cluster (the cluster's centroid becomes that point),
which guarantees every returned cluster is non-empty and keeps the recursion
arity predictable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray        # (k, dim) float64
    assignment: np.ndarray       # (n,) int64, assignment[i] achieves the min distance
    sse: float
    sse_history: list            # sse after seeding, then after each iteration
    n_iters: int
    trace: list = None           # optional [(centroids, assignment)] per history entry


def _pairwise_d2(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (n, k), computed by direct subtraction."""
    n = points.shape[0]
    k = centroids.shape[0]
    out = np.empty((n, k))
    step = max(1, 4_000_000 // max(1, k * points.shape[1]))
    for s in range(0, n, step):
        diff = points[s:s + step, None, :] - centroids[None, :, :]
        out[s:s + step] = (diff * diff).sum(axis=2)
    return out


def _seed_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _repair_empty(points, centroids, assignment, sizes):
    """Fill each empty cluster with the farthest point from a donor of size >= 2.

    Mutates centroids/assignment/sizes in place; returns True if anything moved.
    """
    empties = np.nonzero(sizes == 0)[0]
    if empties.size == 0:
        return False
    d2_assigned = ((points - centroids[assignment]) ** 2).sum(axis=1)
    for ce in empties:
        eligible = sizes[assignment] >= 2
        if not eligible.any():
            break
        masked = np.where(eligible, d2_assigned, -np.inf)
        far = int(np.argmax(masked))
        sizes[assignment[far]] -= 1
        assignment[far] = ce
        sizes[ce] = 1
        centroids[ce] = points[far]
        d2_assigned[far] = 0.0
    return True


def _finalize_nonempty(points, centroids, assignment):
    """Last-resort repair for degenerate data (exact duplicates): pin moved
    points so every cluster stays non-empty while all other points keep a
    minimum-distance assignment."""
    k = centroids.shape[0]
    pinned = {}
    for _ in range(k):
        sizes = np.bincount(assignment, minlength=k)
        if (sizes > 0).all():
            break
        d2_assigned = ((points - centroids[assignment]) ** 2).sum(axis=1)
        for ce in np.nonzero(sizes == 0)[0]:
            eligible = sizes[assignment] >= 2
            for i in pinned:
                eligible[i] = False
            if not eligible.any():
                break
            far = int(np.argmax(np.where(eligible, d2_assigned, -np.inf)))
            sizes[assignment[far]] -= 1
            assignment[far] = ce
            sizes[ce] = 1
            centroids[ce] = points[far]
            pinned[far] = ce
            d2_assigned[far] = 0.0
        d2 = _pairwise_d2(points, centroids)
        assignment = d2.argmin(axis=1)
        for i, c in pinned.items():
            assignment[i] = c
    return centroids, assignment


def train(points: np.ndarray, k: int, max_iters: int = 25, seed: int = 0,
          record_trace: bool = False) -> KMeansResult:
    """Cluster `points` into `k` non-empty clusters.

    The returned assignment is consistent with the returned centroids: every
    point's assigned centroid achieves its minimum distance (repaired points
    sit exactly on their centroid). `sse_history[0]` is the sse of the
    k-means++ seeds alone; subsequent entries follow each Lloyd iteration.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty 2-D array")
    if not np.isfinite(points).all():
        raise ValueError("points contain non-finite values")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, n={n}]")
    rng = np.random.default_rng(seed)

    centroids = _seed_pp(points, k, rng)
    d2 = _pairwise_d2(points, centroids)
    assignment = d2.argmin(axis=1)
    idx = np.arange(n)
    history = [float(d2[idx, assignment].sum())]
    trace = [(centroids.copy(), assignment.copy())] if record_trace else None

    sizes = np.bincount(assignment, minlength=k)
    _repair_empty(points, centroids, assignment, sizes)

    n_iters = 0
    for _ in range(max_iters):
        # Update step: means of the current assignment (empty handled by repair).
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, points)
        sizes = np.bincount(assignment, minlength=k)
        nonzero = sizes > 0
        centroids[nonzero] = sums[nonzero] / sizes[nonzero, None]
        _repair_empty(points, centroids, assignment, sizes)

        d2 = _pairwise_d2(points, centroids)
        new_assignment = d2.argmin(axis=1)
        n_iters += 1
        history.append(float(d2[idx, new_assignment].sum()))
        if trace is not None:
            trace.append((centroids.copy(), new_assignment.copy()))
        converged = np.array_equal(new_assignment, assignment)
        assignment = new_assignment
        if converged:
            break

    if (np.bincount(assignment, minlength=k) == 0).any():
        centroids, assignment = _finalize_nonempty(points, centroids, assignment)
        d2 = _pairwise_d2(points, centroids)
        history.append(float(d2[idx, assignment].sum()))
        if trace is not None:
            trace.append((centroids.copy(), assignment.copy()))

    sse = history[-1]
    return KMeansResult(centroids, assignment.astype(np.int64), sse, history,
                        n_iters, trace)
