"""Exact filtered k-NN by linear scan, used as the reference answer.

The oracle works directly on a Dataset plus raw per-vector label sets; it
never touches the tree index, so index bugs cannot leak into the truth it
produces. Each query costs exactly one distance computation per qualifying
vector (`qualified_count`), which is also the oracle's reported work.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, LabelAssignment
from .predicate import And, Label, Not, Or, Predicate


def satisfies(pred, label_set) -> bool:
    """Evaluate a predicate against one vector's label set."""
    if isinstance(pred, (int, np.integer)):
        return int(pred) in label_set
    if isinstance(pred, Label):
        return pred.value in label_set
    if isinstance(pred, And):
        return all(satisfies(c, label_set) for c in pred.children)
    if isinstance(pred, Or):
        return any(satisfies(c, label_set) for c in pred.children)
    if isinstance(pred, Not):
        return not satisfies(pred.child, label_set)
    raise TypeError(f"not a predicate: {pred!r}")


def qualifier_rows(assignment: LabelAssignment, pred) -> np.ndarray:
    """Row indices of vectors whose label sets satisfy `pred`."""
    return np.asarray(
        [i for i, s in enumerate(assignment.labels) if satisfies(pred, s)],
        dtype=np.int64,
    )


@dataclass
class GroundTruth:
    """Exact k-NN answer with every vector at the k-th distance included."""

    keys: np.ndarray          # uint64, ordered by (distance, key)
    distances: np.ndarray     # float64 Euclidean, same order
    qualified_count: int = None

    def __len__(self):
        return len(self.keys)


def exact_filtered_knn(dataset: Dataset, assignment: LabelAssignment,
                       xq, pred, k: int) -> GroundTruth:
    """Exact k nearest qualifying vectors under full pre-filtering.

    Ties at the k-th distance are all included, so the result may hold more
    than k entries; callers counting recall treat any of them as correct.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    xq = np.asarray(xq, dtype=np.float64).reshape(-1)
    if xq.shape[0] != dataset.dim:
        raise ValueError("query dimension mismatch")
    rows = qualifier_rows(assignment, pred)
    if rows.size == 0:
        return GroundTruth(np.empty(0, np.uint64), np.empty(0), 0)
    diff = dataset.vectors[rows].astype(np.float64) - xq
    d2 = (diff * diff).sum(axis=1)
    keys = dataset.keys[rows]
    order = np.lexsort((keys, d2))
    d2, keys = d2[order], keys[order]
    if len(rows) > k:
        cut = np.searchsorted(d2, d2[k - 1], side="right")
        d2, keys = d2[:cut], keys[:cut]
    return GroundTruth(keys.astype(np.uint64), np.sqrt(d2), int(rows.size))


def write_ground_truth(path: str, truths) -> None:
    """Per query: u32 entry count, then (u64 key, f32 distance) pairs, LE."""
    with open(path, "wb") as fh:
        for gt in truths:
            fh.write(struct.pack("<I", len(gt.keys)))
            for key, dist in zip(gt.keys, gt.distances):
                fh.write(struct.pack("<Qf", int(key), float(dist)))


def read_ground_truth(path: str):
    out = []
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError(f"{path}: truncated count at byte {pos}")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need = count * 12
        if pos + need > len(data):
            raise ValueError(f"{path}: truncated entries at byte {pos}")
        keys = np.empty(count, dtype=np.uint64)
        dists = np.empty(count, dtype=np.float64)
        for i in range(count):
            keys[i], dists[i] = struct.unpack_from("<Qf", data, pos)
            pos += 12
        out.append(GroundTruth(keys, dists))
    return out
