"""Filtered search over the embedded per-label structures.

The traversal follows the classic two-phase shape: a width-limited beam
descends from the root to seed a frontier, then a best-first loop pops the
most promising node, folds its buffer into the running result set, or pushes
its children. A popped node whose membership test fails is skipped (for
Bloom filters this is where false positives die). The loop stops when a
folded buffer leaves the capped result set unchanged, or the queue drains.

Nodes are ranked by ``||mu_n - q|| - alpha * mean_radius(n)``: distance to
the centroid discounted by the node's mean point radius, so large spread-out
clusters are explored before tight far ones.

The beam keeps the best `beam_width` children per level but *parks* the rest
in the frontier instead of discarding them; with membership tests that never
lie (exact-set mode) and an uncapped result set, the traversal therefore
reaches every buffer of the label and the result is exact.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .labels import node_contains_label


@dataclass
class SearchParams:
    k: int = 10
    ef: int = 64              # result-set cap; None = unbounded (exact sweep)
    beam_width: int = 4
    alpha: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.ef is not None and self.ef < 1:
            raise ValueError("ef must be >= 1 or None")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass
class SearchStats:
    centroid_dists: int = 0
    vector_dists: int = 0
    buffers_visited: int = 0
    nodes_popped: int = 0


@dataclass
class SearchResult:
    hits: list                      # [(external_key, euclidean_distance)]
    stats: SearchStats = field(default_factory=SearchStats)

    def keys(self):
        return [k for k, _ in self.hits]


class EmbeddedLabelView:
    """Traversal adapter for a label embedded in the base tree."""

    def __init__(self, index, label):
        self.index = index
        self.label = label

    @property
    def root(self):
        return self.index.root

    def contains(self, node) -> bool:
        return node_contains_label(self.index, node, self.label)

    def buffer(self, node):
        return node.buffers.get(self.label)

    def children(self, node):
        return node.children

    def child_scores(self, node, xq, alpha, stats):
        stats.centroid_dists += len(node.children)
        d = np.linalg.norm(node.child_mat - xq, axis=1)
        return d - alpha * node.child_radii

    def score(self, node, xq, alpha, stats):
        stats.centroid_dists += 1
        return float(np.linalg.norm(node.centroid - xq)) - alpha * node.mean_radius

    def resolve(self, raws, xq, stats):
        """Squared distances and keys for a buffer's raw ids."""
        locs = self.index.locs
        rows = np.empty((len(raws), self.index.dim), dtype=np.float32)
        for i, raw in enumerate(raws):
            leaf, slot = locs[raw]
            rows[i] = leaf.vectors[slot]
        stats.vector_dists += len(raws)
        diff = rows.astype(np.float64) - xq
        return (diff * diff).sum(axis=1)


class _ResultSet:
    """Result accumulator capped at ef, ordered by (distance^2, raw id)."""

    __slots__ = ("ef", "d2", "raw")

    def __init__(self, ef):
        self.ef = ef
        self.d2 = np.empty(0, dtype=np.float64)
        self.raw = np.empty(0, dtype=np.uint64)

    def fold(self, d2_new, raw_new) -> bool:
        d2 = np.concatenate([self.d2, d2_new])
        raw = np.concatenate([self.raw, np.asarray(raw_new, dtype=np.uint64)])
        order = np.lexsort((raw, d2))
        if self.ef is not None:
            order = order[: self.ef]
        d2, raw = d2[order], raw[order]
        changed = not (len(raw) == len(self.raw) and np.array_equal(raw, self.raw))
        self.d2, self.raw = d2, raw
        return changed


def beam_descent(view, xq, params: SearchParams, stats: SearchStats):
    """Label-aware beam from the root; returns the frontier as (score, node)
    pairs: every buffer holder met on the way down, every candidate that fell
    out of the beam, and the final beam level."""
    root = view.root
    if root is None or not view.contains(root):
        return []
    frontier = []
    beam = [(view.score(root, xq, params.alpha, stats), root)]
    while beam:
        expand = []
        for entry in beam:
            node = entry[1]
            if view.buffer(node) is not None or not view.children(node):
                frontier.append(entry)
            else:
                expand.append(node)
        if not expand:
            break
        candidates = []
        for node in expand:
            scores = view.child_scores(node, xq, params.alpha, stats)
            for child, sc in zip(view.children(node), scores):
                if view.contains(child):
                    candidates.append((float(sc), child))
        candidates.sort(key=lambda t: (t[0], t[1].order_key()))
        beam = candidates[: params.beam_width]
        frontier.extend(candidates[params.beam_width:])
    return frontier


def best_first(view, xq, frontier, params: SearchParams, stats: SearchStats,
               result_cap=_ResultSet) -> SearchResult:
    heap = [(score, node.order_key(), node) for score, node in frontier]
    heapq.heapify(heap)
    results = result_cap(params.ef)
    while heap:
        _, _, node = heapq.heappop(heap)
        stats.nodes_popped += 1
        if not view.contains(node):
            continue
        buf = view.buffer(node)
        if buf is not None:
            stats.buffers_visited += 1
            d2 = view.resolve(buf, xq, stats)
            if not results.fold(d2, buf):
                break
        else:
            children = view.children(node)
            if children:
                scores = view.child_scores(node, xq, params.alpha, stats)
                for child, sc in zip(children, scores):
                    heapq.heappush(heap, (float(sc), child.order_key(), child))
    top_raw = results.raw[: params.k]
    top_d = np.sqrt(results.d2[: params.k])
    hits = [(view.index.key_of(int(r)), float(d)) for r, d in zip(top_raw, top_d)]
    return SearchResult(hits, stats)


def search_label(index, xq, label: int, params: SearchParams = None) -> SearchResult:
    """Approximate k-nearest among the vectors carrying `label`.

    Unknown or empty labels return an empty result with zeroed stats.
    """
    if params is None:
        params = SearchParams()
    xq = np.asarray(xq, dtype=np.float64).reshape(-1)
    if xq.shape[0] != index.dim:
        raise ValueError(f"query dim {xq.shape[0]} != index dim {index.dim}")
    stats = SearchStats()
    with index.lock.read():
        if index.registry.count(label) == 0:
            return SearchResult([], stats)
        view = EmbeddedLabelView(index, label)
        frontier = beam_descent(view, xq, params, stats)
        return best_first(view, xq, frontier, params, stats)


def recall_at_k(result_keys, truth_keys, k: int) -> float:
    """|retrieved ∩ true| / k; `truth_keys` should include distance ties."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hit = len(set(result_keys) & set(truth_keys))
    return min(hit, k) / k
