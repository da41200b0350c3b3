"""Per-label index machinery embedded in the base tree.

For each label l, the vectors carrying l induce a connected subtree of the
base tree. That subtree is materialized as *buffers*: sorted lists of raw
vector ids stored at the subtree's leaves. A node holds a buffer exactly
when its subtree has at most `buffer_capacity` qualifying vectors while its
parent has more (base leaves always hold theirs, even oversized). Every node
on the subtree additionally reports l through a Bloom filter, so search can
prune unrelated branches without storing exact label sets per node.

Filters share one (m, k, seed1, seed2) parameter tuple per index, sized for
a false-positive target of `target_fp_rate` at twice the average per-node
label load. They never produce false negatives; unions for recomputation are
plain bit-ORs. A build flag (`exact_sets`) replaces filter queries with
exact membership for deterministic completeness testing.
"""

from __future__ import annotations

import math
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .dataset import RESERVED_LABEL_BASE
from .util import subseed

if TYPE_CHECKING:  # pragma: no cover
    from .dataset import Dataset, LabelAssignment
    from .tree import TreeIndex, TreeNode

_MASK64 = (1 << 64) - 1
DEFAULT_EXPECTED_LABELS = 32


@dataclass
class BloomConfig:
    target_fp_rate: float = 0.01
    expected_labels_per_node: int = None   # sized from data when left unset
    exact_sets: bool = False


def plan_bloom(expected_n: int, target_fp_rate: float):
    """Classic sizing: bits and hash count for `expected_n` insertions."""
    expected_n = max(1, int(expected_n))
    if not 0.0 < target_fp_rate < 1.0:
        raise ValueError("target_fp_rate must be in (0, 1)")
    m = math.ceil(-expected_n * math.log(target_fp_rate) / (math.log(2) ** 2))
    m = max(64, m)
    k = max(1, round(m / expected_n * math.log(2)))
    return m, min(k, 32)


def _mix64(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class BloomFilter:
    """Fixed-size Bloom filter over label ids, using double hashing.

    Probe i touches bit (h1 + i*h2) mod m, with h1/h2 drawn from two seeded
    64-bit mixes of the label. The bit array lives in a Python int.
    """

    __slots__ = ("params", "bits")

    def __init__(self, params, bits: int = 0):
        self.params = params          # (m_bits, k_hashes, seed1, seed2)
        self.bits = bits

    def _probes(self, label: int):
        m, k, s1, s2 = self.params
        h1 = _mix64(label ^ s1)
        h2 = _mix64(label ^ s2) | 1
        return ((h1 + i * h2) % m for i in range(k))

    def add(self, label: int) -> None:
        for pos in self._probes(label):
            self.bits |= 1 << pos

    def __contains__(self, label: int) -> bool:
        bits = self.bits
        return all((bits >> pos) & 1 for pos in self._probes(label))

    def union_in_place(self, other: "BloomFilter") -> None:
        self.bits |= other.bits

    @staticmethod
    def byte_size(m_bits: int) -> int:
        return (m_bits + 7) // 8

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes(self.byte_size(self.params[0]), "little")

    @classmethod
    def from_bytes(cls, data: bytes, params) -> "BloomFilter":
        return cls(params, int.from_bytes(data, "little"))


@dataclass
class LabelRegistry:
    """Live label population counts plus the runtime-label allocator."""

    counts: dict = field(default_factory=dict)
    next_virtual: int = RESERVED_LABEL_BASE

    def count(self, label: int) -> int:
        return self.counts.get(label, 0)

    def live_labels(self):
        return sorted(self.counts)

    def bump(self, label: int, delta: int) -> None:
        new = self.counts.get(label, 0) + delta
        if new < 0:
            raise ValueError(f"label {label} count went negative")
        if new == 0:
            self.counts.pop(label, None)
        else:
            self.counts[label] = new

    def allocate_virtual(self) -> int:
        v = self.next_virtual
        self.next_virtual += 1
        return v

    @staticmethod
    def is_virtual(label: int) -> bool:
        return label >= RESERVED_LABEL_BASE


def node_contains_label(index: "TreeIndex", node: "TreeNode", label: int) -> bool:
    """Membership test used by search: exact in exact-set mode, else Bloom."""
    if index.exact_sets:
        return label in node.label_counts
    if node.bloom is None:
        return False
    return label in node.bloom


def bloom_add(index: "TreeIndex", node: "TreeNode", label: int) -> None:
    if not index.exact_sets and node.bloom is not None:
        node.bloom.add(label)


def ensure_filters(index: "TreeIndex", expected_hint: int = None) -> None:
    """Materialize empty filters at every node (no-op in exact-set mode).

    Filter parameters are fixed for the life of the index the first time this
    runs; later calls reuse them.
    """
    if index.exact_sets:
        return
    if index.bloom_params is None:
        expected = (index.bloom_config.expected_labels_per_node
                    or expected_hint or DEFAULT_EXPECTED_LABELS)
        m, k = plan_bloom(expected, index.bloom_config.target_fp_rate)
        index.bloom_params = (m, k,
                              subseed(index.seed, "bloom", 1) & _MASK64,
                              subseed(index.seed, "bloom", 2) & _MASK64)
    for node in index.iter_nodes():
        if node.bloom is None:
            node.bloom = BloomFilter(index.bloom_params)


def fresh_filters(index: "TreeIndex", start: "TreeNode") -> None:
    """Replace filters under `start` with empty ones (same parameters)."""
    if index.exact_sets or index.bloom_params is None:
        return
    for node in index.iter_nodes(start):
        node.bloom = BloomFilter(index.bloom_params)


def recompute_bloom(index: "TreeIndex", node: "TreeNode") -> bool:
    """Rebuild a node's filter from its own buffers and its children's
    filters (the conceptual union), returning True if the bits changed."""
    if index.exact_sets or index.bloom_params is None:
        return False
    fresh = BloomFilter(index.bloom_params)
    for label in node.buffers:
        fresh.add(label)
    for child in node.children:
        if child.bloom is not None:
            fresh.union_in_place(child.bloom)
    changed = fresh.bits != (node.bloom.bits if node.bloom is not None else 0)
    node.bloom = fresh
    return changed


def recompute_upward(index: "TreeIndex", nodes) -> None:
    """Recompute the given nodes (assumed deepest-first), then keep walking
    toward the root until a recomputation leaves a filter unchanged."""
    if index.exact_sets:
        return
    changed_any = False
    deepest = None
    for node in nodes:
        if recompute_bloom(index, node):
            changed_any = True
        deepest = node
    if deepest is None or not changed_any:
        return
    # Continue from the deepest affected node's ancestors.
    chain = _ancestors_of(index, deepest)
    for anc in chain:
        if not recompute_bloom(index, anc):
            break


def _ancestors_of(index: "TreeIndex", node: "TreeNode"):
    out = []
    cur = index.root
    for branch in node.path:
        out.append(cur)
        cur = cur.children[branch]
    out.reverse()
    return out


def place_label(index: "TreeIndex", node: "TreeNode", label: int, ids,
                fill_blooms: bool = True) -> None:
    """Recursively embed a label's sorted id list under `node`.

    Places a buffer once the slice fits in `buffer_capacity` (or the base
    leaf is reached), mirroring the range-partitioning used for transient
    predicate indexes. Performs no distance computations.
    """
    cap = index.cfg.buffer_capacity
    node.label_counts[label] = len(ids)
    if fill_blooms:
        bloom_add(index, node, label)
    if len(ids) <= cap or node.is_leaf:
        node.buffers[label] = list(ids)
        return
    for child in node.children:
        lo = bisect_left(ids, child.prefix)
        hi = bisect_left(ids, child.range_hi)
        if lo < hi:
            place_label(index, child, label, ids[lo:hi], fill_blooms)


def build_all_labels(index: "TreeIndex", dataset: "Dataset",
                     assignment: "LabelAssignment") -> None:
    """Attach every label in `assignment` to a freshly built index.

    Pure id bookkeeping: buffers, per-node counts, slot label sets, and
    Bloom filters are produced without a single distance computation.
    Filters are sized here (unless already fixed) for twice the average
    per-node label load observed in the batch placement.
    """
    if len(assignment) != dataset.n:
        raise ValueError("assignment length does not match dataset")
    if index.registry.counts:
        raise ValueError("index already has labels attached")

    per_label = {}
    for row, labels in enumerate(assignment.labels):
        if not labels:
            continue
        raw = index.key_to_raw[int(dataset.keys[row])]
        leaf, slot = index.locs[raw]
        for label in labels:
            per_label.setdefault(label, []).append(raw)
            leaf.slot_labels[slot].add(label)

    for label in sorted(per_label):
        ids = sorted(per_label[label])
        place_label(index, index.root, label, ids, fill_blooms=False)
        index.registry.counts[label] = len(ids)

    if not index.exact_sets:
        # A filter can never hold more distinct labels than exist, and the
        # root always holds all of them, so size every filter for that load.
        ensure_filters(index, expected_hint=max(1, len(per_label)))
        for node in index.iter_nodes():
            for label in node.label_counts:
                node.bloom.add(label)


def label_member_ids(index: "TreeIndex", label: int):
    """Sorted raw ids of every vector carrying `label`, gathered from the
    label's buffers via exact per-node counts (never via filters)."""
    out = []

    def visit(node):
        if label not in node.label_counts:
            return
        buf = node.buffers.get(label)
        if buf is not None:
            out.extend(buf)
            return
        for child in node.children:
            visit(child)

    if index.root is not None:
        visit(index.root)
    return out
