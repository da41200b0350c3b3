"""Hierarchical k-means tree: the base index.

Every vector gets a 64-bit id that packs its root-to-leaf branch path into
the most-significant bits (zero-padded to uniform length) and its slot
within the leaf into the least-significant bits. Sorting raw ids therefore
groups every subtree into one contiguous run, and each node owns the
half-open id interval [prefix, prefix + span).

A node at depth d with branch path p covers ids whose top d*bits_per_branch
bits equal p; shallow leaves use the unused padding bits below their path as
extra slot room, so a leaf's slot budget is 2**(64 - d*bits_per_branch).
Because the padding is zero, a raw id alone does not reveal its leaf depth;
decode_id takes the depth from the caller (the tree supplies it when
walking).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kmeans
from .dataset import Dataset
from .labels import BloomConfig, BloomFilter, LabelRegistry
from .util import DistanceCounter, RWLock, subseed

SNAPSHOT_MAGIC = b"CUR2"
SNAPSHOT_VERSION = 1
ID_BITS = 64
FULL_RANGE = 1 << ID_BITS


@dataclass(frozen=True)
class TreeConfig:
    branch_factor: int = 16
    leaf_capacity: int = 64
    max_depth: int = None
    slot_bits: int = 8
    buffer_capacity: int = None   # defaults to leaf_capacity
    kmeans_iters: int = 25

    def __post_init__(self):
        if self.branch_factor < 2:
            raise ValueError("branch_factor must be >= 2")
        if self.leaf_capacity < 1:
            raise ValueError("leaf_capacity must be >= 1")
        if not 1 <= self.slot_bits <= ID_BITS:
            raise ValueError("slot_bits out of range")
        if self.leaf_capacity > (1 << self.slot_bits):
            raise ValueError("leaf_capacity exceeds 2**slot_bits")
        if self.max_depth is None:
            object.__setattr__(
                self, "max_depth", (ID_BITS - self.slot_bits) // self.bits_per_branch
            )
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.max_depth * self.bits_per_branch + self.slot_bits > ID_BITS:
            raise ValueError(
                f"max_depth*bits_per_branch + slot_bits = "
                f"{self.max_depth * self.bits_per_branch + self.slot_bits} exceeds {ID_BITS}"
            )
        if self.buffer_capacity is None:
            object.__setattr__(self, "buffer_capacity", self.leaf_capacity)
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")

    @property
    def bits_per_branch(self) -> int:
        return max(1, (self.branch_factor - 1).bit_length())


def slot_budget(cfg: TreeConfig, depth: int) -> int:
    """Number of distinct slots a leaf at `depth` can address."""
    return 1 << (ID_BITS - depth * cfg.bits_per_branch)


def encode_id(path, slot: int, cfg: TreeConfig) -> int:
    """Pack (branch path, slot) into a raw 64-bit id.

    Strictly monotone in (path, slot) order over ids that can coexist in one
    tree (leaf paths are never prefixes of each other).
    """
    bpb = cfg.bits_per_branch
    depth = len(path)
    if depth > cfg.max_depth:
        raise ValueError(f"path depth {depth} exceeds max_depth {cfg.max_depth}")
    raw = 0
    for i, branch in enumerate(path):
        if not 0 <= branch < cfg.branch_factor:
            raise ValueError(f"branch {branch} out of range at level {i}")
        raw |= branch << (ID_BITS - (i + 1) * bpb)
    if not 0 <= slot < slot_budget(cfg, depth):
        raise ValueError(f"slot {slot} exceeds the budget of a depth-{depth} leaf")
    return raw | slot


def decode_id(raw: int, cfg: TreeConfig, depth: int = None):
    """Recover (path, slot) from a raw id.

    The zero padding below a shallow leaf's path is indistinguishable from
    branch digits, so the leaf depth must be supplied; it defaults to
    max_depth. Walking the tree (see `walk_path`) recovers the true depth.
    """
    if depth is None:
        depth = cfg.max_depth
    bpb = cfg.bits_per_branch
    mask = (1 << bpb) - 1
    path = tuple((raw >> (ID_BITS - (i + 1) * bpb)) & mask for i in range(depth))
    slot = raw & (slot_budget(cfg, depth) - 1)
    return path, slot


def node_range(path, cfg: TreeConfig):
    """Half-open raw-id interval [lo, hi) owned by the node at `path`."""
    lo = encode_id(path, 0, cfg)
    return lo, lo + slot_budget(cfg, len(path))


class TreeNode:
    __slots__ = (
        "path", "prefix", "range_hi", "centroid", "mean_radius", "children",
        "child_mat", "child_radii", "size", "update_count", "keys", "vectors",
        "alive", "slot_labels", "buffers", "bloom", "label_counts",
    )

    def __init__(self, path, cfg: TreeConfig):
        self.path = tuple(path)
        self.prefix, self.range_hi = node_range(self.path, cfg)
        self.centroid = None          # (dim,) float64
        self.mean_radius = 0.0        # exact at build/rebuild time only
        self.children = []
        self.child_mat = None         # stacked child centroids for scoring
        self.child_radii = None       # matching mean radii
        self.size = 0                 # live vectors in this subtree
        self.update_count = 0         # vector inserts/deletes since last rebuild
        self.keys = None              # leaf payload: list[int]
        self.vectors = None           # leaf payload: (n_slots, dim) float32
        self.alive = None             # leaf payload: list[bool]
        self.slot_labels = None       # leaf payload: list[set[int]]
        self.buffers = {}             # label -> sorted list of raw ids
        self.bloom = None             # BloomFilter, or None in exact-set mode
        self.label_counts = {}        # label -> qualifying count in subtree

    @property
    def depth(self) -> int:
        return len(self.path)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def order_key(self):
        """Deterministic total order over nodes of one tree."""
        return (self.prefix, self.depth)

    def __repr__(self):
        kind = "leaf" if self.is_leaf else f"internal[{len(self.children)}]"
        return f"<TreeNode {self.path} {kind} size={self.size}>"


class TreeIndex:
    """Base tree plus the per-label machinery hung off its nodes."""

    def __init__(self, cfg: TreeConfig, dim: int, seed: int,
                 bloom: BloomConfig = None):
        self.cfg = cfg
        self.dim = dim
        self.seed = seed
        self.bloom_config = bloom if bloom is not None else BloomConfig()
        self.bloom_params = None      # set once filters are materialized
        self.root = None
        self.key_to_raw = {}
        self.locs = {}                # raw id -> (leaf, slot)
        self.registry = LabelRegistry()
        self.counter = DistanceCounter()
        self.lock = RWLock()
        self.rebuild_threshold = 0.5
        self.rebuild_queue = []       # node paths pending rebuild, insertion order
        self.warnings = []
        self.epoch = 0                # bumped on every mutation; caches key off it

    @property
    def n_live(self) -> int:
        return self.root.size if self.root is not None else 0

    @property
    def exact_sets(self) -> bool:
        return self.bloom_config.exact_sets

    def iter_nodes(self, start: TreeNode = None):
        stack = [start if start is not None else self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def node_at(self, path) -> TreeNode:
        node = self.root
        for branch in path:
            node = node.children[branch]
        return node

    def walk_path(self, raw: int):
        """Nodes from the root to the leaf owning `raw`."""
        node = self.root
        out = [node]
        bpb = self.cfg.bits_per_branch
        mask = (1 << bpb) - 1
        while node.children:
            digit = (raw >> (ID_BITS - (node.depth + 1) * bpb)) & mask
            if digit >= len(node.children):
                raise KeyError(f"raw id {raw:#x} does not address a node")
            node = node.children[digit]
            out.append(node)
        return out

    def vector_of(self, raw: int) -> np.ndarray:
        leaf, slot = self.locs[raw]
        return leaf.vectors[slot]

    def key_of(self, raw: int) -> int:
        leaf, slot = self.locs[raw]
        return leaf.keys[slot]


def _make_leaf(index: TreeIndex, node: TreeNode, rows, dataset: Dataset):
    cfg = index.cfg
    n = len(rows)
    budget = slot_budget(cfg, node.depth)
    if n > budget:
        raise ValueError(
            f"cannot encode {n} vectors in a depth-{node.depth} leaf "
            f"(slot budget {budget}); increase slot_bits or reduce duplicates"
        )
    if n > cfg.leaf_capacity:
        index.warnings.append(
            f"oversized leaf at depth {node.depth} path {node.path}: "
            f"{n} vectors exceed capacity {cfg.leaf_capacity}"
        )
    node.keys = [int(k) for k in dataset.keys[rows]]
    node.vectors = np.ascontiguousarray(dataset.vectors[rows], dtype=np.float32)
    node.alive = [True] * n
    node.slot_labels = [set() for _ in range(n)]
    for slot, key in enumerate(node.keys):
        raw = node.prefix | slot
        index.locs[raw] = (node, slot)
        index.key_to_raw[key] = raw


def build_subtree(index: TreeIndex, path, rows, dataset: Dataset, seed: int) -> TreeNode:
    """Recursive hierarchical k-means over dataset rows `rows`."""
    cfg = index.cfg
    node = TreeNode(path, cfg)
    pts = dataset.vectors[rows].astype(np.float64)
    node.centroid = pts.mean(axis=0)
    node.mean_radius = float(np.linalg.norm(pts - node.centroid, axis=1).mean())
    node.size = len(rows)
    if len(rows) <= cfg.leaf_capacity or node.depth >= cfg.max_depth:
        _make_leaf(index, node, rows, dataset)
        return node
    k = min(cfg.branch_factor, len(rows))
    result = kmeans.train(pts, k, max_iters=cfg.kmeans_iters,
                          seed=subseed(seed, "split", *path))
    for c in range(k):
        child_rows = rows[result.assignment == c]
        node.children.append(build_subtree(index, path + (c,), child_rows, dataset, seed))
    _cache_children(node)
    return node


def _cache_children(node: TreeNode) -> None:
    node.child_mat = np.stack([c.centroid for c in node.children])
    node.child_radii = np.array([c.mean_radius for c in node.children])


def build(dataset: Dataset, cfg: TreeConfig = None, seed: int = 0,
          bloom: BloomConfig = None) -> TreeIndex:
    """Build the base tree over a dataset. Labels attach separately."""
    if cfg is None:
        cfg = TreeConfig()
    if dataset.n == 0:
        raise ValueError("cannot build an index over an empty dataset")
    index = TreeIndex(cfg, dataset.dim, seed, bloom)
    index.root = build_subtree(index, (), np.arange(dataset.n), dataset, seed)
    return index


def nearest_leaf(index: TreeIndex, x: np.ndarray) -> TreeNode:
    """Greedy descent to the leaf whose centroid chain is closest to `x`."""
    x = np.asarray(x, dtype=np.float64)
    node = index.root
    while node.children:
        d2 = ((node.child_mat - x) ** 2).sum(axis=1)
        index.counter.centroid += len(node.children)
        node = node.children[int(np.argmin(d2))]
    return node


def export_dataset(index: TreeIndex):
    """Recover (Dataset, LabelAssignment) for the live vectors, ordered by
    ascending raw id. Useful for oracle checks against a mutated index."""
    from .dataset import LabelAssignment

    raws = sorted(index.key_to_raw.values())
    vectors = np.empty((len(raws), index.dim), dtype=np.float32)
    keys = np.empty(len(raws), dtype=np.uint64)
    labels = []
    for i, raw in enumerate(raws):
        leaf, slot = index.locs[raw]
        vectors[i] = leaf.vectors[slot]
        keys[i] = leaf.keys[slot]
        labels.append(set(leaf.slot_labels[slot]))
    return Dataset(vectors, keys), LabelAssignment(labels)


# ---------------------------------------------------------------------------
# Snapshot serialization (layout documented in docs/snapshot.md)
# ---------------------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def raw(self, data: bytes):
        self.buf.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def raw(self, n: int) -> bytes:
        out = self.data[self.pos:self.pos + n]
        if len(out) != n:
            raise ValueError(f"snapshot truncated at byte {self.pos}")
        self.pos += n
        return out


def _write_node(w: _Writer, node: TreeNode, index: TreeIndex):
    w.pack("BI", 1 if node.is_leaf else 0, len(node.children))
    w.pack("QQd", node.size, node.update_count, node.mean_radius)
    w.raw(np.asarray(node.centroid, dtype="<f8").tobytes())
    if node.bloom is not None:
        w.pack("B", 1)
        w.raw(node.bloom.to_bytes())
    else:
        w.pack("B", 0)
    w.pack("I", len(node.label_counts))
    for label in sorted(node.label_counts):
        w.pack("IQ", label, node.label_counts[label])
    w.pack("I", len(node.buffers))
    for label in sorted(node.buffers):
        ids = node.buffers[label]
        w.pack("IQ", label, len(ids))
        w.raw(np.asarray(ids, dtype="<u8").tobytes())
    if node.is_leaf:
        w.pack("Q", len(node.keys))
        for slot, key in enumerate(node.keys):
            labels = sorted(node.slot_labels[slot])
            w.pack("QBI", key, 1 if node.alive[slot] else 0, len(labels))
            for lb in labels:
                w.pack("I", lb)
        w.raw(np.ascontiguousarray(node.vectors, dtype="<f4").tobytes())
    for child in node.children:
        _write_node(w, child, index)


def save_index(index: TreeIndex, path: str) -> None:
    cfg = index.cfg
    w = _Writer()
    w.raw(SNAPSHOT_MAGIC)
    w.pack("H", SNAPSHOT_VERSION)
    w.pack("B", 1 if index.exact_sets else 0)
    w.pack("IIIIII", cfg.branch_factor, cfg.leaf_capacity, cfg.max_depth,
           cfg.slot_bits, cfg.buffer_capacity, cfg.kmeans_iters)
    w.pack("IQ", index.dim, index.seed)
    w.pack("d", index.bloom_config.target_fp_rate)
    w.pack("I", index.bloom_config.expected_labels_per_node or 0)
    if index.bloom_params is not None:
        m, k, s1, s2 = index.bloom_params
        w.pack("BIIQQ", 1, m, k, s1, s2)
    else:
        w.pack("BIIQQ", 0, 0, 0, 0, 0)
    w.pack("d", index.rebuild_threshold)
    w.pack("Q", index.registry.next_virtual)
    w.pack("I", len(index.rebuild_queue))
    for p in index.rebuild_queue:
        w.pack("B", len(p))
        for digit in p:
            w.pack("B", digit)
    _write_node(w, index.root, index)
    data = w.buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)


def _read_node(r: _Reader, index: TreeIndex, path) -> TreeNode:
    cfg = index.cfg
    is_leaf, n_children = r.unpack("BI")
    node = TreeNode(path, cfg)
    node.size, node.update_count, node.mean_radius = r.unpack("QQd")
    node.centroid = np.frombuffer(r.raw(8 * index.dim), dtype="<f8").copy()
    has_bloom = r.unpack("B")
    if has_bloom:
        if index.bloom_params is None:
            raise ValueError("snapshot has node filters but no filter parameters")
        node.bloom = BloomFilter.from_bytes(r.raw(BloomFilter.byte_size(index.bloom_params[0])),
                                            index.bloom_params)
    n_counts = r.unpack("I")
    for _ in range(n_counts):
        label, cnt = r.unpack("IQ")
        node.label_counts[label] = cnt
    n_buffers = r.unpack("I")
    for _ in range(n_buffers):
        label, n_ids = r.unpack("IQ")
        ids = np.frombuffer(r.raw(8 * n_ids), dtype="<u8")
        node.buffers[label] = [int(v) for v in ids]
    if is_leaf:
        n_slots = r.unpack("Q")
        node.keys, node.alive, node.slot_labels = [], [], []
        for slot in range(n_slots):
            key, alive, n_labels = r.unpack("QBI")
            labels = set()
            for _ in range(n_labels):
                labels.add(r.unpack("I"))
            node.keys.append(key)
            node.alive.append(bool(alive))
            node.slot_labels.append(labels)
            if alive:
                raw = node.prefix | slot
                index.locs[raw] = (node, slot)
                index.key_to_raw[key] = raw
        node.vectors = np.frombuffer(
            r.raw(4 * n_slots * index.dim), dtype="<f4"
        ).reshape(n_slots, index.dim).copy()
    else:
        for c in range(n_children):
            node.children.append(_read_node(r, index, path + (c,)))
        _cache_children(node)
    return node


def load_index(path: str) -> TreeIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.raw(4) != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: bad magic, not an index snapshot")
    version = r.unpack("H")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    exact = bool(r.unpack("B"))
    bf, cap, max_depth, slot_bits, buf_cap, km_iters = r.unpack("IIIIII")
    cfg = TreeConfig(bf, cap, max_depth, slot_bits, buf_cap, km_iters)
    dim, seed = r.unpack("IQ")
    target_fp = r.unpack("d")
    expected = r.unpack("I") or None
    bloom_cfg = BloomConfig(target_fp, expected, exact)
    index = TreeIndex(cfg, dim, seed, bloom_cfg)
    has_params, m, k, s1, s2 = r.unpack("BIIQQ")
    if has_params:
        index.bloom_params = (m, k, s1, s2)
    index.rebuild_threshold = r.unpack("d")
    index.registry.next_virtual = r.unpack("Q")
    n_queued = r.unpack("I")
    for _ in range(n_queued):
        depth = r.unpack("B")
        index.rebuild_queue.append(tuple(r.unpack("B") for _ in range(depth)))
    index.root = _read_node(r, index, ())
    index.registry.counts = dict(index.root.label_counts)
    if r.pos != len(data):
        raise ValueError(f"{path}: {len(data) - r.pos} trailing bytes after snapshot")
    return index
