"""Incremental updates: vector and label inserts/deletes, partial rebuilds.

Vector placement is greedy (follow the nearest centroid at each level);
label bookkeeping is pure id manipulation along a single root-to-leaf path.
Deleted slots become tombstones — slot numbers are never reused, so a raw id
denotes one vector forever — and any subtree whose update churn grows past a
fraction of its live population is queued for rebuilding.

Label inserts and deletes are written to land exactly where a batch build
over the updated membership would put them: an insert descends to the
deepest node already tracking the label and either extends its buffer
(splitting it over the children when it outgrows the capacity) or starts a
buffer one level below; a delete prunes the counts along its path and folds
child buffers back together as soon as a subtree's count fits in one buffer.
"""

from __future__ import annotations

from bisect import bisect_left, insort

import numpy as np

from .dataset import Dataset
from .labels import (
    _ancestors_of,
    bloom_add,
    ensure_filters,
    fresh_filters,
    label_member_ids,
    node_contains_label,
    place_label,
    recompute_bloom,
    recompute_upward,
)
from .tree import TreeNode, _cache_children, build_subtree, nearest_leaf, slot_budget


def insert_vector(index, key: int, vector, labels=()) -> int:
    """Insert a vector under a new key; returns its raw id."""
    key = int(key)
    vec = np.asarray(vector, dtype=np.float32).reshape(-1)
    if vec.shape[0] != index.dim:
        raise ValueError(f"vector dim {vec.shape[0]} != index dim {index.dim}")
    with index.lock.write():
        if key in index.key_to_raw:
            raise ValueError(f"key {key} already present")
        leaf = nearest_leaf(index, vec)
        slot = len(leaf.keys)
        if slot >= slot_budget(index.cfg, leaf.depth):
            raise ValueError(
                f"leaf at path {leaf.path} has exhausted its slot budget "
                f"({slot_budget(index.cfg, leaf.depth)}); rebuild to reclaim tombstones"
            )
        raw = leaf.prefix | slot
        leaf.keys.append(key)
        leaf.vectors = np.concatenate([leaf.vectors, vec[None, :]], axis=0)
        leaf.alive.append(True)
        leaf.slot_labels.append(set())
        index.locs[raw] = (leaf, slot)
        index.key_to_raw[key] = raw
        path = index.walk_path(raw)
        for node in path:
            node.size += 1
            node.update_count += 1
        for label in labels:
            _attach_label(index, raw, int(label))
        _maybe_enqueue(index, path)
        index.epoch += 1
        return raw


def delete_vector(index, key: int) -> None:
    """Remove a key: detach its labels, then tombstone the slot."""
    with index.lock.write():
        raw = index.key_to_raw.get(int(key))
        if raw is None:
            raise KeyError(f"key {key} not in index")
        leaf, slot = index.locs[raw]
        for label in sorted(leaf.slot_labels[slot]):
            _detach_label(index, raw, label)
        leaf.alive[slot] = False
        del index.key_to_raw[int(key)]
        del index.locs[raw]
        path = index.walk_path(raw)
        for node in path:
            node.size -= 1
            node.update_count += 1
        _maybe_enqueue(index, path)
        index.epoch += 1


def insert_label(index, key: int, label: int) -> None:
    """Attach a label to an existing vector."""
    if not 0 <= label < (1 << 32):
        raise ValueError(f"label {label} out of range")
    with index.lock.write():
        raw = index.key_to_raw.get(int(key))
        if raw is None:
            raise KeyError(f"key {key} not in index")
        _attach_label(index, raw, label)
        index.epoch += 1


def delete_label(index, key: int, label: int) -> None:
    """Detach a label from a vector, folding buffers back up as needed."""
    with index.lock.write():
        raw = index.key_to_raw.get(int(key))
        if raw is None:
            raise KeyError(f"key {key} not in index")
        _detach_label(index, raw, label)
        index.epoch += 1


def _child_on_path(index, node, raw: int):
    bpb = index.cfg.bits_per_branch
    digit = (raw >> (64 - (node.depth + 1) * bpb)) & ((1 << bpb) - 1)
    return node.children[digit]


def _attach_label(index, raw: int, label: int) -> None:
    leaf, slot = index.locs[raw]
    if label in leaf.slot_labels[slot]:
        raise ValueError(f"vector {leaf.keys[slot]} already carries label {label}")
    if not index.exact_sets and index.bloom_params is None:
        ensure_filters(index)
    leaf.slot_labels[slot].add(label)
    index.registry.bump(label, +1)
    cap = index.cfg.buffer_capacity
    node = index.root
    if label not in node.label_counts:
        place_label(index, node, label, [raw])
        return
    while True:
        node.label_counts[label] += 1
        bloom_add(index, node, label)
        buf = node.buffers.get(label)
        if buf is not None:
            insort(buf, raw)
            if len(buf) > cap and not node.is_leaf:
                # Outgrew one buffer: split it over the children by id range,
                # which is exactly where a batch placement would put it.
                ids = node.buffers.pop(label)
                for child in node.children:
                    lo = bisect_left(ids, child.prefix)
                    hi = bisect_left(ids, child.range_hi)
                    if lo < hi:
                        place_label(index, child, label, ids[lo:hi])
            return
        child = _child_on_path(index, node, raw)
        if label in child.label_counts:
            node = child
        else:
            place_label(index, child, label, [raw])
            return


def _detach_label(index, raw: int, label: int) -> None:
    leaf, slot = index.locs[raw]
    if label not in leaf.slot_labels[slot]:
        raise ValueError(f"vector {leaf.keys[slot]} does not carry label {label}")
    leaf.slot_labels[slot].discard(label)
    index.registry.bump(label, -1)
    cap = index.cfg.buffer_capacity

    path = index.walk_path(raw)
    touched = []                  # path nodes that tracked the label, top-down
    for node in path:
        if label not in node.label_counts:
            break
        touched.append(node)
        node.label_counts[label] -= 1
        if node.label_counts[label] == 0:
            del node.label_counts[label]
        buf = node.buffers.get(label)
        if buf is not None:
            i = bisect_left(buf, raw)
            del buf[i]
            if not buf:
                del node.buffers[label]
            break

    # Fold buffers upward: the highest node whose remaining count now fits in
    # a single buffer absorbs every buffer in its subtree (a batch build over
    # the shrunken membership would stop there).
    merged = []
    for node in touched:
        cnt = node.label_counts.get(label)
        if cnt is None or label in node.buffers:
            break
        if cnt <= cap:
            merged = _merge_label(index, node, label)
            break

    affected = sorted(set(merged) | set(touched),
                      key=lambda n: -n.depth)
    recompute_upward(index, affected)


def _merge_label(index, node, label: int):
    """Collapse every buffer for `label` under `node` into one at `node`.

    Returns the descendants that stopped tracking the label.
    """
    ids = []
    removed = []

    def visit(n):
        buf = n.buffers.get(label)
        if buf is not None:
            ids.extend(buf)         # children are prefix-ordered: stays sorted
            if n is not node:
                del n.buffers[label]
            return
        for child in n.children:
            if label in child.label_counts:
                visit(child)

    visit(node)
    for desc in index.iter_nodes(node):
        if desc is not node and label in desc.label_counts:
            del desc.label_counts[label]
            removed.append(desc)
    node.buffers[label] = ids
    return removed


def _maybe_enqueue(index, path) -> None:
    for node in path:
        maybe_enqueue_rebuild(index, node)


def maybe_enqueue_rebuild(index, node) -> bool:
    """Queue a node for rebuilding when its churn ratio crosses the threshold."""
    ratio = node.update_count / node.size if node.size else (
        float("inf") if node.update_count else 0.0
    )
    if ratio > index.rebuild_threshold and node.path not in index.rebuild_queue:
        index.rebuild_queue.append(node.path)
        return True
    return False


def run_rebuilds(index, mode: str = "local", seed: int = None):
    """Process the rebuild queue; returns the list of rebuilt paths.

    Local mode rebuilds each queued subtree in place (shallowest first, so a
    queued ancestor subsumes its queued descendants); global mode answers any
    queued work by rebuilding the whole tree from the root.
    """
    if mode not in ("local", "global"):
        raise ValueError(f"mode must be 'local' or 'global', not {mode!r}")
    with index.lock.write():
        if not index.rebuild_queue:
            return []
        if seed is None:
            seed = index.seed + index.epoch + 1
        if mode == "global":
            _rebuild_subtree(index, (), seed)
            index.rebuild_queue = []
            return [()]
        done = []
        for path in sorted(index.rebuild_queue, key=len):
            if any(path[: len(d)] == d for d in done):
                continue
            _rebuild_subtree(index, path, seed)
            done.append(path)
        index.rebuild_queue = []
        return done


def rebuild_at(index, path=(), seed: int = None):
    """Rebuild one subtree unconditionally (the root by default)."""
    with index.lock.write():
        if seed is None:
            seed = index.seed + index.epoch + 1
        return _rebuild_subtree(index, tuple(path), seed)


def _rebuild_subtree(index, path, seed: int):
    """Re-run the hierarchical split over a subtree's live vectors.

    Re-ids everything underneath, so label buffers held at ancestors (whose
    label never descended this far) get their member ids remapped in place;
    labels tracked at or below the subtree root are re-embedded from scratch.
    """
    node = index.node_at(path)
    parent = index.node_at(path[:-1]) if path else None

    rows = []                     # (old_raw, key, vector, labels) by old id
    for n in index.iter_nodes(node):
        if n.is_leaf:
            for slot in range(len(n.keys)):
                if n.alive[slot]:
                    rows.append((n.prefix | slot, n.keys[slot],
                                 n.vectors[slot].copy(), n.slot_labels[slot]))
    rows.sort(key=lambda r: r[0])

    # Stash ancestor-buffer members living inside this subtree: their raw
    # ids are about to change, but their keys are stable.
    stashes = []
    anc = index.root
    for branch in path:
        for label, buf in anc.buffers.items():
            lo = bisect_left(buf, node.prefix)
            hi = bisect_left(buf, node.range_hi)
            if lo < hi:
                stashes.append((anc, label, [index.key_of(r) for r in buf[lo:hi]]))
        anc = anc.children[branch]

    old_labels = sorted(node.label_counts)
    for old_raw, key, _, _ in rows:
        del index.locs[old_raw]
        del index.key_to_raw[key]

    if rows:
        vectors = np.stack([r[2] for r in rows])
        keys = np.array([r[1] for r in rows], dtype=np.uint64)
        mini = Dataset(vectors, keys)
        fresh = build_subtree(index, tuple(path), np.arange(len(rows)), mini, seed)
        for (_, key, _, labels) in rows:
            leaf, slot = index.locs[index.key_to_raw[key]]
            leaf.slot_labels[slot] = set(labels)
        per_label = {}
        for (_, key, _, labels) in rows:
            raw = index.key_to_raw[key]
            for label in labels:
                per_label.setdefault(label, []).append(raw)
        for label in old_labels:
            place_label(index, fresh, label, sorted(per_label[label]),
                        fill_blooms=False)
        if not index.exact_sets and index.bloom_params is not None:
            fresh_filters(index, fresh)
            for n in index.iter_nodes(fresh):
                for label in n.label_counts:
                    n.bloom.add(label)
    else:
        # Everything under here was deleted: collapse to an empty leaf.
        fresh = TreeNode(tuple(path), index.cfg)
        fresh.centroid = np.array(node.centroid, dtype=np.float64)
        fresh.keys, fresh.alive, fresh.slot_labels = [], [], []
        fresh.vectors = np.empty((0, index.dim), dtype=np.float32)
        if not index.exact_sets and index.bloom_params is not None:
            fresh_filters(index, fresh)

    # Remap the stashed ancestor-buffer slices onto the new ids.
    for anc, label, stash_keys in stashes:
        buf = anc.buffers[label]
        lo = bisect_left(buf, node.prefix)
        hi = bisect_left(buf, node.range_hi)
        buf[lo:hi] = sorted(index.key_to_raw[k] for k in stash_keys)

    if parent is None:
        index.root = fresh
    else:
        parent.children[path[-1]] = fresh
        _cache_children(parent)
        if not index.exact_sets and index.bloom_params is not None:
            # Ancestor filters still hold the union over the replaced
            # subtree; rebuild them so labels gone from it stop leaking.
            for anc in _ancestors_of(index, fresh):
                if not recompute_bloom(index, anc):
                    break
    index.rebuild_queue = [p for p in index.rebuild_queue
                           if p[: len(path)] != tuple(path)]
    index.epoch += 1
    return fresh


def check_invariants(index, check_leaf_capacity: bool = False):
    """Exhaustive structural audit; returns a list of violation strings.

    Covers id/slot bookkeeping, subtree sizes, buffer ordering and range
    containment, per-node label counts against both children and buffers,
    membership-test false negatives, the registry, and the global partition
    of every label's members across its buffers. Live-per-leaf capacity is
    opt-in because inserts legitimately overfill leaves between rebuilds.
    """
    errs = []
    cfg = index.cfg
    cap = cfg.buffer_capacity
    live_by_label = {}
    total_live = 0

    with index.lock.read():
        for node in index.iter_nodes():
            where = f"node {node.path}"
            if not node.is_leaf:
                span = slot_budget(cfg, node.depth + 1)
                for i, child in enumerate(node.children):
                    if child.path != node.path + (i,):
                        errs.append(f"{where}: child {i} has path {child.path}")
                    if child.prefix != node.prefix + i * span:
                        errs.append(f"{where}: child {i} range is not contiguous")
                if node.size != sum(c.size for c in node.children):
                    errs.append(f"{where}: size {node.size} != sum of children")
                if node.child_mat is None or len(node.child_mat) != len(node.children):
                    errs.append(f"{where}: stale child centroid cache")
                elif not all(np.array_equal(node.child_mat[i], c.centroid)
                             for i, c in enumerate(node.children)):
                    errs.append(f"{where}: child centroid cache out of date")
            else:
                n_slots = len(node.keys)
                if n_slots > slot_budget(cfg, node.depth):
                    errs.append(f"{where}: {n_slots} slots exceed the budget")
                live = sum(node.alive)
                total_live += live
                if node.size != live:
                    errs.append(f"{where}: size {node.size} != {live} live slots")
                if check_leaf_capacity and live > cfg.leaf_capacity:
                    errs.append(f"{where}: {live} live vectors exceed leaf capacity")
                if node.vectors.shape != (n_slots, index.dim):
                    errs.append(f"{where}: vector block shape {node.vectors.shape}")
                if len(node.alive) != n_slots or len(node.slot_labels) != n_slots:
                    errs.append(f"{where}: ragged slot arrays")
                for slot in range(n_slots):
                    raw = node.prefix | slot
                    if node.alive[slot]:
                        if index.locs.get(raw) != (node, slot):
                            errs.append(f"{where}: slot {slot} missing from id map")
                        if index.key_to_raw.get(node.keys[slot]) != raw:
                            errs.append(f"{where}: key {node.keys[slot]} maps elsewhere")
                        for label in node.slot_labels[slot]:
                            live_by_label.setdefault(label, []).append(raw)
                    else:
                        if raw in index.locs:
                            errs.append(f"{where}: tombstone {slot} still in id map")
                        if node.slot_labels[slot]:
                            errs.append(f"{where}: tombstone {slot} carries labels")

            for label, cnt in node.label_counts.items():
                tag = f"{where}, label {label}"
                if cnt <= 0:
                    errs.append(f"{tag}: nonpositive count {cnt}")
                buf = node.buffers.get(label)
                if buf is not None:
                    if len(buf) != cnt:
                        errs.append(f"{tag}: buffer has {len(buf)} ids, count {cnt}")
                    if any(buf[i] >= buf[i + 1] for i in range(len(buf) - 1)):
                        errs.append(f"{tag}: buffer not strictly increasing")
                    if buf and (buf[0] < node.prefix or buf[-1] >= node.range_hi):
                        errs.append(f"{tag}: buffer id outside node range")
                    if len(buf) > cap and not node.is_leaf:
                        errs.append(f"{tag}: oversized buffer at an internal node")
                    if any(label in c.label_counts for c in node.children):
                        errs.append(f"{tag}: buffer node has tracking descendants")
                else:
                    if node.is_leaf:
                        errs.append(f"{tag}: tracked at a leaf without a buffer")
                    else:
                        child_sum = sum(c.label_counts.get(label, 0)
                                        for c in node.children)
                        if child_sum != cnt:
                            errs.append(f"{tag}: children sum {child_sum} != {cnt}")
                        if cnt <= cap:
                            errs.append(f"{tag}: unmerged count {cnt} <= capacity")
                if not node_contains_label(index, node, label):
                    errs.append(f"{tag}: membership test false negative")
            for label in node.buffers:
                if label not in node.label_counts:
                    errs.append(f"{where}: buffer for untracked label {label}")

        if len(index.locs) != total_live:
            errs.append(f"id map has {len(index.locs)} entries, {total_live} live")
        if len(index.key_to_raw) != total_live:
            errs.append(f"key map has {len(index.key_to_raw)} entries, {total_live} live")
        if index.root.size != total_live:
            errs.append(f"root size {index.root.size} != {total_live} live")

        if dict(index.registry.counts) != dict(index.root.label_counts):
            errs.append("registry counts diverge from the root's label counts")
        for label, members in sorted(live_by_label.items()):
            ids = label_member_ids(index, label)
            if list(ids) != sorted(members):
                errs.append(f"label {label}: buffers do not partition its members")
            if index.registry.count(label) != len(members):
                errs.append(f"label {label}: registry count {index.registry.count(label)}"
                            f" != {len(members)} members")
        for label in index.registry.counts:
            if label not in live_by_label:
                errs.append(f"label {label}: registered but no member carries it")
    return errs
