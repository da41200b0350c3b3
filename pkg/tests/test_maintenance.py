import numpy as np
import pytest

from filtree import build_index, tree
from filtree.dataset import Dataset, LabelAssignment, SelectivitySpec, generate_synthetic
from filtree.labels import BloomConfig, build_all_labels, label_member_ids
from filtree.maintenance import (
    check_invariants,
    delete_label,
    delete_vector,
    insert_label,
    insert_vector,
    maybe_enqueue_rebuild,
    rebuild_at,
    run_rebuilds,
)
from filtree.oracle import exact_filtered_knn
from filtree.search import SearchParams, recall_at_k, search_label
from filtree.tree import TreeConfig

from conftest import small_config


def fresh_index(n=600, dim=5, levels=(0.1, 0.02), per=2, seed=101, exact=True, cfg=None):
    data, assign = generate_synthetic(
        n, dim, SelectivitySpec(list(levels), labels_per_level=per), seed=seed
    )
    index = build_index(data, assign, cfg or small_config(), seed=seed + 1,
                        bloom=BloomConfig(exact_sets=exact))
    return index, data, assign


# ---------------------------------------------------------------------------
# Vector inserts
# ---------------------------------------------------------------------------

def test_insert_into_emptied_leaf_takes_slot_zero():
    data = Dataset(np.ones((1, 3), dtype=np.float32))
    index = tree.build(data, small_config(), seed=1)
    delete_vector(index, 0)
    run_rebuilds(index, mode="global")      # compacts the tombstone away
    assert index.n_live == 0
    raw = insert_vector(index, 7, np.zeros(3, dtype=np.float32))
    leaf, slot = index.locs[raw]
    assert slot == 0
    assert raw == leaf.prefix
    assert index.n_live == 1
    assert check_invariants(index) == []


def test_insert_appends_next_slot():
    data = Dataset(np.zeros((2, 3), dtype=np.float32))
    index = tree.build(data, small_config(), seed=2)
    raw = insert_vector(index, 50, np.ones(3, dtype=np.float32))
    assert raw == index.root.prefix | 2
    assert index.key_of(raw) == 50


def test_inserted_vector_is_retrievable():
    index, data, assign = fresh_index()
    target = np.full(5, 7.5, dtype=np.float32)
    insert_vector(index, 9999, target, {0})
    res = search_label(index, target.astype(np.float64), 0, SearchParams(k=3, ef=None))
    assert res.keys()[0] == 9999
    assert res.hits[0][1] == pytest.approx(0.0, abs=1e-6)
    assert check_invariants(index) == []


def test_thousand_inserts_counting():
    data = Dataset(np.random.default_rng(3).standard_normal((200, 4)).astype(np.float32))
    index = tree.build(data, small_config(), seed=4)
    rng = np.random.default_rng(5)
    for i in range(1000):
        insert_vector(index, 200 + i, rng.standard_normal(4).astype(np.float32),
                      {i % 3} if i % 2 else set())
    assert index.n_live == 1200
    assert index.root.size == 1200
    assert len(index.key_to_raw) == 1200
    assert index.registry.count(0) + index.registry.count(1) + index.registry.count(2) == 500
    for node in index.iter_nodes():
        if not node.is_leaf:
            assert node.size == sum(c.size for c in node.children)
    assert check_invariants(index) == []


def test_insert_validation():
    index, _, _ = fresh_index(n=100)
    with pytest.raises(ValueError):
        insert_vector(index, 5, np.zeros(4, dtype=np.float32))   # wrong dim
    with pytest.raises(ValueError):
        insert_vector(index, 5, np.zeros(5, dtype=np.float32))   # duplicate key


def test_insert_uses_no_vector_distances():
    index, _, _ = fresh_index(n=300)
    before = index.counter.snapshot()
    insert_vector(index, 8888, np.zeros(5, dtype=np.float32), {0, 1})
    dc, dv = index.counter.delta(before)
    assert dv == 0      # greedy descent touches centroids only
    assert dc > 0


# ---------------------------------------------------------------------------
# Vector deletes
# ---------------------------------------------------------------------------

def test_deleted_vector_never_returned():
    index, data, assign = fresh_index()
    target = np.full(5, -6.0, dtype=np.float32)
    insert_vector(index, 7777, target, {1})
    assert search_label(index, target, 1, SearchParams(k=1, ef=None)).keys() == [7777]
    delete_vector(index, 7777)
    for label in (0, 1, 2, 3):
        res = search_label(index, target, label, SearchParams(k=50, ef=None))
        assert 7777 not in res.keys()
    assert 7777 not in index.key_to_raw
    assert check_invariants(index) == []


def test_delete_twice_errors():
    index, _, _ = fresh_index(n=100)
    delete_vector(index, 10)
    with pytest.raises(KeyError):
        delete_vector(index, 10)
    with pytest.raises(KeyError):
        delete_label(index, 10, 0)


def test_delete_is_pure_bookkeeping():
    index, _, _ = fresh_index(n=400)
    before = index.counter.snapshot()
    delete_vector(index, 42)
    assert index.counter.delta(before) == (0, 0)


def test_delete_multi_label_vector_drops_every_count():
    index, _, _ = fresh_index(n=300, levels=(0.5, 0.4, 0.3), per=1, seed=107)
    key = next(k for k in index.key_to_raw
               if len(index.locs[index.key_to_raw[k]][0].slot_labels[
                   index.locs[index.key_to_raw[k]][1]]) == 3)
    raw = index.key_to_raw[key]
    leaf, slot = index.locs[raw]
    labels = sorted(leaf.slot_labels[slot])
    assert len(labels) == 3
    before = {l: index.registry.count(l) for l in labels}
    delete_vector(index, key)
    for l in labels:
        assert index.registry.count(l) == before[l] - 1
        assert raw not in label_member_ids(index, l)
    assert check_invariants(index) == []


def test_tombstones_are_never_reused():
    data = Dataset(np.zeros((3, 2), dtype=np.float32))
    index = tree.build(data, small_config(), seed=6)
    dead_raw = index.key_to_raw[1]
    delete_vector(index, 1)
    new_raw = insert_vector(index, 77, np.zeros(2, dtype=np.float32))
    assert new_raw != dead_raw
    assert new_raw == index.root.prefix | 3     # next fresh slot, not the hole
    assert dead_raw not in index.locs
    leaf = index.root
    assert leaf.alive == [True, False, True, True]


# ---------------------------------------------------------------------------
# Label inserts
# ---------------------------------------------------------------------------

def test_first_label_member_lands_in_root_buffer():
    data = Dataset(np.random.default_rng(7).standard_normal((500, 4)).astype(np.float32))
    index = tree.build(data, small_config(), seed=8, bloom=BloomConfig(exact_sets=True))
    insert_label(index, 123, 55)
    raw = index.key_to_raw[123]
    assert index.root.buffers[55] == [raw]
    assert index.root.label_counts[55] == 1
    assert index.registry.count(55) == 1
    for child in index.root.children:
        assert 55 not in child.label_counts
    assert check_invariants(index) == []


def test_buffer_overflow_flushes_to_children_by_range():
    cfg = TreeConfig(branch_factor=8, leaf_capacity=16, slot_bits=5, buffer_capacity=4)
    data = Dataset(np.random.default_rng(9).standard_normal((400, 4)).astype(np.float32))
    index = tree.build(data, cfg, seed=10, bloom=BloomConfig(exact_sets=True))
    keys = [0, 50, 100, 150, 200]
    for k in keys[:4]:
        insert_label(index, k, 77)
    assert len(index.root.buffers[77]) == 4      # sits exactly at capacity

    insert_label(index, keys[4], 77)             # one past capacity: flush
    assert 77 not in index.root.buffers
    assert index.root.label_counts[77] == 5
    raws = sorted(index.key_to_raw[k] for k in keys)
    gathered = []
    for child in index.root.children:
        mine = [r for r in raws if child.prefix <= r < child.range_hi]
        assert child.label_counts.get(77, 0) == len(mine)
        if mine:
            assert child.buffers[77] == mine
            gathered.extend(child.buffers[77])
    assert gathered == raws
    assert check_invariants(index) == []


def test_duplicate_label_attach_errors():
    index, _, _ = fresh_index(n=100)
    key = sorted(index.key_to_raw)[0]
    insert_label(index, key, 88)
    with pytest.raises(ValueError):
        insert_label(index, key, 88)
    with pytest.raises(ValueError):
        insert_label(index, key, -3)
    with pytest.raises(ValueError):
        insert_label(index, key, 1 << 33)


def test_label_ops_use_no_distances():
    index, _, _ = fresh_index(n=500)
    before = index.counter.snapshot()
    for k in range(0, 200, 7):
        insert_label(index, k, 91)
    for k in range(0, 200, 14):
        delete_label(index, k, 91)
    assert index.counter.delta(before) == (0, 0)
    assert check_invariants(index) == []


# ---------------------------------------------------------------------------
# Label deletes: merges
# ---------------------------------------------------------------------------

def test_delete_only_member_removes_label_entirely():
    index, _, _ = fresh_index(n=200)
    insert_label(index, 11, 66)
    delete_label(index, 11, 66)
    assert index.registry.count(66) == 0
    for node in index.iter_nodes():
        assert 66 not in node.label_counts
        assert 66 not in node.buffers
    assert check_invariants(index) == []


def test_sibling_buffers_merge_to_sorted_union_at_parent():
    cfg = TreeConfig(branch_factor=8, leaf_capacity=16, slot_bits=5, buffer_capacity=2)
    data = Dataset(np.random.default_rng(11).standard_normal((400, 4)).astype(np.float32))
    index = tree.build(data, cfg, seed=12, bloom=BloomConfig(exact_sets=True))
    # pick three vectors under three different root children
    picks = {}
    for key, raw in sorted(index.key_to_raw.items()):
        child = index.walk_path(raw)[1]
        picks.setdefault(child.path, key)
        if len(picks) == 3:
            break
    keys = sorted(picks.values())
    for k in keys:
        insert_label(index, k, 33)
    # three members exceed the capacity-2 root buffer: they live below
    assert 33 not in index.root.buffers
    assert index.root.label_counts[33] == 3

    delete_label(index, keys[0], 33)
    # two remain: the highest node that fits them (the root) folds the
    # sibling buffers into one sorted union
    remaining = sorted(index.key_to_raw[k] for k in keys[1:])
    assert index.root.buffers[33] == remaining
    assert index.root.label_counts[33] == 2
    for node in index.iter_nodes():
        if node is not index.root:
            assert 33 not in node.label_counts
            assert 33 not in node.buffers
    assert check_invariants(index) == []


def test_detach_missing_label_errors():
    index, _, _ = fresh_index(n=100)
    with pytest.raises(ValueError):
        delete_label(index, 3, 424242)


# ---------------------------------------------------------------------------
# Batch/incremental equivalence
# ---------------------------------------------------------------------------

def label_state(index):
    state = {}
    for node in index.iter_nodes():
        for label, cnt in node.label_counts.items():
            state[(node.path, label, "count")] = cnt
        for label, buf in node.buffers.items():
            state[(node.path, label, "buffer")] = tuple(buf)
    return state


def test_incremental_attach_matches_batch_any_order():
    data, assign = generate_synthetic(
        800, 5, SelectivitySpec([0.12, 0.03], labels_per_level=2), seed=113
    )
    batch = build_index(data, assign, small_config(), seed=114,
                        bloom=BloomConfig(exact_sets=True))
    want = label_state(batch)

    pairs = [(int(data.keys[row]), label)
             for row, labels in enumerate(assign.labels)
             for label in sorted(labels)]
    for order_seed in (0, 1, 2):
        index = tree.build(data, small_config(), seed=114,
                           bloom=BloomConfig(exact_sets=True))
        rng = np.random.default_rng(order_seed)
        for i in rng.permutation(len(pairs)):
            key, label = pairs[i]
            insert_label(index, key, label)
        assert label_state(index) == want
        assert check_invariants(index) == []


def test_deletes_converge_to_batch_of_survivors():
    data, assign = generate_synthetic(
        700, 4, SelectivitySpec([0.15, 0.05], labels_per_level=2), seed=115
    )
    index = build_index(data, assign, small_config(), seed=116,
                        bloom=BloomConfig(exact_sets=True))
    rng = np.random.default_rng(117)
    survivors = [set(s) for s in assign.labels]
    for row in range(700):
        for label in sorted(assign.labels[row]):
            if rng.random() < 0.5:
                delete_label(index, int(data.keys[row]), label)
                survivors[row].discard(label)
    reference = build_index(data, LabelAssignment(survivors), small_config(), seed=116,
                            bloom=BloomConfig(exact_sets=True))
    assert label_state(index) == label_state(reference)
    assert check_invariants(index) == []


# ---------------------------------------------------------------------------
# Rebuild queueing and execution
# ---------------------------------------------------------------------------

def test_threshold_arithmetic():
    index, _, _ = fresh_index(n=100)
    node = index.root.children[0]
    node.size, node.update_count = 100, 50
    assert not maybe_enqueue_rebuild(index, node)    # 0.50 is not > 0.5
    assert node.path not in index.rebuild_queue
    node.update_count = 51
    assert maybe_enqueue_rebuild(index, node)        # 0.51 crosses
    assert node.path in index.rebuild_queue
    assert not maybe_enqueue_rebuild(index, node)    # no duplicate entries
    assert index.rebuild_queue.count(node.path) == 1
    index.rebuild_queue.clear()


def test_churn_enqueues_and_rebuild_resets():
    index, data, assign = fresh_index(n=300, seed=118)
    rng = np.random.default_rng(119)
    next_key = 10_000
    for _ in range(400):
        if rng.random() < 0.5 and index.n_live > 20:
            delete_vector(index, int(rng.choice(sorted(index.key_to_raw))))
        else:
            insert_vector(index, next_key, rng.standard_normal(5).astype(np.float32),
                          {int(rng.integers(0, 4))})
            next_key += 1
    assert index.rebuild_queue                       # plenty of churn
    rebuilt = run_rebuilds(index, mode="local")
    assert rebuilt
    assert index.rebuild_queue == []
    for path in rebuilt:
        for node in index.iter_nodes(index.node_at(path)):
            assert node.update_count == 0
    assert check_invariants(index) == []
    assert run_rebuilds(index) == []                 # queue drained


def test_local_rebuild_preserves_outside_ids():
    index, data, assign = fresh_index(n=900, seed=120)
    target_path = index.root.children[0].path
    before = dict(index.key_to_raw)
    lo, hi = index.node_at(target_path).prefix, index.node_at(target_path).range_hi
    rebuild_at(index, target_path)
    for key, raw in index.key_to_raw.items():
        if lo <= before[key] < hi:
            assert lo <= raw < hi                    # remapped but stays inside
        else:
            assert raw == before[key]                # untouched elsewhere
    assert check_invariants(index) == []
    # membership is preserved for every label
    for label in assign.label_universe():
        raws = label_member_ids(index, label)
        keys = sorted(index.key_of(r) for r in raws)
        expected = sorted(int(data.keys[r]) for r in assign.members(label))
        assert keys == expected


def test_global_rebuild_compacts_and_keeps_recall():
    index, data, assign = fresh_index(n=2000, dim=4, levels=(0.1,), per=1, seed=121)
    rng = np.random.default_rng(122)
    next_key = 5000
    for _ in range(600):
        if rng.random() < 0.5:
            delete_vector(index, int(rng.choice(sorted(index.key_to_raw))))
        else:
            insert_vector(index, next_key, rng.standard_normal(4).astype(np.float32),
                          {0} if rng.random() < 0.1 else set())
            next_key += 1

    live_data, live_assign = tree.export_dataset(index)
    queries = rng.standard_normal((1000, 4))
    params = SearchParams(k=10, ef=64)

    def mean_recall():
        rows = [i for i, s in enumerate(live_assign.labels) if 0 in s]
        sub = Dataset(live_data.vectors[rows], keys=live_data.keys[rows])
        sub_assign = LabelAssignment([live_assign.labels[r] for r in rows])
        total = 0.0
        for q in queries:
            truth = exact_filtered_knn(sub, sub_assign, q, 0, 10)
            res = search_label(index, q, 0, params)
            total += recall_at_k(res.keys(), truth.keys.tolist(), 10)
        return total / len(queries)

    before = mean_recall()
    index.rebuild_queue.append(())
    run_rebuilds(index, mode="global")
    assert check_invariants(index, check_leaf_capacity=True) == []
    after = mean_recall()
    assert abs(after - before) <= 0.02
    # tombstones are gone: live count equals stored slots
    assert sum(len(n.keys) for n in index.iter_nodes() if n.is_leaf) == index.n_live


def test_rebuild_remaps_ancestor_buffers():
    # a label buffered at the root keeps its ids valid across a child rebuild
    cfg = TreeConfig(branch_factor=8, leaf_capacity=16, slot_bits=5, buffer_capacity=8)
    data = Dataset(np.random.default_rng(13).standard_normal((600, 4)).astype(np.float32))
    index = tree.build(data, cfg, seed=14, bloom=BloomConfig(exact_sets=True))
    child = index.root.children[0]
    inside = [k for k, r in sorted(index.key_to_raw.items())
              if child.prefix <= r < child.range_hi][:3]
    outside = [k for k, r in sorted(index.key_to_raw.items())
               if not child.prefix <= r < child.range_hi][:3]
    for k in inside + outside:
        insert_label(index, k, 44)
    assert 44 in index.root.buffers and len(index.root.buffers[44]) == 6

    # churn inside the child so its ids shift on rebuild
    for k in [k for k, r in index.key_to_raw.items()
              if child.prefix <= r < child.range_hi][:10]:
        if k not in inside:
            delete_vector(index, k)
    rebuild_at(index, child.path)
    buf = index.root.buffers[44]
    assert buf == sorted(buf)
    assert sorted(index.key_of(r) for r in buf) == sorted(inside + outside)
    assert check_invariants(index) == []


def test_run_rebuilds_mode_validation():
    index, _, _ = fresh_index(n=100)
    with pytest.raises(ValueError):
        run_rebuilds(index, mode="both")


# ---------------------------------------------------------------------------
# Slot budgets under adversarial duplicates
# ---------------------------------------------------------------------------

def test_slot_budget_guards():
    cfg = TreeConfig(branch_factor=16, leaf_capacity=2, slot_bits=1)
    assert cfg.max_depth == 15
    dup = np.zeros((280, 3), dtype=np.float32)
    # 280 identical points cannot be told apart: the recursion bottoms out at
    # max_depth still holding more rows than a depth-15 leaf can address
    with pytest.raises(ValueError, match="slot"):
        tree.build(Dataset(dup), cfg, seed=15)

    # 240 fit exactly: the deep leaf ends one short of its 16-slot budget
    index = tree.build(Dataset(dup[:240]), cfg, seed=15)
    assert index.warnings                            # oversized-leaf reports
    insert_vector(index, 9001, np.zeros(3, dtype=np.float32))
    with pytest.raises(ValueError, match="budget"):
        insert_vector(index, 9002, np.zeros(3, dtype=np.float32))
