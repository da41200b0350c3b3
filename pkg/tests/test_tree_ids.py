import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from filtree.tree import TreeConfig, decode_id, encode_id, node_range, slot_budget

CFG16 = TreeConfig(branch_factor=16, leaf_capacity=16, slot_bits=4)


def test_config_derived_fields():
    assert CFG16.bits_per_branch == 4
    assert CFG16.max_depth == 15
    assert TreeConfig().bits_per_branch == 4
    assert TreeConfig(branch_factor=2).bits_per_branch == 1
    assert TreeConfig(branch_factor=9).bits_per_branch == 4


def test_config_validation():
    with pytest.raises(ValueError):
        TreeConfig(branch_factor=1)
    with pytest.raises(ValueError):
        TreeConfig(leaf_capacity=0)
    with pytest.raises(ValueError):
        TreeConfig(leaf_capacity=300, slot_bits=8)
    with pytest.raises(ValueError):
        TreeConfig(branch_factor=16, slot_bits=8, max_depth=15)


def test_root_encode_is_zero():
    assert encode_id((), 0, CFG16) == 0


def test_first_branch_lands_in_top_bits():
    assert encode_id((1,), 0, CFG16) == 1 << 60
    assert encode_id((1, 2), 0, CFG16) == (1 << 60) | (2 << 56)
    assert encode_id((15,), 3, CFG16) == (15 << 60) | 3


def test_node_ranges():
    assert node_range((), CFG16) == (0, 1 << 64)
    assert node_range((1,), CFG16) == (1 << 60, 2 << 60)
    assert node_range((15,), CFG16) == (15 << 60, 1 << 64)
    lo, hi = node_range((0, 0), CFG16)
    assert (lo, hi) == (0, 1 << 56)


def test_slot_budget_shrinks_with_depth():
    assert slot_budget(CFG16, 0) == 1 << 64
    assert slot_budget(CFG16, 1) == 1 << 60
    assert slot_budget(CFG16, 15) == 1 << 4


def test_encode_bounds():
    with pytest.raises(ValueError):
        encode_id((16,), 0, CFG16)
    with pytest.raises(ValueError):
        encode_id((-1,), 0, CFG16)
    with pytest.raises(ValueError):
        encode_id((0,) * 16, 0, CFG16)
    with pytest.raises(ValueError):
        encode_id((0,) * 15, 1 << 4, CFG16)
    # a shallow leaf gets the padding bits as extra slot room
    assert encode_id((1,), (1 << 60) - 1, CFG16) == (2 << 60) - 1


def test_decode_needs_depth():
    raw = encode_id((1, 2), 5, CFG16)
    assert decode_id(raw, CFG16, depth=2) == ((1, 2), 5)
    # without the true depth the zero padding reads as extra branch digits
    path, slot = decode_id(raw, CFG16)
    assert path[:2] == (1, 2) and path[2:] == (0,) * 13


cfg_strategy = st.sampled_from([
    CFG16,
    TreeConfig(branch_factor=8, leaf_capacity=32, slot_bits=7),
    TreeConfig(branch_factor=2, leaf_capacity=4, slot_bits=2),
    TreeConfig(branch_factor=5, leaf_capacity=8, slot_bits=16),
])


@st.composite
def path_and_slot(draw, cfg):
    depth = draw(st.integers(min_value=0, max_value=min(cfg.max_depth, 6)))
    path = tuple(
        draw(st.integers(min_value=0, max_value=cfg.branch_factor - 1))
        for _ in range(depth)
    )
    slot = draw(st.integers(min_value=0, max_value=min(slot_budget(cfg, depth), 1 << 20) - 1))
    return path, slot


@settings(max_examples=200, deadline=None)
@given(data=st.data(), cfg=cfg_strategy)
def test_round_trip_property(data, cfg):
    path, slot = data.draw(path_and_slot(cfg))
    raw = encode_id(path, slot, cfg)
    assert 0 <= raw < (1 << 64)
    assert decode_id(raw, cfg, depth=len(path)) == (path, slot)
    lo, hi = node_range(path, cfg)
    assert lo <= raw < hi


@settings(max_examples=200, deadline=None)
@given(data=st.data(), cfg=cfg_strategy)
def test_order_preservation_property(data, cfg):
    """Ids sort exactly like (path, slot) tuples whenever neither path is a
    proper prefix of the other (leaf paths in a real tree never are)."""
    a_path, a_slot = data.draw(path_and_slot(cfg))
    b_path, b_slot = data.draw(path_and_slot(cfg))
    shared = min(len(a_path), len(b_path))
    if a_path[:shared] == b_path[:shared] and len(a_path) != len(b_path):
        return  # proper prefix: ids of one node nest inside the other
    a = encode_id(a_path, a_slot, cfg)
    b = encode_id(b_path, b_slot, cfg)
    key_a, key_b = (a_path, a_slot), (b_path, b_slot)
    if key_a == key_b:
        assert a == b
    else:
        assert (a < b) == (key_a < key_b)
