"""Boolean label predicates and transient per-predicate indexes.

Grammar (infix, integer labels): ``!`` binds tighter than ``&``, which binds
tighter than ``|``; parentheses group. Negation is only meaningful relative
to a bounding set, so a predicate must stay *positive* overall: a ``!``
subtree has to sit under an ``&`` whose other operands bound it. Purely
negative predicates (``!4``, ``3 | !4``) are rejected at parse time.

Evaluation runs on sorted id sets drawn from the label buffers. A value is
carried either as the set itself or, under negation, as the complement's
base set, so ``a & !b`` never materializes the universe.

A qualified list q becomes searchable through a transient index that mirrors
the base tree: starting at the root, a node whose slice of q still exceeds
the buffer capacity partitions the slice among its children by binary search
on their id ranges (ids sort by subtree, so each child's ids form one
contiguous run). No distances are computed. Searching the transient tree
uses the same beam + best-first traversal as embedded labels, with exact
membership (every transient node qualifies) instead of Bloom tests.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .labels import bloom_add, ensure_filters, label_member_ids
from .search import SearchParams, SearchResult, SearchStats, beam_descent, best_first


@dataclass(frozen=True)
class Label:
    value: int

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class And:
    children: tuple

    def __str__(self):
        return "(" + " & ".join(str(c) for c in self.children) + ")"


@dataclass(frozen=True)
class Or:
    children: tuple

    def __str__(self):
        return "(" + " | ".join(str(c) for c in self.children) + ")"


@dataclass(frozen=True)
class Not:
    child: "Predicate"

    def __str__(self):
        return f"!{self.child}"


Predicate = Union[Label, And, Or, Not]


def _polarity(pred) -> bool:
    """True when the predicate denotes a plain set (no unbounded complement)."""
    if isinstance(pred, Label):
        return True
    if isinstance(pred, Not):
        return not _polarity(pred.child)
    if isinstance(pred, And):
        return any(_polarity(c) for c in pred.children)
    if isinstance(pred, Or):
        return all(_polarity(c) for c in pred.children)
    raise TypeError(f"not a predicate: {pred!r}")


def validate_predicate(pred) -> None:
    if not _polarity(pred):
        raise ValueError(
            f"predicate {pred} is negative: every ! must be bounded by "
            f"positive operands of an enclosing &"
        )


class _Tokens:
    def __init__(self, text: str):
        self.toks = []
        i = 0
        while i < len(text):
            c = text[i]
            if c.isspace():
                i += 1
            elif c in "&|!()":
                self.toks.append(c)
                i += 1
            elif c.isdigit():
                j = i
                while j < len(text) and text[j].isdigit():
                    j += 1
                self.toks.append(int(text[i:j]))
                i = j
            else:
                raise ValueError(f"unexpected character {c!r} at position {i}")
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok


def parse_predicate(text: str) -> Predicate:
    """Parse an infix predicate; rejects syntax errors and unbounded negation."""
    toks = _Tokens(text)

    def factor():
        tok = toks.peek()
        if tok == "!":
            toks.take()
            return Not(factor())
        if tok == "(":
            toks.take()
            node = expr()
            if toks.take() != ")":
                raise ValueError("unbalanced parenthesis")
            return node
        if isinstance(tok, int):
            toks.take()
            return Label(tok)
        raise ValueError(f"expected label, '!' or '(', got {tok!r}")

    def term():
        parts = [factor()]
        while toks.peek() == "&":
            toks.take()
            parts.append(factor())
        if len(parts) == 1:
            return parts[0]
        flat = []
        for p in parts:
            flat.extend(p.children if isinstance(p, And) else [p])
        return And(tuple(flat))

    def expr():
        parts = [term()]
        while toks.peek() == "|":
            toks.take()
            parts.append(term())
        if len(parts) == 1:
            return parts[0]
        flat = []
        for p in parts:
            flat.extend(p.children if isinstance(p, Or) else [p])
        return Or(tuple(flat))

    if toks.peek() is None:
        raise ValueError("empty predicate")
    node = expr()
    if toks.peek() is not None:
        raise ValueError(f"trailing input at token {toks.pos}: {toks.peek()!r}")
    validate_predicate(node)
    return node


def _label_ids(index, label: int) -> np.ndarray:
    return np.asarray(label_member_ids(index, label), dtype=np.uint64)


def _eval(index, pred):
    """Returns (positive, ids): the denoted set, or the complement's base."""
    if isinstance(pred, Label):
        return True, _label_ids(index, pred.value)
    if isinstance(pred, Not):
        pos, ids = _eval(index, pred.child)
        return not pos, ids
    if isinstance(pred, And):
        pos_sets, neg_sets = [], []
        for c in pred.children:
            pos, ids = _eval(index, c)
            (pos_sets if pos else neg_sets).append(ids)
        if not pos_sets:
            out = neg_sets[0]
            for s in neg_sets[1:]:
                out = np.union1d(out, s)
            return False, out
        out = pos_sets[0]
        for s in pos_sets[1:]:
            out = np.intersect1d(out, s, assume_unique=True)
        for s in neg_sets:
            out = np.setdiff1d(out, s, assume_unique=True)
        return True, out
    if isinstance(pred, Or):
        pos_sets, neg_sets = [], []
        for c in pred.children:
            pos, ids = _eval(index, c)
            (pos_sets if pos else neg_sets).append(ids)
        if not neg_sets:
            out = pos_sets[0]
            for s in pos_sets[1:]:
                out = np.union1d(out, s)
            return True, out
        base = neg_sets[0]
        for s in neg_sets[1:]:
            base = np.intersect1d(base, s, assume_unique=True)
        for s in pos_sets:
            base = np.setdiff1d(base, s, assume_unique=True)
        return False, base
    raise TypeError(f"not a predicate: {pred!r}")


def eval_predicate(index, pred) -> np.ndarray:
    """Sorted raw ids of live vectors satisfying `pred`."""
    if isinstance(pred, str):
        pred = parse_predicate(pred)
    validate_predicate(pred)
    pos, ids = _eval(index, pred)
    assert pos, "validated predicates evaluate positively"
    return ids.astype(np.uint64)


@dataclass
class TempNode:
    base: object               # the mirrored TreeNode
    lo: int
    hi: int
    children: list = field(default_factory=list)
    _mat: object = None
    _radii: object = None

    def order_key(self):
        return self.base.order_key()

    @property
    def is_leaf(self):
        return not self.children


@dataclass
class TempIndex:
    root: TempNode
    ids: np.ndarray            # the qualified list, sorted uint64
    buffer_capacity: int

    def leaves(self):
        out, stack = [], [self.root]
        while stack:
            t = stack.pop()
            if t.is_leaf:
                out.append(t)
            else:
                stack.extend(reversed(t.children))
        return out


def build_temp_index(q, index, buffer_capacity: int = None) -> TempIndex:
    """Range-partition a sorted qualified list over the base tree.

    Purely binary searches on id boundaries: zero distance computations.
    """
    ids = np.asarray(q, dtype=np.uint64)
    if ids.size == 0:
        raise ValueError("cannot build a transient index over an empty list")
    if np.any(ids[1:] <= ids[:-1]):
        raise ValueError("qualified list must be strictly increasing")
    cap = buffer_capacity if buffer_capacity is not None else index.cfg.buffer_capacity

    def recurse(base, lo, hi):
        t = TempNode(base, lo, hi)
        if hi - lo <= cap or base.is_leaf:
            return t
        for child in base.children:
            clo = int(np.searchsorted(ids, np.uint64(child.prefix), side="left"))
            chi = int(np.searchsorted(ids, np.uint64(child.range_hi - 1), side="right"))
            clo, chi = max(clo, lo), min(chi, hi)
            if clo < chi:
                t.children.append(recurse(child, clo, chi))
        return t

    return TempIndex(recurse(index.root, 0, len(ids)), ids, cap)


class TempView:
    """Traversal adapter over a transient index; membership is exact."""

    def __init__(self, temp: TempIndex, index):
        self.temp = temp
        self.index = index

    @property
    def root(self):
        return self.temp.root

    def contains(self, t) -> bool:
        return True

    def buffer(self, t):
        return self.temp.ids[t.lo:t.hi] if t.is_leaf else None

    def children(self, t):
        return t.children

    def child_scores(self, t, xq, alpha, stats):
        if t._mat is None:
            t._mat = np.stack([c.base.centroid for c in t.children])
            t._radii = np.array([c.base.mean_radius for c in t.children])
        stats.centroid_dists += len(t.children)
        return np.linalg.norm(t._mat - xq, axis=1) - alpha * t._radii

    def score(self, t, xq, alpha, stats):
        stats.centroid_dists += 1
        return float(np.linalg.norm(t.base.centroid - xq)) - alpha * t.base.mean_radius

    def resolve(self, raws, xq, stats):
        locs = self.index.locs
        rows = np.empty((len(raws), self.index.dim), dtype=np.float32)
        for i, raw in enumerate(raws):
            leaf, slot = locs[int(raw)]
            rows[i] = leaf.vectors[slot]
        stats.vector_dists += len(raws)
        diff = rows.astype(np.float64) - xq
        return (diff * diff).sum(axis=1)


def search_predicate(index, xq, pred, params: SearchParams = None) -> SearchResult:
    """Approximate filtered k-NN for an arbitrary predicate.

    Evaluates the predicate (an AST or its infix text) to a qualified list,
    builds the transient index, and runs the standard traversal over it.
    """
    if params is None:
        params = SearchParams()
    if isinstance(pred, str):
        pred = parse_predicate(pred)
    xq = np.asarray(xq, dtype=np.float64).reshape(-1)
    if xq.shape[0] != index.dim:
        raise ValueError(f"query dim {xq.shape[0]} != index dim {index.dim}")
    stats = SearchStats()
    with index.lock.read():
        q = eval_predicate(index, pred)
        if q.size == 0:
            return SearchResult([], stats)
        temp = build_temp_index(q, index)
        view = TempView(temp, index)
        frontier = beam_descent(view, xq, params, stats)
        return best_first(view, xq, frontier, params, stats)


def integrate_as_virtual_label(index, pred) -> int:
    """Make a predicate's qualified set searchable as a first-class label.

    Allocates a reserved label id, distributes the qualified list as buffers
    over the matching nodes (exactly where the transient index would place
    them), updates filters and per-vector label sets, and returns the id.
    The label then behaves like any other for search and maintenance.
    """
    if isinstance(pred, str):
        pred = parse_predicate(pred)
    with index.lock.write():
        q = eval_predicate(index, pred)
        if q.size == 0:
            raise ValueError(f"predicate {pred} qualifies nothing; nothing to integrate")
        ensure_filters(index)
        v = index.registry.allocate_virtual()
        temp = build_temp_index(q, index)
        stack = [temp.root]
        while stack:
            t = stack.pop()
            t.base.label_counts[v] = t.hi - t.lo
            bloom_add(index, t.base, v)
            if t.is_leaf:
                t.base.buffers[v] = [int(r) for r in temp.ids[t.lo:t.hi]]
            else:
                stack.extend(t.children)
        for raw in q:
            leaf, slot = index.locs[int(raw)]
            leaf.slot_labels[slot].add(v)
        index.registry.counts[v] = int(q.size)
        index.epoch += 1
        return v


class PredicateCache:
    """Optional LRU of transient indexes keyed by canonical predicate text.

    Off by default: nothing uses it unless a caller constructs one and
    routes searches through it. Entries are invalidated whenever the index
    mutates (its epoch moves on).
    """

    def __init__(self, capacity: int = 16):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries = OrderedDict()
        self.hits = 0
        self.misses = 0

    def temp_for(self, index, pred) -> TempIndex:
        if isinstance(pred, str):
            pred = parse_predicate(pred)
        key = str(pred)
        entry = self._entries.get(key)
        if entry is not None and entry[0] == index.epoch:
            self._entries.move_to_end(key)
            self.hits += 1
            return entry[1]
        self.misses += 1
        q = eval_predicate(index, pred)
        if q.size == 0:
            raise ValueError(f"predicate {pred} qualifies nothing")
        temp = build_temp_index(q, index)
        self._entries[key] = (index.epoch, temp)
        self._entries.move_to_end(key)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)
        return temp

    def search(self, index, xq, pred, params: SearchParams = None) -> SearchResult:
        if params is None:
            params = SearchParams()
        if isinstance(pred, str):
            pred = parse_predicate(pred)
        xq = np.asarray(xq, dtype=np.float64).reshape(-1)
        stats = SearchStats()
        with index.lock.read():
            validate_predicate(pred)
            temp = self.temp_for(index, pred)
            view = TempView(temp, index)
            frontier = beam_descent(view, xq, params, stats)
            return best_first(view, xq, frontier, params, stats)
