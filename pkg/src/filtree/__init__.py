"""Filtered approximate nearest-neighbor search over a hierarchical
k-means tree, with per-label indexes embedded as id buffers."""

from .dataset import (
    Dataset,
    LabelAssignment,
    SelectivitySpec,
    generate_synthetic,
    load_labels,
    load_vectors,
    save_labels,
    save_vectors,
)
from .labels import BloomConfig, BloomFilter, LabelRegistry, build_all_labels
from .maintenance import (
    check_invariants,
    delete_label,
    delete_vector,
    insert_label,
    insert_vector,
    rebuild_at,
    run_rebuilds,
)
from .oracle import (
    GroundTruth,
    exact_filtered_knn,
    read_ground_truth,
    write_ground_truth,
)
from .predicate import (
    And,
    Label,
    Not,
    Or,
    PredicateCache,
    build_temp_index,
    eval_predicate,
    integrate_as_virtual_label,
    parse_predicate,
    search_predicate,
)
from .search import SearchParams, SearchResult, recall_at_k, search_label
from .tree import (
    TreeConfig,
    TreeIndex,
    build,
    decode_id,
    encode_id,
    load_index,
    save_index,
)

__version__ = "0.1.0"


def build_index(dataset, assignment=None, cfg=None, seed=0, bloom=None):
    """Build the tree and attach every label in one call."""
    index = build(dataset, cfg, seed=seed, bloom=bloom)
    if assignment is not None:
        build_all_labels(index, dataset, assignment)
    return index
