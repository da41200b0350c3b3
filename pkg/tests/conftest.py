import numpy as np
import pytest

from filtree import BloomConfig, TreeConfig, build_index
from filtree import dataset as ds
from filtree.oracle import exact_filtered_knn
from filtree.util import rng_for

SUITE_SEED = 20240811


def small_config():
    return TreeConfig(branch_factor=8, leaf_capacity=32, slot_bits=7)


@pytest.fixture(scope="session")
def small_corpus():
    spec = ds.SelectivitySpec([0.2, 0.05, 0.01], labels_per_level=3)
    return ds.generate_synthetic(3000, 8, spec, seed=11)


@pytest.fixture(scope="session")
def small_index(small_corpus):
    data, assign = small_corpus
    return build_index(data, assign, small_config(), seed=5)


@pytest.fixture(scope="session")
def small_exact_index(small_corpus):
    data, assign = small_corpus
    return build_index(data, assign, small_config(), seed=5,
                       bloom=BloomConfig(exact_sets=True))


# --------------------------------------------------------------------------
# The benchmark-scale corpus: 20k vectors, 20 labels log-spaced in
# selectivity over [0.001, 0.2], 100 query vectors. Built once per session;
# nothing may mutate these fixtures.
# --------------------------------------------------------------------------

@pytest.fixture(scope="session")
def bench_corpus():
    spec = ds.SelectivitySpec.log_spaced(20, 0.001, 0.2, labels_per_level=1)
    data, assign = ds.generate_synthetic(20000, 16, spec, seed=SUITE_SEED)
    queries = rng_for(SUITE_SEED, "queries").standard_normal((100, 16))
    return data, assign, queries


@pytest.fixture(scope="session")
def bench_exact_index(bench_corpus):
    data, assign, _ = bench_corpus
    return build_index(data, assign, TreeConfig(), seed=SUITE_SEED,
                       bloom=BloomConfig(exact_sets=True))


@pytest.fixture(scope="session")
def bench_bloom_index(bench_corpus):
    data, assign, _ = bench_corpus
    return build_index(data, assign, TreeConfig(), seed=SUITE_SEED,
                       bloom=BloomConfig(target_fp_rate=0.01))


@pytest.fixture(scope="session")
def bench_truth(bench_corpus):
    """label -> [GroundTruth per query], k=10.

    Restricting the scan to the label's members before calling the exact
    search leaves the answer unchanged (non-members never qualify) but cuts
    the qualifier scan from n to |P_l| per query.
    """
    data, assign, queries = bench_corpus
    out = {}
    for label in assign.label_universe():
        rows = assign.members(label)
        sub_data = ds.Dataset(data.vectors[rows], keys=data.keys[rows])
        sub_assign = ds.LabelAssignment([assign.labels[r] for r in rows])
        out[label] = [exact_filtered_knn(sub_data, sub_assign, q, label, 10)
                      for q in queries]
    return out
