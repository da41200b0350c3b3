"""Vector datasets, label assignments, and file formats.

Vector files come in three flavors:

* ``fvecs``  -- per record: little-endian int32 dimension header, then that
  many float32 values.
* ``bvecs``  -- same header, values are uint8 (widened to float32 on load).
* ``raw``    -- headerless little-endian float32; the dimension must be
  supplied out of band.

Label files are plain text: line *i* holds the whitespace-separated integer
labels of vector *i*; a blank line means the vector is unlabeled.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .util import rng_for

# Label ids at or above this value are reserved for labels minted at runtime
# (e.g. predicates integrated as searchable labels).
RESERVED_LABEL_BASE = 1 << 31

VECTOR_FORMATS = ("fvecs", "bvecs", "raw")


@dataclass
class Dataset:
    """A dense float32 vector collection with unique external keys."""

    vectors: np.ndarray          # (n, dim) float32
    keys: np.ndarray = None      # (n,) uint64, defaults to 0..n-1

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        if self.keys is None:
            self.keys = np.arange(len(self.vectors), dtype=np.uint64)
        else:
            self.keys = np.asarray(self.keys, dtype=np.uint64)
        if len(self.keys) != len(self.vectors):
            raise ValueError("keys/vectors length mismatch")
        if len(np.unique(self.keys)) != len(self.keys):
            raise ValueError("external keys must be unique")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class LabelAssignment:
    """Per-vector label sets, index-aligned with a Dataset's rows."""

    labels: list            # list[set[int]]
    _members: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def members(self, label: int) -> np.ndarray:
        """Sorted row indices of the vectors carrying `label`."""
        if label not in self._members:
            rows = [i for i, s in enumerate(self.labels) if label in s]
            self._members[label] = np.asarray(rows, dtype=np.int64)
        return self._members[label]

    def label_universe(self) -> list:
        seen = set()
        for s in self.labels:
            seen.update(s)
        return sorted(seen)

    def selectivity(self, label: int) -> float:
        return len(self.members(label)) / len(self.labels)


@dataclass
class SelectivitySpec:
    """Recipe for synthetic label populations.

    Each level `s` adds `labels_per_level` labels, each placed on exactly
    round(s * n) distinct vectors. With `correlated=True`, every label also
    pulls its members toward a label-specific Gaussian center so that label
    membership correlates with vector position.
    """

    levels: list
    labels_per_level: int = 10
    correlated: bool = False

    @staticmethod
    def log_spaced(n_levels: int = 20, lo: float = 0.001, hi: float = 0.2,
                   labels_per_level: int = 10, correlated: bool = False) -> "SelectivitySpec":
        levels = np.logspace(np.log10(lo), np.log10(hi), n_levels).tolist()
        return SelectivitySpec(levels, labels_per_level, correlated)


def generate_synthetic(n: int, dim: int, spec: SelectivitySpec, seed: int = 0):
    """Build an i.i.d. standard-normal dataset plus labels per `spec`.

    Label ids are assigned level-major: level i, slot j gets id
    i * labels_per_level + j. Returns (Dataset, LabelAssignment).
    """
    if n <= 0 or dim <= 0:
        raise ValueError("n and dim must be positive")
    vectors = rng_for(seed, "vectors").standard_normal((n, dim)).astype(np.float32)
    labels = [set() for _ in range(n)]
    for i, s in enumerate(spec.levels):
        population = int(round(s * n))
        if population <= 0:
            raise ValueError(f"selectivity level {s} rounds to an empty population for n={n}")
        if population > n:
            raise ValueError(f"selectivity level {s} exceeds 1.0")
        for j in range(spec.labels_per_level):
            label = i * spec.labels_per_level + j
            rows = rng_for(seed, "members", label).choice(n, size=population, replace=False)
            for r in rows:
                labels[int(r)].add(label)
            if spec.correlated:
                center = rng_for(seed, "center", label).standard_normal(dim)
                vectors[rows] += center.astype(np.float32)
    return Dataset(vectors), LabelAssignment(labels)


def _read_headed(path: str, value_dtype, fmt: str) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise ValueError(f"{path}: empty {fmt} file")
    if raw.size < 4:
        raise ValueError(f"{path}: truncated header at byte 0")
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise ValueError(f"{path}: bad dimension {dim} in header at byte 0")
    record = 4 + dim * value_dtype.itemsize
    if raw.size % record != 0:
        raise ValueError(
            f"{path}: malformed {fmt}: {raw.size} bytes is not a multiple of "
            f"record size {record} (dim {dim}); trailing data at byte {raw.size - raw.size % record}"
        )
    n = raw.size // record
    recs = raw.reshape(n, record)
    headers = recs[:, :4].copy().view("<i4").ravel()
    bad = np.nonzero(headers != dim)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"{path}: inconsistent dimension {int(headers[i])} != {dim} "
            f"in record {i} at byte {i * record}"
        )
    body = recs[:, 4:].copy().view(value_dtype.newbyteorder("<"))
    return body.astype(np.float32)


def load_vectors(path: str, fmt: str = "fvecs", dim: int = None) -> np.ndarray:
    """Load a vector file into a float32 matrix."""
    if fmt == "fvecs":
        return _read_headed(path, np.dtype(np.float32), fmt)
    if fmt == "bvecs":
        return _read_headed(path, np.dtype(np.uint8), fmt)
    if fmt == "raw":
        if dim is None or dim <= 0:
            raise ValueError("raw format requires a positive dim")
        size = os.path.getsize(path)
        if size == 0:
            raise ValueError(f"{path}: empty raw file")
        record = 4 * dim
        if size % record != 0:
            raise ValueError(
                f"{path}: raw file of {size} bytes is not a multiple of "
                f"{record}-byte records (dim {dim}); trailing data at byte {size - size % record}"
            )
        flat = np.fromfile(path, dtype="<f4")
        return flat.reshape(-1, dim).astype(np.float32)
    raise ValueError(f"unknown vector format {fmt!r}")


def save_vectors(vectors: np.ndarray, path: str, fmt: str = "fvecs") -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.size == 0:
        raise ValueError("vectors must be a non-empty 2-D array")
    n, dim = vectors.shape
    if fmt == "fvecs":
        out = np.empty((n, 1 + dim), dtype="<f4")
        out[:, 0:1] = np.full((n, 1), 0, dtype="<f4")
        out[:, 0:1].view("<i4")[:] = dim
        out[:, 1:] = vectors
        out.tofile(path)
    elif fmt == "bvecs":
        if np.any(vectors < 0) or np.any(vectors > 255) or np.any(vectors != np.floor(vectors)):
            raise ValueError("bvecs requires integral values in [0, 255]")
        body = vectors.astype(np.uint8)
        header = np.full((n, 4), 0, dtype=np.uint8)
        header.view("<i4")[:] = dim
        np.hstack([header, body]).tofile(path)
    elif fmt == "raw":
        vectors.astype("<f4").tofile(path)
    else:
        raise ValueError(f"unknown vector format {fmt!r}")


def load_labels(path: str, n_expected: int = None) -> LabelAssignment:
    """Parse a label text file; line i labels vector i."""
    labels = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            entry = set()
            for tok in line.split():
                try:
                    val = int(tok)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-integer label {tok!r}") from None
                if val < 0:
                    raise ValueError(f"{path}:{lineno}: negative label {val}")
                if val >= RESERVED_LABEL_BASE:
                    raise ValueError(
                        f"{path}:{lineno}: label {val} is in the reserved range >= {RESERVED_LABEL_BASE}"
                    )
                entry.add(val)
            labels.append(entry)
    if n_expected is not None and len(labels) != n_expected:
        raise ValueError(f"{path}: {len(labels)} label lines for {n_expected} vectors")
    return LabelAssignment(labels)


def save_labels(assignment: LabelAssignment, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for s in assignment.labels:
            fh.write(" ".join(str(x) for x in sorted(s)))
            fh.write("\n")
