"""Shared utilities: seeded RNG derivation, distance-op counters, a small
reader/writer lock, and version reporting."""

from __future__ import annotations

import hashlib
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np


def _tag_to_u32(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    digest = hashlib.blake2s(str(tag).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def subseed(seed: int, *tags) -> int:
    """Stable 64-bit seed derived from (seed, *tags); platform-independent."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode("ascii"))
    for t in tags:
        h.update(b"\x1f")
        h.update(str(t).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Derive an independent generator from (seed, *tags).

    Tags may be ints (e.g. tree-path digits) or strings naming the purpose.
    The same (seed, tags) tuple always yields the same stream, and distinct
    tag tuples yield statistically independent streams, so every randomized
    stage can be re-run in isolation.
    """
    key = tuple(_tag_to_u32(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class DistanceCounter:
    """Tallies distance computations, split by operand kind."""

    centroid: int = 0
    vector: int = 0

    def snapshot(self) -> tuple[int, int]:
        return (self.centroid, self.vector)

    def delta(self, snap: tuple[int, int]) -> tuple[int, int]:
        return (self.centroid - snap[0], self.vector - snap[1])


class RWLock:
    """Single-writer / multi-reader lock.

    Searches take the read side; all mutating operations take the write
    side, so a reader observes either the pre- or post-state of any update.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    def acquire_read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True

    def release_write(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()

    class _Guard:
        def __init__(self, acquire, release):
            self._acquire, self._release = acquire, release

        def __enter__(self):
            self._acquire()

        def __exit__(self, *exc):
            self._release()
            return False

    def read(self) -> "_Guard":
        return self._Guard(self.acquire_read, self.release_read)

    def write(self) -> "_Guard":
        return self._Guard(self.acquire_write, self.release_write)


def version_string() -> str:
    """Package version, git-describe style when a git checkout is present."""
    from importlib.metadata import PackageNotFoundError, version

    try:
        base = version("filtree")
    except PackageNotFoundError:
        base = "0.0.0"
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return f"{base}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base
