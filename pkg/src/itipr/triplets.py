"""Triplet construction, negative sampling and permutation generation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataset import InteractionSet

__all__ = [
    "Triplet",
    "TripletSet",
    "in_space",
    "sample_triplets",
    "sample_permutation",
    "rotation_permutations",
    "permutation_rng",
]

INITIAL, RESAMPLED = "initial", "resampled"


class Triplet(NamedTuple):
    u: int
    i: int
    j: int


@dataclass(frozen=True, eq=False)
class TripletSet:
    """Ordered (user, positive, negative) triplets with an origin tag each.

    ``array`` is an ``(n, 3)`` int64 array; ``resampled`` marks triplets added
    by importance-aware resampling (``False`` for the initial set).
    """

    array: np.ndarray
    resampled: np.ndarray | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.array, dtype=np.int64).reshape(-1, 3))
        flags = (
            np.zeros(len(arr), dtype=bool)
            if self.resampled is None
            else np.asarray(self.resampled, dtype=bool).reshape(-1)
        )
        if len(flags) != len(arr):
            raise ValueError("one origin tag per triplet required")
        if len(arr) and len(np.unique(arr, axis=0)) != len(arr):
            raise ValueError("duplicate triplets")
        arr.setflags(write=False)
        flags.setflags(write=False)
        object.__setattr__(self, "array", arr)
        object.__setattr__(self, "resampled", flags)

    def __len__(self) -> int:
        return len(self.array)

    def __getitem__(self, k: int) -> Triplet:
        return Triplet(*(int(x) for x in self.array[k]))

    def __iter__(self):
        return (Triplet(*row) for row in self.array.tolist())

    def __eq__(self, other):
        if not isinstance(other, TripletSet):
            return NotImplemented
        return np.array_equal(self.array, other.array) and np.array_equal(
            self.resampled, other.resampled
        )

    __hash__ = None

    @property
    def users(self) -> np.ndarray:
        return self.array[:, 0]

    @property
    def pos(self) -> np.ndarray:
        return self.array[:, 1]

    @property
    def neg(self) -> np.ndarray:
        return self.array[:, 2]

    def origins(self) -> list[str]:
        return [RESAMPLED if f else INITIAL for f in self.resampled]

    def subset(self, idx) -> "TripletSet":
        idx = np.asarray(idx)
        return TripletSet(self.array[idx], self.resampled[idx])

    def concat(self, other: "TripletSet") -> "TripletSet":
        return TripletSet(
            np.concatenate([self.array, other.array]),
            np.concatenate([self.resampled, other.resampled]),
        )

    def validate(self, train: InteractionSet) -> None:
        """Raise ``ValueError`` if any triplet is outside the triplet space of ``train``."""
        a = self.array
        ok = (
            train.contains_many(a[:, 0], a[:, 1])
            & ~train.contains_many(a[:, 0], a[:, 2])
            & (a[:, 1] != a[:, 2])
        )
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise ValueError(f"triplet {bad} {tuple(a[bad])} is not in the triplet space")

    def to_csv(self, path: str | Path, train: InteractionSet | None = None) -> None:
        """Write ``user,pos_item,neg_item,origin``; external ids when ``train`` is given."""
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "pos_item", "neg_item", "origin"])
            for (u, i, j), tag in zip(self.array.tolist(), self.origins()):
                if train is not None:
                    u, i, j = train.user_ids[u], train.item_ids[i], train.item_ids[j]
                w.writerow([u, i, j, tag])

    @classmethod
    def from_csv(cls, path: str | Path, train: InteractionSet | None = None) -> "TripletSet":
        rows, flags = [], []
        with Path(path).open(encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:3] != ["user", "pos_item", "neg_item"]:
                raise ValueError(f"{path}: not a triplet file (header {header!r})")
            for r in reader:
                if not r:
                    continue
                if train is not None:
                    rows.append(
                        (
                            train.user_index_map[r[0]],
                            train.item_index_map[r[1]],
                            train.item_index_map[r[2]],
                        )
                    )
                else:
                    rows.append(tuple(int(x) for x in r[:3]))
                flags.append(len(r) > 3 and r[3] == RESAMPLED)
        return cls(np.array(rows, dtype=np.int64).reshape(-1, 3), np.array(flags, dtype=bool))


def in_space(u: int, i: int, j: int, train: InteractionSet) -> bool:
    return i != j and train.contains(u, i) and not train.contains(u, j)


def sample_triplets(
    train: InteractionSet, negatives_per_positive: int = 1, seed: int = 0
) -> TripletSet:
    """Uniform negative sampling: ``m`` distinct negatives for every training pair.

    Negatives are drawn by rejection against the user's training items, so the
    complement item set is never materialized.
    """
    m = negatives_per_positive
    if not 1 <= m <= 10:
        raise ValueError("negatives_per_positive must be in [1, 10]")
    rng = np.random.default_rng(seed)
    out = []
    for u, items in enumerate(train.user_items):
        if not len(items):
            continue
        n_free = train.n_items - len(items)
        if n_free < m:
            raise ValueError(
                f"user {train.user_ids[u]!r} has {n_free} non-interacted items, "
                f"cannot draw {m} negatives"
            )
        owned = set(items.tolist())
        for i in items.tolist():
            chosen: list[int] = []
            while len(chosen) < m:
                j = int(rng.integers(train.n_items))
                if j not in owned and j not in chosen:
                    chosen.append(j)
            out.extend((u, i, j) for j in chosen)
    return TripletSet(np.array(out, dtype=np.int64).reshape(-1, 3))


def permutation_rng(seed: int, k: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, draw index, stream)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k, stream])))


def sample_permutation(n: int, seed: int, k: int) -> np.ndarray:
    """Uniform random permutation of ``range(n)`` determined by ``(seed, k)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return permutation_rng(seed, k).permutation(n)


def rotation_permutations(n: int) -> list[np.ndarray]:
    """The ``n`` cyclic rotations of the identity, moving the last element to the front."""
    if n < 1:
        raise ValueError("n must be >= 1")
    base = np.arange(n)
    return [np.roll(base, r) for r in range(n)]
