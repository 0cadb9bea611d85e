"""Interaction data: ingestion, binarization, activity filtering and splitting."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DataWarning",
    "EmptyDatasetError",
    "RawRecord",
    "InteractionSet",
    "SplitInteractions",
    "load_records",
    "binarize",
    "filter_by_activity",
    "split",
    "make_planted",
    "save_split",
    "load_split",
]


class DataWarning(UserWarning):
    """Raised for malformed or rejected input lines."""


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class RawRecord:
    user_id: str
    item_id: str
    rating: float | None = None
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Deduplicated binary user-item interactions over dense indices.

    ``pairs`` is an ``(n, 2)`` int64 array sorted by (user, item).
    ``user_ids[k]`` / ``item_ids[k]`` give the external id of dense index ``k``.
    """

    n_users: int
    n_items: int
    pairs: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs):
            codes = np.unique(pairs[:, 0] * self.n_items + pairs[:, 1])
            pairs = np.stack([codes // self.n_items, codes % self.n_items], axis=1)
            if pairs[:, 0].max() >= self.n_users or pairs[:, 1].max() >= self.n_items:
                raise ValueError("interaction index out of range")
            if pairs.min() < 0:
                raise ValueError("negative interaction index")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        if len(self.user_ids) != self.n_users or len(self.item_ids) != self.n_items:
            raise ValueError("index maps must cover every index")

    def __len__(self) -> int:
        return len(self.pairs)

    def __eq__(self, other):
        if not isinstance(other, InteractionSet):
            return NotImplemented
        return (
            self.n_users == other.n_users
            and self.n_items == other.n_items
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and np.array_equal(self.pairs, other.pairs)
        )

    __hash__ = None

    @cached_property
    def user_index_map(self) -> dict[str, int]:
        return {uid: k for k, uid in enumerate(self.user_ids)}

    @cached_property
    def item_index_map(self) -> dict[str, int]:
        return {iid: k for k, iid in enumerate(self.item_ids)}

    @cached_property
    def codes(self) -> np.ndarray:
        """Sorted ``user * n_items + item`` codes, for vectorized membership."""
        return self.pairs[:, 0] * self.n_items + self.pairs[:, 1]

    @cached_property
    def user_items(self) -> list[np.ndarray]:
        bounds = np.searchsorted(self.pairs[:, 0], np.arange(self.n_users + 1))
        return [self.pairs[bounds[u]:bounds[u + 1], 1] for u in range(self.n_users)]

    @cached_property
    def _lookup(self) -> frozenset[int]:
        return frozenset(self.codes.tolist())

    def contains(self, u: int, i: int) -> bool:
        return u * self.n_items + i in self._lookup

    def contains_many(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        q = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.codes, q)
        pos = np.minimum(pos, max(len(self.codes) - 1, 0))
        if not len(self.codes):
            return np.zeros(q.shape, dtype=bool)
        return self.codes[pos] == q

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 0], minlength=self.n_users)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 1], minlength=self.n_items)

    def dense(self) -> np.ndarray:
        """Boolean ``n_users x n_items`` matrix."""
        m = np.zeros((self.n_users, self.n_items), dtype=bool)
        m[self.pairs[:, 0], self.pairs[:, 1]] = True
        return m

    def with_pairs(self, pairs: np.ndarray) -> "InteractionSet":
        """Same index space, different interactions."""
        return InteractionSet(self.n_users, self.n_items, pairs, self.user_ids, self.item_ids)

    @classmethod
    def from_pairs(cls, pairs, n_users: int, n_items: int) -> "InteractionSet":
        """Build from dense index pairs with synthetic ``u<k>``/``i<k>`` ids."""
        return cls(
            n_users,
            n_items,
            np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
            tuple(f"u{k}" for k in range(n_users)),
            tuple(f"i{k}" for k in range(n_items)),
        )


@dataclass(frozen=True)
class SplitInteractions:
    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for part in (self.validation, self.test):
            if (part.n_users, part.n_items) != (self.train.n_users, self.train.n_items):
                raise ValueError("splits must share one index space")

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def role(self, name: str) -> InteractionSet:
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown split role {name!r}")
        return getattr(self, name)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_records(path: str | Path, has_ratings: bool = True) -> list[RawRecord]:
    """Read ``user,item[,rating[,timestamp]]`` lines from a CSV or TSV file.

    Malformed lines and ratings outside [0, 5] are skipped with a
    :class:`DataWarning` each. A header line is recognised by a non-numeric
    rating field (or, for two-column files, by a ``user`` first token).
    """
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        return []
    delimiter = "\t" if "\t" in lines[0] else ","
    records: list[RawRecord] = []
    for lineno, row in enumerate(csv.reader(lines, delimiter=delimiter), start=1):
        row = [c.strip() for c in row]
        if not row or all(not c for c in row):
            continue
        if lineno == 1 and _looks_like_header(row, has_ratings):
            continue
        min_cols = 3 if has_ratings else 2
        if len(row) < min_cols or not row[0] or not row[1]:
            warnings.warn(f"{path}:{lineno}: malformed line {row!r}", DataWarning, stacklevel=2)
            continue
        rating = timestamp = None
        try:
            if has_ratings:
                rating = float(row[2])
                if len(row) > 3 and row[3]:
                    timestamp = int(float(row[3]))
            elif len(row) > 2 and row[2]:
                timestamp = int(float(row[2]))
        except ValueError:
            warnings.warn(f"{path}:{lineno}: malformed line {row!r}", DataWarning, stacklevel=2)
            continue
        if rating is not None and not 0.0 <= rating <= 5.0:
            warnings.warn(
                f"{path}:{lineno}: rating {rating} outside [0, 5], record rejected",
                DataWarning,
                stacklevel=2,
            )
            continue
        records.append(RawRecord(row[0], row[1], rating, timestamp))
    return records


def _looks_like_header(row: Sequence[str], has_ratings: bool) -> bool:
    if has_ratings and len(row) >= 3:
        return not _is_number(row[2])
    return row[0].lower() in {"user", "user_id", "userid", "u"}


def _index(ids: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(ids)))


def binarize(records: Sequence[RawRecord], threshold: float = 3.0) -> InteractionSet:
    """Keep records rated strictly above ``threshold``; unrated records are kept.

    Dense indices follow the sorted external ids, so the result does not
    depend on record order.
    """
    kept = [r for r in records if r.rating is None or r.rating > threshold]
    user_ids = _index(r.user_id for r in kept)
    item_ids = _index(r.item_id for r in kept)
    umap = {u: k for k, u in enumerate(user_ids)}
    imap = {i: k for k, i in enumerate(item_ids)}
    pairs = np.array([(umap[r.user_id], imap[r.item_id]) for r in kept], dtype=np.int64)
    return InteractionSet(len(user_ids), len(item_ids), pairs.reshape(-1, 2), user_ids, item_ids)


def filter_by_activity(
    s: InteractionSet, min_user_degree: int = 0, min_item_degree: int = 0
) -> InteractionSet:
    """Drop users/items below the degree thresholds until nothing changes."""
    if min_user_degree < 0 or min_item_degree < 0:
        raise ValueError("degree thresholds must be >= 0")
    pairs = s.pairs
    while True:
        udeg = np.bincount(pairs[:, 0], minlength=s.n_users)
        ideg = np.bincount(pairs[:, 1], minlength=s.n_items)
        keep = (udeg[pairs[:, 0]] >= min_user_degree) & (ideg[pairs[:, 1]] >= min_item_degree)
        if keep.all():
            break
        pairs = pairs[keep]
    if not len(pairs):
        raise EmptyDatasetError(
            f"activity filter (users >= {min_user_degree}, items >= {min_item_degree}) "
            f"removed all {len(s)} interactions"
        )
    users = np.unique(pairs[:, 0])
    items = np.unique(pairs[:, 1])
    new_pairs = np.stack(
        [np.searchsorted(users, pairs[:, 0]), np.searchsorted(items, pairs[:, 1])], axis=1
    )
    return InteractionSet(
        len(users),
        len(items),
        new_pairs,
        tuple(s.user_ids[u] for u in users),
        tuple(s.item_ids[i] for i in items),
    )


def split(
    s: InteractionSet, ratios: Sequence[float] = (8, 1, 1), seed: int = 0
) -> SplitInteractions:
    """Per-user random train/validation/test partition.

    Each user with at least three items gets at least one validation and one
    test item; rounding remainders go to train. Users with fewer than three
    items are placed entirely in train.
    """
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError("ratios must be three positive numbers")
    total = float(sum(ratios))
    parts: list[list[np.ndarray]] = [[], [], []]
    for u, items in enumerate(s.user_items):
        n = len(items)
        rng = np.random.default_rng([seed, u])
        order = items[rng.permutation(n)]
        if n < 3:
            n_val = n_test = 0
        else:
            n_val = max(1, int(np.floor(n * ratios[1] / total)))
            n_test = max(1, int(np.floor(n * ratios[2] / total)))
        chunks = (order[n_val + n_test:], order[:n_val], order[n_val:n_val + n_test])
        for k, chunk in enumerate(chunks):
            parts[k].append(np.stack([np.full(len(chunk), u), chunk], axis=1))
    train, val, test = (
        s.with_pairs(np.concatenate(p) if p else np.empty((0, 2), np.int64)) for p in parts
    )
    return SplitInteractions(train, val, test, meta={"ratios": list(ratios), "seed": seed})


def make_planted(
    n_users: int = 500,
    n_items: int = 200,
    per_user: int = 15,
    n_factors: int = 8,
    sharpness: float = 2.0,
    popularity: float = 1.0,
    seed: int = 0,
) -> InteractionSet:
    """Synthetic implicit feedback with a planted low-rank preference structure.

    Each user draws ``per_user`` distinct items with probability proportional
    to ``exp(sharpness * <x_u, y_i> + popularity * b_i)`` for Gaussian latent
    factors ``x``, ``y`` (scaled to unit expected inner product variance) and
    item popularity ``b``.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_users, n_factors)) / n_factors ** 0.25
    y = rng.normal(size=(n_items, n_factors)) / n_factors ** 0.25
    b = rng.normal(size=n_items)
    logits = sharpness * x @ y.T + popularity * b
    pairs = []
    for u in range(n_users):
        # Gumbel top-k == sampling without replacement proportional to exp(logits)
        g = logits[u] + rng.gumbel(size=n_items)
        items = np.argpartition(-g, per_user)[:per_user]
        pairs.append(np.stack([np.full(per_user, u), items], axis=1))
    return InteractionSet.from_pairs(np.concatenate(pairs), n_users, n_items)


def save_split(sp: SplitInteractions, path: str | Path) -> None:
    """Write one ``user,item,split`` row per interaction (external ids)."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item", "split"])
        for name in ("train", "validation", "test"):
            part = sp.role(name)
            for u, i in part.pairs:
                w.writerow([part.user_ids[u], part.item_ids[i], name])


def load_split(path: str | Path) -> SplitInteractions:
    rows = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user", "item", "split"]:
            raise ValueError(f"{path}: not a split snapshot (header {header!r})")
        rows = [r for r in reader if r]
    user_ids = _index(r[0] for r in rows)
    item_ids = _index(r[1] for r in rows)
    umap = {u: k for k, u in enumerate(user_ids)}
    imap = {i: k for k, i in enumerate(item_ids)}
    buckets = {"train": [], "validation": [], "test": []}
    for u, i, name in rows:
        buckets[name].append((umap[u], imap[i]))
    parts = [
        InteractionSet(
            len(user_ids),
            len(item_ids),
            np.array(buckets[n], dtype=np.int64).reshape(-1, 2),
            user_ids,
            item_ids,
        )
        for n in ("train", "validation", "test")
    ]
    return SplitInteractions(*parts)
