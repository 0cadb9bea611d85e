"""Top-K ranking metrics and the validation accuracy used as the valuation utility."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import ModelState, score_matrix
from .dataset import SplitInteractions

__all__ = [
    "EvalReport",
    "top_k",
    "recall_at_k",
    "ndcg_at_k",
    "ranked_lists",
    "per_user_metrics",
    "accuracy",
    "evaluate",
]


@dataclass(frozen=True)
class EvalReport:
    recall_at_k: float
    ndcg_at_k: float
    k: int
    n_users_evaluated: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_csv_row(self) -> str:
        return f"{self.k},{self.n_users_evaluated},{self.recall_at_k:.10g},{self.ndcg_at_k:.10g}"

    csv_header = "k,n_users_evaluated,recall_at_k,ndcg_at_k"


def _rank_row(scores: np.ndarray, k: int, exclude) -> tuple[np.ndarray, bool]:
    scores = np.asarray(scores, dtype=float)
    allowed = np.ones(len(scores), dtype=bool)
    if exclude is not None and len(exclude):
        allowed[np.fromiter(exclude, dtype=np.int64)] = False
    cand = np.flatnonzero(allowed)
    # stable sort on negated scores keeps ascending index among ties
    order = cand[np.argsort(-scores[cand], kind="stable")]
    return order[:k], len(cand) < k


def top_k(m: ModelState, u: int, k: int, exclude=()) -> tuple[list[int], bool]:
    """The ``k`` best-scoring items for user ``u`` not in ``exclude``.

    Returns ``(items, short)`` where ``short`` flags that fewer than ``k``
    candidates existed. Ties go to the lower item index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    P, Q = m.final_embeddings()
    items, short = _rank_row(Q @ P[u], k, exclude)
    return items.tolist(), short


def recall_at_k(recommended, test_items, k: int) -> float:
    test = set(test_items)
    if not test:
        raise ValueError("test_items must be non-empty")
    hits = sum(1 for it in list(recommended)[:k] if it in test)
    return hits / min(k, len(test))


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(recommended, test_items, k: int) -> float:
    test = set(test_items)
    if not test:
        raise ValueError("test_items must be non-empty")
    # accumulate in rank order so results are reproducible term by term
    dcg = 0.0
    for r, it in enumerate(list(recommended)[:k], start=1):
        if it in test:
            dcg += 1.0 / math.log2(r + 1)
    idcg = 0.0
    for r in range(1, min(k, len(test)) + 1):
        idcg += 1.0 / math.log2(r + 1)
    return dcg / idcg


def ranked_lists(scores: np.ndarray, mask: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise top-``k`` over unmasked entries.

    Returns ``(items, valid)``: ``items[u, r]`` is the rank-``r`` item and
    ``valid[u, r]`` is False where the user ran out of candidates.
    """
    s = np.where(mask, -np.inf, scores)
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    valid = ~np.take_along_axis(mask, order, axis=1)
    return order, valid


def per_user_metrics(
    scores: np.ndarray, exclude: np.ndarray, targets: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized Recall@k and NDCG@k for every user with at least one target.

    ``exclude`` and ``targets`` are boolean user x item matrices. Returns
    ``(users, recall, ndcg)``.
    """
    users = np.flatnonzero(targets.any(axis=1))
    order, valid = ranked_lists(scores[users], exclude[users], k)
    hits = np.take_along_axis(targets[users], order, axis=1) & valid
    n_t = targets[users].sum(axis=1)
    disc = _discounts(k)
    cap = np.minimum(k, n_t)
    idcg = np.cumsum(disc)[cap - 1]
    recall = hits.sum(axis=1) / cap
    ndcg = (hits * disc[: order.shape[1]]).sum(axis=1) / idcg
    return users, recall, ndcg


def evaluate(m: ModelState, split: SplitInteractions, role: str = "test", k: int = 20, users=None) -> EvalReport:
    """Recall@k / NDCG@k on ``role``, excluding each user's training items."""
    targets = split.role(role).dense()
    if users is not None:
        keep = np.zeros(split.n_users, dtype=bool)
        keep[np.asarray(users, dtype=np.int64)] = True
        targets &= keep[:, None]
    ev_users, recall, ndcg = per_user_metrics(score_matrix(m), split.train.dense(), targets, k)
    if not len(ev_users):
        raise ValueError(f"no user has {role} interactions to evaluate")
    return EvalReport(float(recall.mean()), float(ndcg.mean()), k, len(ev_users))


def accuracy(
    m: ModelState, split: SplitInteractions, role: str = "validation", k: int = 20, metric: str = "ndcg", users=None
) -> float:
    """Scalar accuracy: mean NDCG@k (or Recall@k) over evaluable users."""
    rep = evaluate(m, split, role, k, users)
    value = rep.ndcg_at_k if metric == "ndcg" else rep.recall_at_k
    if not np.isfinite(value):
        raise FloatingPointError("non-finite accuracy")
    return value
