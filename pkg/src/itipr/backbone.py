"""Ranking backbones (MF, LightGCN), pairwise losses and their analytic gradients."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dataset import InteractionSet
from .triplets import Triplet, TripletSet

__all__ = [
    "MF",
    "LIGHTGCN",
    "ModelState",
    "LossConfig",
    "build_graph",
    "init_model",
    "init_bound",
    "score",
    "score_matrix",
    "bpr_loss",
    "weighted_bpr_loss",
    "bpr_objective",
    "bpr_gradient",
    "sgd_step",
    "save_model",
    "load_model",
]

MF, LIGHTGCN = "mf", "lightgcn"


@dataclass(eq=False)
class ModelState:
    """User/item embeddings plus the backbone that turns them into scores.

    For LightGCN, ``graph`` is the symmetric-normalized ``(U+V) x (U+V)``
    bipartite adjacency of the training interactions.
    """

    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    backbone: str = MF
    n_layers: int = 0
    graph: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.backbone not in (MF, LIGHTGCN):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.backbone == LIGHTGCN and self.graph is None:
            raise ValueError("LightGCN needs a training graph")
        if self.user_embeddings.shape[1] != self.item_embeddings.shape[1]:
            raise ValueError("user and item embeddings must share a dimension")

    @property
    def n_users(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.user_embeddings.shape[1]

    def copy(self) -> "ModelState":
        return replace(
            self,
            user_embeddings=self.user_embeddings.copy(),
            item_embeddings=self.item_embeddings.copy(),
        )

    def final_embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Embeddings entering the inner product (layer-averaged for LightGCN)."""
        if self.backbone == MF or self.n_layers == 0:
            return self.user_embeddings, self.item_embeddings
        e = _propagate(self.graph, np.vstack([self.user_embeddings, self.item_embeddings]), self.n_layers)
        return e[: self.n_users], e[self.n_users:]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.user_embeddings).all() and np.isfinite(self.item_embeddings).all())


@dataclass(frozen=True)
class LossConfig:
    learning_rate: float = 0.05
    l2_reg: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")


def _propagate(graph: sp.csr_matrix, e: np.ndarray, n_layers: int) -> np.ndarray:
    # symmetric graph: the same operator maps embeddings forward and gradients back
    acc = e.copy()
    cur = e
    for _ in range(n_layers):
        cur = graph @ cur
        acc += cur
    return acc / (n_layers + 1)


def build_graph(train: InteractionSet) -> sp.csr_matrix:
    """Normalized bipartite adjacency with entries ``1 / sqrt(|N_u| |N_i|)``."""
    U, V = train.n_users, train.n_items
    u, i = train.pairs[:, 0], train.pairs[:, 1]
    du = np.maximum(train.user_degrees(), 1)
    di = np.maximum(train.item_degrees(), 1)
    w = 1.0 / np.sqrt(du[u] * di[i])
    rows = np.concatenate([u, U + i])
    cols = np.concatenate([U + i, u])
    return sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(U + V, U + V))


def init_bound(d: int) -> float:
    """Cap on ``|entry|`` of a fresh embedding: uniform with std ``0.1 / sqrt(d)``."""
    return 0.1 * np.sqrt(3.0 / d)


def init_model(
    n_users: int,
    n_items: int,
    d: int,
    backbone: str = MF,
    seed=0,
    *,
    n_layers: int = 2,
    train: InteractionSet | None = None,
    graph: sp.csr_matrix | None = None,
) -> ModelState:
    """Fresh i.i.d. uniform embeddings in ``[-init_bound(d), init_bound(d)]``."""
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    rng = np.random.default_rng(seed)
    a = init_bound(d)
    P = rng.uniform(-a, a, size=(n_users, d))
    Q = rng.uniform(-a, a, size=(n_items, d))
    if backbone == LIGHTGCN:
        if graph is None:
            if train is None:
                raise ValueError("LightGCN initialization needs the training interactions")
            graph = build_graph(train)
        return ModelState(P, Q, LIGHTGCN, n_layers, graph)
    return ModelState(P, Q, MF, 0, None)


def score(m: ModelState, u: int, i: int) -> float:
    P, Q = m.final_embeddings()
    return float(P[u] @ Q[i])


def score_matrix(m: ModelState) -> np.ndarray:
    P, Q = m.final_embeddings()
    return P @ Q.T


def _as_array(triplets) -> np.ndarray:
    if isinstance(triplets, TripletSet):
        return triplets.array
    if isinstance(triplets, Triplet):
        return np.array([triplets], dtype=np.int64)
    return np.asarray(triplets, dtype=np.int64).reshape(-1, 3)


def _margins(P: np.ndarray, Q: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.einsum("nd,nd->n", P[t[:, 0]], Q[t[:, 1]] - Q[t[:, 2]])


def bpr_loss(m: ModelState, t) -> float:
    """``-ln sigmoid(y_ui - y_uj)`` for a single triplet."""
    return weighted_bpr_loss(m, t, 1.0)


def weighted_bpr_loss(m: ModelState, t, w: float) -> float:
    P, Q = m.final_embeddings()
    x = _margins(P, Q, _as_array(t))[0]
    return float(w * np.logaddexp(0.0, -x))


def bpr_objective(m: ModelState, triplets, weights=None, l2: float = 0.0) -> float:
    """Summed weighted BPR loss plus ``l2/2`` squared norms of every touched base row."""
    t = _as_array(triplets)
    w = np.ones(len(t)) if weights is None else np.asarray(weights, dtype=float)
    P, Q = m.final_embeddings()
    loss = float(np.sum(w * np.logaddexp(0.0, -_margins(P, Q, t))))
    if l2:
        P0, Q0 = m.user_embeddings, m.item_embeddings
        sq = (P0[t[:, 0]] ** 2).sum() + (Q0[t[:, 1]] ** 2).sum() + (Q0[t[:, 2]] ** 2).sum()
        loss += 0.5 * l2 * float(sq)
    return loss


def bpr_gradient(m: ModelState, triplets, weights=None, l2: float = 0.0):
    """Gradient of :func:`bpr_objective` with respect to the base embeddings.

    Returns ``(grad_users, grad_items)`` with the shapes of the embedding
    matrices. Per-triplet gradients are summed.
    """
    t = _as_array(triplets)
    w = np.ones(len(t)) if weights is None else np.asarray(weights, dtype=float)
    u, i, j = t[:, 0], t[:, 1], t[:, 2]
    P, Q = m.final_embeddings()
    x = _margins(P, Q, t)
    # d/dx of w * softplus(-x) = -w * sigmoid(-x)
    g = -w * _sigmoid(-x)
    gP = np.zeros_like(P)
    gQ = np.zeros_like(Q)
    np.add.at(gP, u, g[:, None] * (Q[i] - Q[j]))
    np.add.at(gQ, i, g[:, None] * P[u])
    np.add.at(gQ, j, -g[:, None] * P[u])
    if m.backbone == LIGHTGCN and m.n_layers > 0:
        back = _propagate(m.graph, np.vstack([gP, gQ]), m.n_layers)
        gP, gQ = back[: m.n_users], back[m.n_users:]
    if l2:
        P0, Q0 = m.user_embeddings, m.item_embeddings
        np.add.at(gP, u, l2 * P0[u])
        np.add.at(gQ, i, l2 * Q0[i])
        np.add.at(gQ, j, l2 * Q0[j])
    return gP, gQ


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sgd_step(m: ModelState, triplets, weights=None, cfg: LossConfig = LossConfig()) -> ModelState:
    """One gradient step on the summed weighted BPR loss; returns a new state."""
    t = _as_array(triplets)
    if not len(t):
        raise ValueError("empty batch")
    gP, gQ = bpr_gradient(m, t, weights, cfg.l2_reg)
    if not (np.isfinite(gP).all() and np.isfinite(gQ).all()):
        bad = _first_nonfinite(m, t, weights, cfg)
        raise FloatingPointError(f"non-finite gradient for triplet {bad} {tuple(t[bad])}")
    out = m.copy()
    out.user_embeddings -= cfg.learning_rate * gP
    out.item_embeddings -= cfg.learning_rate * gQ
    return out


def _first_nonfinite(m, t, weights, cfg) -> int:
    w = np.ones(len(t)) if weights is None else np.asarray(weights, dtype=float)
    for k in range(len(t)):
        gP, gQ = bpr_gradient(m, t[k:k + 1], w[k:k + 1], cfg.l2_reg)
        if not (np.isfinite(gP).all() and np.isfinite(gQ).all()):
            return k
    return 0


def save_model(m: ModelState, path: str | Path) -> None:
    """Binary snapshot: JSON header ``(n_users, n_items, d, backbone, L)`` plus arrays."""
    header = json.dumps(
        {"n_users": m.n_users, "n_items": m.n_items, "d": m.dim, "backbone": m.backbone, "L": m.n_layers}
    )
    arrays = {"header": np.array(header), "P": m.user_embeddings, "Q": m.item_embeddings}
    if m.graph is not None:
        g = m.graph.tocsr()
        arrays.update(g_data=g.data, g_indices=g.indices, g_indptr=g.indptr)
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str | Path) -> ModelState:
    with np.load(Path(path), allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        graph = None
        if "g_data" in z:
            n = h["n_users"] + h["n_items"]
            graph = sp.csr_matrix((z["g_data"], z["g_indices"], z["g_indptr"]), shape=(n, n))
        return ModelState(z["P"].copy(), z["Q"].copy(), h["backbone"], h["L"], graph)
