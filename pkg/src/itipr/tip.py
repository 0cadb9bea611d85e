"""Triplet importance predictor (TIP) and importance-aware negative resampling.

TIP is a two-layer perceptron ``tanh(w2 . relu(W1 [p_u; q_i; q_j] + b1) + b2)``
regressed on (robustly rescaled) triplet Shapley values. Its scores define a
softmax over candidate negatives from which new triplets are drawn.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_triplets
from .backbone import ModelState
from .dataset import InteractionSet
from .triplets import TripletSet

__all__ = [
    "TipModel",
    "TargetScaler",
    "ResampleConfig",
    "ResampleWarning",
    "init_tip",
    "tip_features",
    "tip_forward",
    "tip_loss",
    "tip_gradient",
    "tip_train",
    "resample_probabilities",
    "candidate_pool",
    "resample",
    "TIPRegressor",
    "save_tip",
    "load_tip",
]

log = logging.getLogger(__name__)


class ResampleWarning(UserWarning):
    """A (user, positive) pair had no eligible negative left."""


@dataclass
class TipModel:
    W1: np.ndarray  # (h, 3d)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (h,) -- the single output row
    b2: float = 0.0

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1] // 3

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, np.array([self.b2])]

    def with_params(self, ps) -> "TipModel":
        return TipModel(ps[0], ps[1], ps[2], float(np.asarray(ps[3]).reshape(-1)[0]))

    def copy(self) -> "TipModel":
        return self.with_params([p.copy() for p in self.params()])


def init_tip(d: int, hidden_dim: int = 64, seed=0) -> TipModel:
    """He-scaled first layer, small output layer, zero biases."""
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0.0, np.sqrt(2.0 / (3 * d)), size=(hidden_dim, 3 * d))
    W2 = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), size=hidden_dim)
    return TipModel(W1, np.zeros(hidden_dim), W2, 0.0)


def tip_features(m: ModelState, triplets) -> np.ndarray:
    """Rows ``[p_u; q_i; q_j]`` from the model's final (propagated) embeddings."""
    t = np.asarray(triplets.array if isinstance(triplets, TripletSet) else triplets, dtype=np.int64).reshape(-1, 3)
    P, Q = m.final_embeddings()
    return np.hstack([P[t[:, 0]], Q[t[:, 1]], Q[t[:, 2]]])


def _hidden(tm: TipModel, X: np.ndarray):
    a = X @ tm.W1.T + tm.b1
    return a, np.maximum(a, 0.0)


def tip_forward(tm: TipModel, p_u, q_i=None, q_j=None) -> np.ndarray | float:
    """TIP output in (-1, 1).

    Either three embedding vectors, or one feature matrix with rows
    ``[p_u; q_i; q_j]`` (returns a vector).
    """
    if q_i is None:
        X = np.atleast_2d(np.asarray(p_u, dtype=float))
        return np.tanh(_hidden(tm, X)[1] @ tm.W2 + tm.b2)
    x = np.concatenate([p_u, q_i, q_j]).astype(float)
    return float(np.tanh(_hidden(tm, x[None, :])[1] @ tm.W2 + tm.b2)[0])


def tip_loss(tm: TipModel, X: np.ndarray, y: np.ndarray) -> float:
    """Mean squared error."""
    return float(np.mean((tip_forward(tm, X) - y) ** 2))


def tip_gradient(tm: TipModel, X: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """MSE loss and its gradient ``[dW1, db1, dW2, db2]``."""
    n = X.shape[0]
    a, h = _hidden(tm, X)
    out = np.tanh(h @ tm.W2 + tm.b2)
    r = out - y
    dz = (2.0 / n) * r * (1.0 - out * out)
    dW2 = h.T @ dz
    db2 = np.array([dz.sum()])
    da = np.outer(dz, tm.W2) * (a > 0)
    dW1 = da.T @ X
    db1 = da.sum(axis=0)
    return float(np.mean(r * r)), [dW1, db1, dW2, db2]


@dataclass(frozen=True)
class TargetScaler:
    """``z = clip((v - center) / scale, -bound, bound)`` with ``scale = 3 * IQR``."""

    center: float
    scale: float
    bound: float = 0.999

    @classmethod
    def fit(cls, values, bound: float = 0.999) -> "TargetScaler":
        v = np.asarray(values, dtype=float)
        if not np.isfinite(v).all():
            raise ValueError("non-finite target")
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        scale = 3.0 * (q3 - q1)
        if scale <= 0:
            # degenerate spread: fall back to the largest deviation
            scale = 3.0 * np.max(np.abs(v - med))
        return cls(float(med), float(scale) if scale > 0 else 1.0, bound)

    def transform(self, values) -> np.ndarray:
        return np.clip((np.asarray(values, dtype=float) - self.center) / self.scale, -self.bound, self.bound)

    def inverse_transform(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.scale + self.center


@dataclass(frozen=True)
class ResampleConfig:
    candidate_pool_size: int = 100
    new_triplets_per_positive: int = 1
    tip_epochs: int = 200
    tip_lr: float = 1e-3
    tip_batch_size: int = 64
    hidden_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.new_triplets_per_positive < 0:
            raise ValueError("new_triplets_per_positive must be >= 0")
        if self.candidate_pool_size < max(1, self.new_triplets_per_positive):
            raise ValueError("candidate_pool_size must be >= new_triplets_per_positive (and >= 1)")
        if not self.tip_lr > 0:
            raise ValueError("tip_lr must be > 0")
        if self.tip_epochs < 1 or self.tip_batch_size < 1 or self.hidden_dim < 1:
            raise ValueError("tip_epochs, tip_batch_size and hidden_dim must be >= 1")


@dataclass
class _Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


def tip_train(X: np.ndarray, z: np.ndarray, cfg: ResampleConfig = ResampleConfig(),
              init: TipModel | None = None) -> tuple[TipModel, float]:
    """Fit TIP to already-scaled targets ``z`` by mini-batch Adam on the MSE.

    Returns the model and its final full-data training MSE.
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    if not len(z):
        raise ValueError("no training targets")
    if np.abs(z).max() >= 1:
        raise ValueError("targets must lie inside (-1, 1); scale them first")
    tm = init.copy() if init is not None else init_tip(X.shape[1] // 3, cfg.hidden_dim, [cfg.seed, 1])
    opt = _Adam(cfg.tip_lr)
    rng = np.random.default_rng([cfg.seed, 2])
    for _ in range(cfg.tip_epochs):
        order = rng.permutation(len(z))
        for s in range(0, len(z), cfg.tip_batch_size):
            idx = order[s:s + cfg.tip_batch_size]
            loss, grads = tip_gradient(tm, X[idx], z[idx])
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite TIP loss")
            tm = tm.with_params(opt.step(tm.params(), grads))
    mse = tip_loss(tm, X, z)
    if not np.isfinite(mse):
        raise FloatingPointError("non-finite TIP loss")
    return tm, mse


def resample_probabilities(tm: TipModel, m: ModelState, u: int, i: int, candidates) -> np.ndarray:
    """Softmax of TIP scores over ``candidates`` (max-subtracted)."""
    c = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if not len(c):
        raise ValueError("empty candidate pool")
    return _pool_probabilities(tm, *m.final_embeddings(), u, i, c)


def _pool_probabilities(tm, P, Q, u, i, c):
    X = np.hstack([np.broadcast_to(P[u], (len(c), P.shape[1])), np.broadcast_to(Q[i], (len(c), Q.shape[1])), Q[c]])
    return _softmax(tip_forward(tm, X))


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max())
    return e / e.sum()


def candidate_pool(u: int, i: int, train: InteractionSet, taken: set, size: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``size`` distinct items drawn uniformly from the eligible negatives of ``(u, i)``.

    Eligible: not a training item of ``u`` and ``(u, i, j)`` not in ``taken``.
    Sparse users are served by rejection; dense ones by enumeration.
    """
    owned = train.user_items[u]
    n_free = train.n_items - len(owned) - sum(1 for j in taken if not train.contains(u, j))
    if n_free <= 0:
        return np.empty(0, dtype=np.int64)
    if n_free > 2 * size:
        owned_set = set(owned.tolist())
        chosen: list[int] = []
        seen: set[int] = set()
        while len(chosen) < size:
            j = int(rng.integers(train.n_items))
            if j in seen or j in owned_set or j in taken:
                continue
            seen.add(j)
            chosen.append(j)
        return np.array(chosen, dtype=np.int64)
    allowed = np.ones(train.n_items, dtype=bool)
    allowed[owned] = False
    if taken:
        allowed[np.fromiter(taken, dtype=np.int64)] = False
    elig = np.flatnonzero(allowed)
    return rng.permutation(elig)[:size] if len(elig) > size else rng.permutation(elig)


def _resample_pairs(pairs, negs, tm, m, train, cfg):
    out = []
    skipped = []
    P, Q = m.final_embeddings()
    for (u, i) in pairs:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(u), int(i)]))
        pool = candidate_pool(u, i, train, negs.get((u, i), set()), cfg.candidate_pool_size, rng)
        if not len(pool):
            skipped.append((u, i))
            continue
        p = _pool_probabilities(tm, P, Q, u, i, pool)
        n = min(cfg.new_triplets_per_positive, len(pool))
        for j in rng.choice(pool, size=n, replace=False, p=p):
            out.append((u, i, int(j)))
    return out, skipped


def resample(dt: TripletSet, tm: TipModel, m: ModelState, train: InteractionSet,
             cfg: ResampleConfig = ResampleConfig(), workers: int = 1) -> TripletSet:
    """``D^T`` followed by importance-sampled new triplets, tagged as resampled.

    One candidate pool per distinct ``(u, i)`` of ``dt``; the draw for each
    pair uses its own sub-seed, so the output does not depend on ``workers``.
    """
    if cfg.new_triplets_per_positive == 0:
        return dt
    t = dt.array
    negs: dict[tuple[int, int], set[int]] = {}
    for u, i, j in t.tolist():
        negs.setdefault((u, i), set()).add(j)
    pairs = list(negs)
    if workers > 1:
        chunks = [pairs[w::workers] for w in range(workers)]
        parts = Parallel(n_jobs=workers)(
            delayed(_resample_pairs)(ch, negs, tm, m, train, cfg) for ch in chunks if ch
        )
        pos = {p: k for k, p in enumerate(pairs)}
        new = sorted((x for part in parts for x in part[0]), key=lambda r: pos[(r[0], r[1])])
        skipped = [s for part in parts for s in part[1]]
    else:
        new, skipped = _resample_pairs(pairs, negs, tm, m, train, cfg)
    for u, i in sorted(skipped):
        warnings.warn(
            f"no eligible negative for user {train.user_ids[u]!r}, item {train.item_ids[i]!r}; pair skipped",
            ResampleWarning, stacklevel=2,
        )
    if not new:
        return dt
    return dt.concat(TripletSet(np.array(new, dtype=np.int64), np.ones(len(new), dtype=bool)))


class TIPRegressor(RegressorMixin, BaseEstimator):
    """Estimator facade: ``fit(triplets, shapley_values, model=...)``.

    ``predict`` returns values on the original Shapley scale; ``score_triplets``
    returns raw TIP outputs in (-1, 1).
    """

    def __init__(self, *, hidden_dim: int = 64, epochs: int = 200, learning_rate: float = 1e-3,
                 batch_size: int = 64, random_state: int = 0):
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self) -> ResampleConfig:
        return ResampleConfig(tip_epochs=self.epochs, tip_lr=self.learning_rate, tip_batch_size=self.batch_size,
                              hidden_dim=self.hidden_dim, seed=self.random_state)

    def fit(self, X, y, *, model: ModelState):
        t = check_triplets(X, model.n_users, model.n_items)
        y = np.asarray(y, dtype=float).reshape(-1)
        if len(y) != len(t):
            raise ValueError("one target per triplet required")
        self.scaler_ = TargetScaler.fit(y)
        self.tip_, self.train_mse_ = tip_train(tip_features(model, t), self.scaler_.transform(y), self._config())
        self.model_ = model
        return self

    def score_triplets(self, X) -> np.ndarray:
        check_is_fitted(self, "tip_")
        return tip_forward(self.tip_, tip_features(self.model_, check_triplets(X)))

    def predict(self, X) -> np.ndarray:
        return self.scaler_.inverse_transform(self.score_triplets(X))


def save_tip(tm: TipModel, path: str | Path, scaler: TargetScaler | None = None) -> None:
    """npz snapshot: header ``(h, d)`` (plus the target scaler) and flat parameters."""
    header = {"hidden_dim": tm.hidden_dim, "d": tm.input_dim}
    if scaler is not None:
        header["scaler"] = [scaler.center, scaler.scale, scaler.bound]
    flat = np.concatenate([p.reshape(-1) for p in tm.params()])
    with Path(path).open("wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), params=flat)


def load_tip(path: str | Path) -> tuple[TipModel, TargetScaler | None]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        flat = z["params"]
    h, d = header["hidden_dim"], header["d"]
    sizes = [h * 3 * d, h, h, 1]
    if flat.size != sum(sizes):
        raise ValueError("parameter count does not match header")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    tm = TipModel(parts[0].reshape(h, 3 * d), parts[1], parts[2], float(parts[3][0]))
    sc = header.get("scaler")
    return tm, (TargetScaler(*sc) if sc else None)
