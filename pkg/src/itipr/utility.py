"""The performance functional: validation accuracy of a model trained on triplets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .backbone import LIGHTGCN, MF, LossConfig, ModelState, bpr_gradient, build_graph, init_model, sgd_step
from .dataset import SplitInteractions

__all__ = ["RankingUtility"]


@dataclass
class _EvalState:
    S: np.ndarray
    bs: np.ndarray
    bi: np.ndarray
    cnt: np.ndarray
    val: np.ndarray

    @property
    def value(self) -> float:
        return float(self.val.mean())


class RankingUtility:
    """Validation Top-K accuracy ``A(.)`` over one split and backbone.

    Parameters
    ----------
    split : SplitInteractions
        Training interactions define exclusions (and the LightGCN graph);
        the ``role`` part holds the held-out targets.
    dim, backbone, n_layers :
        Shape of the models being valued.
    l2 : float
        L2 coefficient used by every SGD step.
    k : int
        Cutoff of the ranking metric.
    metric : {"ndcg", "recall"}
    users : array-like, optional
        Evaluate on this subset of users only (default: every user with targets).
    slack : int
        Extra ranks buffered per user by the incremental evaluator; affects
        speed only.
    """

    def __init__(
        self,
        split: SplitInteractions,
        *,
        dim: int = 16,
        backbone: str = MF,
        n_layers: int = 2,
        l2: float = 1e-4,
        k: int = 20,
        metric: str = "ndcg",
        role: str = "validation",
        users=None,
        slack: int = 0,
    ):
        if metric not in ("ndcg", "recall"):
            raise ValueError(f"unknown metric {metric!r}")
        self.split = split
        self.dim = dim
        self.backbone = backbone
        self.n_layers = n_layers if backbone == LIGHTGCN else 0
        self.l2 = l2
        self.k = k
        self.metric = metric
        self.role = role
        self.slack = slack
        self.graph = build_graph(split.train) if backbone == LIGHTGCN else None

        targets = split.role(role).dense()
        has = targets.any(axis=1)
        if users is not None:
            keep = np.zeros(split.n_users, dtype=bool)
            keep[np.asarray(users, dtype=np.int64)] = True
            has &= keep
        self.eval_users = np.flatnonzero(has).astype(np.int64)
        if not len(self.eval_users):
            raise ValueError(f"no user has {role} interactions to evaluate")
        self.eval_rows = np.full(split.n_users, -1, dtype=np.int64)
        self.eval_rows[self.eval_users] = np.arange(len(self.eval_users))
        self.mask = np.ascontiguousarray(split.train.dense()[self.eval_users])
        self.target = np.ascontiguousarray(targets[self.eval_users])
        n_t = self.target.sum(axis=1)
        if metric == "ndcg":
            self.gain = 1.0 / np.log2(np.arange(2, k + 2))
            self.norm = np.cumsum(self.gain)[np.minimum(k, n_t) - 1]
        else:
            self.gain = np.ones(k)
            self.norm = np.minimum(k, n_t).astype(float)

    # sklearn-style repr for run reports
    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "backbone": self.backbone,
            "n_layers": self.n_layers,
            "l2": self.l2,
            "k": self.k,
            "metric": self.metric,
            "role": self.role,
            "n_eval_users": int(len(self.eval_users)),
        }

    def init_model(self, seed) -> ModelState:
        return init_model(
            self.split.n_users, self.split.n_items, self.dim, self.backbone, seed,
            n_layers=self.n_layers, graph=self.graph,
        )

    def _new_state(self) -> _EvalState:
        E, V = self.mask.shape
        cap = self.k + self.slack
        return _EvalState(
            np.empty((E, V)), np.empty((E, cap)), np.empty((E, cap), dtype=np.int64),
            np.empty(E, dtype=np.int64), np.empty(E),
        )

    def _fill(self, P: np.ndarray, Q: np.ndarray, st: _EvalState) -> float:
        return K.full_eval(
            np.ascontiguousarray(P), np.ascontiguousarray(Q), self.eval_users, self.mask, self.target,
            self.norm, self.gain, self.k, st.S, st.bs, st.bi, st.cnt, st.val,
        )

    def __call__(self, m: ModelState) -> float:
        """Accuracy of model ``m``."""
        value = self._fill(*m.final_embeddings(), self._new_state())
        if not np.isfinite(value):
            raise FloatingPointError("non-finite accuracy")
        return float(value)

    def scan(self, triplets: np.ndarray, model: ModelState, lr: float, full_acc: float = 0.0,
             tol: float = 0.0) -> tuple[np.ndarray, int]:
        """Accuracy trajectory of single-triplet SGD in the given triplet order.

        Returns ``(acc, steps)`` with ``acc[s]`` the accuracy after ``s``
        steps; ``model`` is not modified. Scanning stops taking steps once the
        accuracy is within ``tol`` of ``full_acc``.
        """
        t = np.ascontiguousarray(triplets, dtype=np.int64).reshape(-1, 3)
        acc = np.empty(len(t) + 1)
        if self.backbone == MF:
            P = model.user_embeddings.copy()
            Q = model.item_embeddings.copy()
            st = self._new_state()
            self._fill(P, Q, st)
            steps = K.scan_mf(
                P, Q, t[:, 0].copy(), t[:, 1].copy(), t[:, 2].copy(), lr, self.l2, full_acc, tol,
                self.eval_rows, self.eval_users, self.mask, self.target, self.norm, self.gain, self.k,
                st.S, st.bs, st.bi, st.cnt, st.val, acc,
            )
            if steps < 0:
                raise FloatingPointError(f"non-finite parameters after step on triplet {tuple(t[-steps - 1])}")
        else:
            steps = self._scan_generic(t, model, lr, full_acc, tol, acc)
        if not np.isfinite(acc).all():
            raise FloatingPointError("non-finite accuracy")
        return acc, steps

    def _scan_generic(self, t, model, lr, full_acc, tol, acc) -> int:
        cfg = LossConfig(lr, self.l2)
        m = model
        a = acc[0] = self(m)
        steps = 0
        for s in range(len(t)):
            if abs(full_acc - a) < tol:
                acc[s + 1:] = a
                break
            m = sgd_step(m, t[s:s + 1], None, cfg)
            a = acc[s + 1] = self(m)
            steps += 1
        return steps

    def train_value(self, triplets: np.ndarray, init_seed, lr: float) -> float:
        """``A(S)``: accuracy after one single-triplet pass over ``triplets`` in order."""
        acc, _ = self.scan(triplets, self.init_model(init_seed), lr)
        return float(acc[-1])

    def omega_table(self, triplets: np.ndarray, model: ModelState, lr: float, positions: np.ndarray) -> np.ndarray:
        """Covariate marginals for every triplet at each 1-based position in ``positions``.

        Entry ``[t, g]`` is the accuracy gain of one single-triplet step on
        ``t`` taken from ``theta0 - lr * (s - 1)/(n - 1) * grad(complement of t)``
        with ``s = positions[g]``.
        """
        t = np.ascontiguousarray(triplets, dtype=np.int64).reshape(-1, 3)
        n = len(t)
        positions = np.asarray(positions, dtype=np.int64)
        betas = lr * (positions - 1) / (n - 1) if n > 1 else np.zeros(len(positions))
        out = np.empty((n, len(positions)))
        if self.backbone == MF:
            gP, gQ = bpr_gradient(model, t, None, self.l2)
            K.omega_table_mf(
                model.user_embeddings, model.item_embeddings, gP, gQ,
                t[:, 0].copy(), t[:, 1].copy(), t[:, 2].copy(), lr, self.l2, np.asarray(betas, float),
                self.k + self.slack, self.eval_rows, self.eval_users, self.mask, self.target, self.norm, self.gain, self.k, out,
            )
            return out
        cfg = LossConfig(lr, self.l2)
        gP, gQ = bpr_gradient(model, t, None, self.l2)
        for x in range(n):
            gu, gi = bpr_gradient(model, t[x:x + 1], None, self.l2)
            for g, beta in enumerate(betas):
                prefix = model.copy()
                prefix.user_embeddings -= beta * (gP - gu)
                prefix.item_embeddings -= beta * (gQ - gi)
                joined = sgd_step(prefix, t[x:x + 1], None, cfg)
                out[x, g] = self(joined) - self(prefix)
        return out
