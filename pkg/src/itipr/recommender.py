"""Multi-epoch (weighted) BPR training with early stopping on validation accuracy."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _kernels as K
from ._validation import check_positive, check_triplets, check_weights
from .backbone import MF, LossConfig, ModelState, score_matrix, sgd_step
from .dataset import SplitInteractions
from .metrics import EvalReport, evaluate
from .utility import RankingUtility

__all__ = ["BPRRecommender", "train_bpr"]

log = logging.getLogger(__name__)


class BPRRecommender(BaseEstimator):
    """Pairwise ranking model trained on a fixed triplet set.

    Each epoch visits the triplets in a fresh shuffled order. MF uses
    single-triplet steps; other backbones (or ``batch_size > 1``) take one
    step per mini-batch on the summed loss. Training stops after
    ``patience`` epochs without a strict improvement of validation accuracy
    and the best epoch's parameters are kept.

    Parameters
    ----------
    dim, backbone, n_layers : model shape.
    learning_rate, l2 : SGD settings.
    batch_size : int or None
        ``None`` picks 1 for MF and 256 otherwise.
    max_epochs, patience : early-stopping budget.
    k, metric : validation accuracy used for early stopping.
    random_state : seeds initialization (``init_seed`` overrides it) and shuffling.
    """

    def __init__(
        self,
        *,
        dim: int = 16,
        backbone: str = MF,
        n_layers: int = 2,
        learning_rate: float = 0.05,
        l2: float = 1e-4,
        batch_size: int | None = None,
        max_epochs: int = 1000,
        patience: int = 10,
        k: int = 20,
        metric: str = "ndcg",
        random_state: int = 0,
        init_seed: int | None = None,
    ):
        self.dim = dim
        self.backbone = backbone
        self.n_layers = n_layers
        self.learning_rate = learning_rate
        self.l2 = l2
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.k = k
        self.metric = metric
        self.random_state = random_state
        self.init_seed = init_seed

    def _utility(self, split: SplitInteractions) -> RankingUtility:
        return RankingUtility(
            split, dim=self.dim, backbone=self.backbone, n_layers=self.n_layers, l2=self.l2,
            k=self.k, metric=self.metric,
        )

    def fit(self, X, y=None, sample_weight=None, *, split: SplitInteractions, utility: RankingUtility | None = None):
        """Train on triplets ``X`` with optional per-triplet ``sample_weight``."""
        check_positive("learning_rate", self.learning_rate)
        check_positive("l2", self.l2, strict=False)
        check_positive("max_epochs", self.max_epochs)
        check_positive("patience", self.patience)
        t = check_triplets(X, split.n_users, split.n_items)
        w = check_weights(sample_weight, len(t))
        ut = utility if utility is not None else self._utility(split)
        seed = self.random_state if self.init_seed is None else self.init_seed
        m = ut.init_model(seed)
        batch = self.batch_size or (1 if self.backbone == MF else 256)
        cfg = LossConfig(self.learning_rate, self.l2)

        best, best_epoch = ut(m), 0
        best_state = m.copy()
        history = [best]
        for epoch in range(1, self.max_epochs + 1):
            order = np.random.default_rng([self.random_state, epoch]).permutation(len(t))
            m = self._epoch(m, t, w, order, batch, cfg)
            acc = ut(m)
            history.append(acc)
            if acc > best:
                best, best_epoch, best_state = acc, epoch, m.copy()
            elif epoch - best_epoch >= self.patience:
                break
        log.debug("stopped after %d epochs, best %d (%.5f)", epoch, best_epoch, best)
        self.model_ = best_state
        self.best_epoch_ = best_epoch
        self.n_epochs_ = epoch
        self.best_score_ = best
        self.history_ = np.array(history)
        self.split_ = split
        return self

    @staticmethod
    def _epoch(m: ModelState, t, w, order, batch: int, cfg: LossConfig) -> ModelState:
        if m.backbone == MF and batch == 1:
            P = m.user_embeddings.copy()
            Q = m.item_embeddings.copy()
            rc = K.sgd_epoch_mf(P, Q, t[:, 0].copy(), t[:, 1].copy(), t[:, 2].copy(), w,
                                order.astype(np.int64), cfg.learning_rate, cfg.l2_reg)
            if rc < 0:
                raise FloatingPointError(f"non-finite update on triplet {-rc - 1} {tuple(t[-rc - 1])}")
            out = m.copy()
            out.user_embeddings, out.item_embeddings = P, Q
            return out
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            m = sgd_step(m, t[idx], w[idx], cfg)
        return m

    def predict(self, users=None) -> np.ndarray:
        """Score matrix (rows restricted to ``users`` when given)."""
        check_is_fitted(self, "model_")
        s = score_matrix(self.model_)
        return s if users is None else s[np.asarray(users)]

    def recommend(self, users, n: int = 20) -> np.ndarray:
        """Top-``n`` unseen items per user; ties go to the lower item index."""
        check_is_fitted(self, "model_")
        users = np.atleast_1d(users)
        s = self.predict(users)
        s = np.where(self.split_.train.dense()[users], -np.inf, s)
        return np.argsort(-s, axis=1, kind="stable")[:, :n]

    def evaluate(self, role: str = "test", k: int | None = None) -> EvalReport:
        check_is_fitted(self, "model_")
        return evaluate(self.model_, self.split_, role, k or self.k)


def train_bpr(triplets, split: SplitInteractions, weights=None, **params) -> BPRRecommender:
    """Convenience wrapper: ``BPRRecommender(**params).fit(...)``."""
    return BPRRecommender(**params).fit(triplets, sample_weight=weights, split=split)
