"""Control-variate stabilization of permutation-sampled triplet Shapley values.

The covariate is the Shapley value under a modified training procedure in
which the prefix of a permutation is replaced by one rescaled batch step from
a fixed initialization. Its per-triplet marginal depends only on the triplet's
position, so its exact expectation needs one evaluation per position instead
of one per permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import LossConfig, ModelState, bpr_gradient, sgd_step
from .triplets import TripletSet, rotation_permutations
from .utility import RankingUtility

__all__ = [
    "CvStats",
    "omega_star_scan",
    "exact_vstar",
    "PositionGrid",
    "position_grid",
    "omega_table",
    "covariate_observations",
    "estimate_c",
    "cv_estimate",
]


def _array(dt) -> np.ndarray:
    return dt.array if isinstance(dt, TripletSet) else np.asarray(dt, dtype=np.int64).reshape(-1, 3)


def omega_star_scan(dt, perm, utility: RankingUtility, lr: float, theta0: ModelState) -> np.ndarray:
    """Covariate marginals of every triplet for one permutation, indexed by triplet.

    For the triplet at 1-based position ``s``: start from ``theta0``, take
    one step of size ``lr * (s - 1) / (n - 1)`` along the summed gradient of
    all *other* triplets, evaluate; take one single-triplet step of size
    ``lr``, evaluate again. The marginal is the difference.
    """
    t = _array(dt)
    n = len(t)
    perm = np.asarray(perm)
    cfg = LossConfig(lr, utility.l2)
    gP, gQ = bpr_gradient(theta0, t, None, utility.l2)
    out = np.empty(n)
    for pos, x in enumerate(perm):
        scale = pos / (n - 1) if n > 1 else 0.0
        gu, gi = bpr_gradient(theta0, t[x:x + 1], None, utility.l2)
        prefix = theta0.copy()
        prefix.user_embeddings -= lr * scale * (gP - gu)
        prefix.item_embeddings -= lr * scale * (gQ - gi)
        joined = sgd_step(prefix, t[x:x + 1], None, cfg)
        out[x] = utility(joined) - utility(prefix)
    return out


def exact_vstar(dt, utility: RankingUtility, lr: float, theta0: ModelState) -> np.ndarray:
    """Exact covariate Shapley values from the ``n`` cyclic rotations."""
    t = _array(dt)
    rots = rotation_permutations(len(t))
    return np.mean([omega_star_scan(t, p, utility, lr, theta0) for p in rots], axis=0)


@dataclass(frozen=True)
class PositionGrid:
    """Partition of positions ``1..n`` into contiguous blocks.

    ``positions[g]`` is the representative 1-based position of block ``g``,
    ``block_of[p]`` the block of 0-based position ``p`` and ``weights[g]`` the
    block's share of positions.
    """

    positions: np.ndarray
    block_of: np.ndarray
    weights: np.ndarray

    @property
    def exact(self) -> bool:
        return len(self.positions) == len(self.block_of)


def position_grid(n: int, n_blocks: int | None = None) -> PositionGrid:
    """Blocks of equal size (up to one); ``None`` or ``n_blocks >= n`` gives one block per position."""
    g = n if n_blocks is None else max(1, min(n_blocks, n))
    blocks = np.array_split(np.arange(n), g)
    positions = np.array([b[len(b) // 2] + 1 for b in blocks], dtype=np.int64)
    block_of = np.concatenate([np.full(len(b), k) for k, b in enumerate(blocks)])
    weights = np.array([len(b) for b in blocks], dtype=float) / n
    return PositionGrid(positions, block_of, weights)


def omega_table(dt, utility: RankingUtility, lr: float, theta0: ModelState, grid: PositionGrid) -> np.ndarray:
    """Covariate marginal of each triplet at each grid position, shape ``(n, G)``."""
    return utility.omega_table(_array(dt), theta0, lr, grid.positions)


def covariate_observations(table: np.ndarray, grid: PositionGrid, perm) -> np.ndarray:
    """Per-triplet covariate observation for one permutation (table lookup by block)."""
    perm = np.asarray(perm)
    out = np.empty(len(perm))
    out[perm] = table[perm, grid.block_of]
    return out


def estimate_c(main, cov) -> np.ndarray:
    """Per-column ``Cov(main, cov) / Var(cov)`` from paired samples along axis 0.

    Columns whose covariate has zero sample variance get ``c = 0``.
    """
    main = np.asarray(main, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if main.shape != cov.shape:
        raise ValueError("paired observations must have equal shapes")
    if main.shape[0] < 2:
        raise ValueError("need at least two paired observations")
    dm = main - main.mean(axis=0)
    dc = cov - cov.mean(axis=0)
    n = main.shape[0]
    covariance = (dm * dc).sum(axis=0) / (n - 1)
    variance = (dc * dc).sum(axis=0) / (n - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(variance > 0, covariance / np.where(variance > 0, variance, 1.0), 0.0)
    return c


def _pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    den = np.sqrt((da * da).sum(axis=0) * (db * db).sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, (da * db).sum(axis=0) / np.where(den > 0, den, 1.0), 0.0)


def cv_estimate(hat, hat_star, vstar, c):
    """``hat - c * (hat_star - vstar)``."""
    return np.asarray(hat) - np.asarray(c) * (np.asarray(hat_star) - np.asarray(vstar))


@dataclass
class CvStats:
    """Paired per-permutation observations (rows) for every triplet (columns)."""

    main: np.ndarray
    covariate: np.ndarray
    vstar: np.ndarray
    warmup: int = 50

    def __post_init__(self):
        if self.main.shape != self.covariate.shape:
            raise ValueError("paired observation logs must have equal shapes")

    @property
    def c(self) -> np.ndarray:
        """Coefficient frozen from the first ``warmup`` permutations (0 if fewer than 2)."""
        w = min(self.warmup, self.main.shape[0])
        if w < 2:
            return np.zeros(self.main.shape[1])
        return estimate_c(self.main[:w], self.covariate[:w])

    @property
    def rho(self) -> np.ndarray:
        if self.main.shape[0] < 2:
            return np.zeros(self.main.shape[1])
        return _pearson(self.main, self.covariate)

    def estimate(self) -> np.ndarray:
        return cv_estimate(self.main.mean(axis=0), self.covariate.mean(axis=0), self.vstar, self.c)
