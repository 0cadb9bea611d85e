"""Triplet Shapley values by truncated Monte Carlo over permutations.

Each sampled permutation is scanned with one single-triplet SGD step per
position, starting from the configured initialization; the accuracy change at
each step is that triplet's marginal contribution. Marginals are folded into
per-triplet running means. Exact enumeration oracles are provided for small
triplet sets.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from . import control_variates as cv
from .backbone import ModelState
from .triplets import TripletSet, sample_permutation
from .utility import RankingUtility

__all__ = [
    "McConfig",
    "ShapleyEstimate",
    "ShapleyResult",
    "scan_permutation",
    "estimate_tmc",
    "exact_shapley",
    "subset_shapley",
    "permutation_shapley",
    "TripletShapley",
    "MAX_EXACT",
]

log = logging.getLogger(__name__)

MAX_EXACT = 8

FRESH, FIXED = "fresh", "fixed"


@dataclass(frozen=True)
class McConfig:
    """Settings of the truncated Monte Carlo estimator.

    ``tolerance`` is relative to the full-data accuracy when
    ``relative_tolerance`` is set. With ``init="fresh"`` every permutation
    starts from its own random initialization; ``"fixed"`` reuses
    ``init_seed`` for all of them (the setting under which the exact
    enumeration oracles are defined). The covariate always starts from
    ``init_seed``.
    """

    tolerance: float = 0.01
    relative_tolerance: bool = True
    learning_rate: float = 0.25
    max_permutations: int = 200
    convergence_window: int = 20
    convergence_delta: float = 1e-4
    eval_k: int = 20
    seed: int = 0
    init: str = FIXED
    init_seed: int = 0
    control_variates: bool = True
    cv_warmup: int = 50
    cv_positions: int | None = 32
    keep_observations: bool = True
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        for name in ("learning_rate", "convergence_delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("max_permutations", "convergence_window", "eval_k", "cv_warmup", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cv_positions is not None and self.cv_positions <= 0:
            # 0 is the config-file spelling of "one block per position"
            object.__setattr__(self, "cv_positions", None)
        if self.init not in (FRESH, FIXED):
            raise ValueError(f"init must be {FRESH!r} or {FIXED!r}")

    def absolute_tolerance(self, full_acc: float) -> float:
        if math.isinf(self.tolerance) or not self.relative_tolerance:
            return self.tolerance
        return self.tolerance * abs(full_acc)


@dataclass
class ShapleyEstimate:
    value: float
    n_samples: int
    truncated_count: int
    observations: np.ndarray | None = None


def _init_for_draw(utility: RankingUtility, cfg: McConfig, k: int) -> ModelState:
    seed = [cfg.seed, k, 1] if cfg.init == FRESH else cfg.init_seed
    return utility.init_model(seed)


def _scan(t: np.ndarray, perm: np.ndarray, utility: RankingUtility, cfg: McConfig, full_acc: float,
          model: ModelState) -> tuple[np.ndarray, np.ndarray, int]:
    acc, steps = utility.scan(t[perm], model, cfg.learning_rate, full_acc, cfg.absolute_tolerance(full_acc))
    marg = np.empty(len(t))
    marg[perm] = np.diff(acc)
    truncated = np.zeros(len(t), dtype=bool)
    truncated[perm[steps:]] = True
    return marg, truncated, steps


def scan_permutation(dt, perm, cfg: McConfig, full_acc: float, utility: RankingUtility, *,
                     draw: int = 0, model: ModelState | None = None) -> np.ndarray:
    """Marginal accuracy contributions of one permutation scan, indexed by triplet.

    ``model`` overrides the initialization otherwise derived from
    ``(cfg, draw)``. Positions after truncation contribute exactly zero.
    """
    t = dt.array if isinstance(dt, TripletSet) else np.asarray(dt, dtype=np.int64).reshape(-1, 3)
    perm = np.asarray(perm)
    model = model if model is not None else _init_for_draw(utility, cfg, draw)
    return _scan(t, perm, utility, cfg, full_acc, model)[0]


def _scan_draws(t, utility, cfg, full_acc, draws):
    out = []
    for k in draws:
        perm = sample_permutation(len(t), cfg.seed, k)
        marg, truncated, steps = _scan(t, perm, utility, cfg, full_acc, _init_for_draw(utility, cfg, k))
        out.append((k, marg, truncated, steps))
    return out


@dataclass
class ShapleyResult:
    """Per-triplet estimates plus the diagnostics needed to audit them."""

    triplets: TripletSet
    values: np.ndarray
    n_permutations: int
    truncated_count: np.ndarray
    steps: int
    converged: bool
    full_acc: float
    observations: np.ndarray | None = None
    covariate_observations: np.ndarray | None = None
    vstar: np.ndarray | None = None
    c: np.ndarray | None = None
    rho: np.ndarray | None = None
    values_cv: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def final_values(self) -> np.ndarray:
        """Control-variate values when available, plain running means otherwise."""
        return self.values_cv if self.values_cv is not None else self.values

    @property
    def standard_errors(self) -> np.ndarray:
        if self.observations is None or self.n_permutations < 2:
            raise ValueError("standard errors need the retained observation log")
        return self.observations.std(axis=0, ddof=1) / np.sqrt(self.n_permutations)

    def estimate(self, idx: int) -> ShapleyEstimate:
        obs = None if self.observations is None else self.observations[:, idx]
        return ShapleyEstimate(float(self.values[idx]), self.n_permutations, int(self.truncated_count[idx]), obs)

    def to_csv(self, path: str | Path, train=None) -> None:
        cols = ["user", "pos_item", "neg_item", "shapley", "n_samples", "truncated_count"]
        if self.values_cv is not None:
            cols += ["shapley_cv", "c", "vstar", "rho_hat"]
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for x, (u, i, j) in enumerate(self.triplets.array.tolist()):
                if train is not None:
                    u, i, j = train.user_ids[u], train.item_ids[i], train.item_ids[j]
                row = [u, i, j, repr(float(self.values[x])), self.n_permutations, int(self.truncated_count[x])]
                if self.values_cv is not None:
                    row += [repr(float(v)) for v in (self.values_cv[x], self.c[x], self.vstar[x], self.rho[x])]
                w.writerow(row)


def read_values(path: str | Path, column: str | None = None) -> tuple[list[tuple[str, str, str]], np.ndarray]:
    """Read triplet keys and one value column (``shapley_cv`` if present, else ``shapley``)."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if column is None:
        column = "shapley_cv" if rows and "shapley_cv" in rows[0] else "shapley"
    keys = [(r["user"], r["pos_item"], r["neg_item"]) for r in rows]
    return keys, np.array([float(r[column]) for r in rows])


def _fingerprint(t: np.ndarray, cfg: McConfig, utility: RankingUtility, full_acc: float) -> str:
    h = hashlib.sha256(t.tobytes())
    h.update(json.dumps([asdict(cfg), utility.describe(), full_acc], sort_keys=True, default=str).encode())
    return h.hexdigest()


class _Checkpoint:
    def __init__(self, path: Path, fingerprint: str):
        self.path = Path(path)
        self.fingerprint = fingerprint

    def load(self):
        if not self.path.exists():
            return None
        with np.load(self.path, allow_pickle=False) as z:
            if str(z["fingerprint"]) != self.fingerprint:
                log.warning("checkpoint %s belongs to a different run, ignoring", self.path)
                return None
            return {key: z[key].copy() for key in z.files}

    def save(self, **state) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        with tmp.open("wb") as fh:
            np.savez(fh, fingerprint=np.array(self.fingerprint), **state)
        tmp.replace(self.path)


def estimate_tmc(
    dt,
    utility: RankingUtility,
    cfg: McConfig = McConfig(),
    full_acc: float | None = None,
    *,
    workers: int = 1,
    checkpoint: str | Path | None = None,
    covariate_table: np.ndarray | None = None,
) -> ShapleyResult:
    """Truncated Monte Carlo triplet Shapley with optional control variates.

    Permutation ``k`` is a pure function of ``(cfg.seed, k)`` and scans are
    folded in ascending ``k``, so results do not depend on ``workers``.
    Stops at ``cfg.max_permutations`` or when the mean absolute change of the
    value vector over the last ``cfg.convergence_window`` permutations drops
    below ``cfg.convergence_delta``.

    ``full_acc`` (accuracy of a model trained on all of ``dt``) is only
    needed when the tolerance is positive and finite.
    """
    t = dt.array if isinstance(dt, TripletSet) else np.asarray(dt, dtype=np.int64).reshape(-1, 3)
    dt = dt if isinstance(dt, TripletSet) else TripletSet(t)
    n = len(t)
    if not n:
        raise ValueError("empty triplet set")
    if full_acc is None:
        if 0 < cfg.tolerance < math.inf:
            raise ValueError("full_acc is required for a positive finite tolerance")
        full_acc = 0.0
    keep = cfg.keep_observations or cfg.control_variates
    W = cfg.convergence_window

    values = np.zeros(n)
    truncated_count = np.zeros(n, dtype=np.int64)
    obs: list[np.ndarray] = []
    history: list[np.ndarray] = [values.copy()]
    steps_total = 0
    k = 0
    ckpt = None
    if checkpoint is not None:
        ckpt = _Checkpoint(Path(checkpoint), _fingerprint(t, cfg, utility, full_acc))
        state = ckpt.load()
        if state is not None:
            k = int(state["k"])
            values = state["values"]
            truncated_count = state["truncated_count"]
            steps_total = int(state["steps"])
            history = list(state["history"])
            obs = list(state["obs"]) if keep else []
            log.info("resuming from %s at permutation %d", checkpoint, k)

    converged = False
    block = max(1, workers)
    parallel = Parallel(n_jobs=workers) if workers > 1 else None
    while k < cfg.max_permutations and not converged:
        draws = list(range(k + 1, min(k + block, cfg.max_permutations) + 1))
        if parallel is None:
            results = _scan_draws(t, utility, cfg, full_acc, draws)
        else:
            chunks = [draws[w::workers] for w in range(workers) if draws[w::workers]]
            results = sorted(
                itertools.chain.from_iterable(
                    parallel(delayed(_scan_draws)(t, utility, cfg, full_acc, ch) for ch in chunks)
                ),
                key=lambda r: r[0],
            )
        for kk, marg, truncated, steps in results:
            k = kk
            values = ((k - 1) / k) * values + (1.0 / k) * marg
            truncated_count += truncated
            steps_total += steps
            if keep:
                obs.append(marg)
            history.append(values.copy())
            history = history[-(W + 1):]
            if k > W and np.mean(np.abs(values - history[0])) < cfg.convergence_delta:
                converged = True
            if ckpt is not None and k % cfg.checkpoint_every == 0:
                ckpt.save(
                    k=k, values=values, truncated_count=truncated_count, steps=steps_total,
                    history=np.array(history), obs=np.array(obs).reshape(-1, n),
                )
            if converged:
                break

    result = ShapleyResult(
        triplets=dt,
        values=values,
        n_permutations=k,
        truncated_count=truncated_count,
        steps=steps_total,
        converged=converged,
        full_acc=float(full_acc),
        observations=np.array(obs).reshape(-1, n) if keep else None,
        config=asdict(cfg),
    )
    if cfg.control_variates:
        _attach_cv(result, t, utility, cfg, workers, covariate_table)
    return result


def _attach_cv(result: ShapleyResult, t, utility, cfg: McConfig, workers: int, table=None) -> None:
    n = len(t)
    grid = cv.position_grid(n, cfg.cv_positions)
    if table is None:
        table = covariate_table(t, utility, cfg, workers)
    perms = [sample_permutation(n, cfg.seed, k) for k in range(1, result.n_permutations + 1)]
    cov_obs = np.array([cv.covariate_observations(table, grid, p) for p in perms]).reshape(-1, n)
    stats = cv.CvStats(result.observations, cov_obs, table @ grid.weights, cfg.cv_warmup)
    result.covariate_observations = cov_obs
    result.vstar = stats.vstar
    result.c = stats.c
    result.rho = stats.rho
    result.values_cv = cv.cv_estimate(result.values, cov_obs.mean(axis=0), stats.vstar, stats.c)


def covariate_table(t, utility: RankingUtility, cfg: McConfig, workers: int = 1) -> np.ndarray:
    """Covariate marginals on the configured position grid (from ``cfg.init_seed``)."""
    t = t.array if isinstance(t, TripletSet) else t
    grid = cv.position_grid(len(t), cfg.cv_positions)
    theta0 = utility.init_model(cfg.init_seed)
    if workers <= 1 or len(grid.positions) < 2:
        return utility.omega_table(t, theta0, cfg.learning_rate, grid.positions)
    parts = np.array_split(np.arange(len(grid.positions)), min(workers, len(grid.positions)))
    cols = Parallel(n_jobs=workers)(
        delayed(utility.omega_table)(t, theta0, cfg.learning_rate, grid.positions[p]) for p in parts
    )
    return np.concatenate(cols, axis=1)


def exact_shapley(dt, utility: RankingUtility, cfg: McConfig = McConfig()) -> np.ndarray:
    """Average scan marginals over all ``n!`` permutations from the fixed ``cfg.init_seed``.

    No truncation is applied. Refused above ``MAX_EXACT`` triplets.
    """
    t = dt.array if isinstance(dt, TripletSet) else np.asarray(dt, dtype=np.int64).reshape(-1, 3)
    n = len(t)
    if n > MAX_EXACT:
        raise ValueError(f"exact enumeration refused: {n}! permutations (factorial guard, max {MAX_EXACT} triplets)")
    theta0 = utility.init_model(cfg.init_seed)
    total = np.zeros(n)
    count = 0
    for perm in itertools.permutations(range(n)):
        acc, _ = utility.scan(t[list(perm)], theta0, cfg.learning_rate)
        marg = np.empty(n)
        marg[list(perm)] = np.diff(acc)
        total += marg
        count += 1
    return total / count


def subset_shapley(n: int, value: Callable[[tuple[int, ...]], float], scale: float | None = None) -> np.ndarray:
    """Subset-sum Shapley: ``scale * sum_S [A(S+t) - A(S)] / C(n-1, |S|)``; ``scale`` defaults to ``1/n``.

    ``value`` receives sorted index tuples and is called once per subset.
    """
    cache: dict[tuple[int, ...], float] = {}

    def A(s):
        s = tuple(sorted(s))
        if s not in cache:
            cache[s] = float(value(s))
        return cache[s]

    scale = 1.0 / n if scale is None else scale
    out = np.zeros(n)
    for x in range(n):
        others = [y for y in range(n) if y != x]
        for r in range(n):
            w = 1.0 / math.comb(n - 1, r)
            for s in itertools.combinations(others, r):
                out[x] += w * (A(s + (x,)) - A(s))
    return scale * out


def permutation_shapley(n: int, value: Callable[[tuple[int, ...]], float]) -> np.ndarray:
    """Joining-order Shapley of a set function: mean over all orders of ``A(P+t) - A(P)``."""
    cache: dict[tuple[int, ...], float] = {}

    def A(s):
        s = tuple(sorted(s))
        if s not in cache:
            cache[s] = float(value(s))
        return cache[s]

    out = np.zeros(n)
    count = 0
    for perm in itertools.permutations(range(n)):
        for pos, x in enumerate(perm):
            out[x] += A(perm[: pos + 1]) - A(perm[:pos])
        count += 1
    return out / count


class TripletShapley(BaseEstimator):
    """Estimator facade over :func:`estimate_tmc`.

    ``fit(X)`` takes an ``(n, 3)`` triplet array (or :class:`TripletSet`) and
    sets ``result_`` and ``values_`` (control-variate values when enabled).
    """

    def __init__(
        self,
        utility: RankingUtility | None = None,
        *,
        tolerance: float = 0.01,
        relative_tolerance: bool = True,
        learning_rate: float = 0.25,
        max_permutations: int = 200,
        convergence_window: int = 20,
        convergence_delta: float = 1e-4,
        control_variates: bool = True,
        cv_warmup: int = 50,
        cv_positions: int | None = 32,
        init: str = FIXED,
        init_seed: int = 0,
        random_state: int = 0,
        n_jobs: int = 1,
    ):
        self.utility = utility
        self.tolerance = tolerance
        self.relative_tolerance = relative_tolerance
        self.learning_rate = learning_rate
        self.max_permutations = max_permutations
        self.convergence_window = convergence_window
        self.convergence_delta = convergence_delta
        self.control_variates = control_variates
        self.cv_warmup = cv_warmup
        self.cv_positions = cv_positions
        self.init = init
        self.init_seed = init_seed
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self) -> McConfig:
        return McConfig(
            tolerance=self.tolerance,
            relative_tolerance=self.relative_tolerance,
            learning_rate=self.learning_rate,
            max_permutations=self.max_permutations,
            convergence_window=self.convergence_window,
            convergence_delta=self.convergence_delta,
            eval_k=self.utility.k,
            seed=self.random_state,
            init=self.init,
            init_seed=self.init_seed,
            control_variates=self.control_variates,
            cv_warmup=self.cv_warmup,
            cv_positions=self.cv_positions,
        )

    def fit(self, X, y=None, full_acc: float | None = None):
        if self.utility is None:
            raise ValueError("TripletShapley needs a RankingUtility")
        dt = X if isinstance(X, TripletSet) else TripletSet(X)
        self.result_ = estimate_tmc(dt, self.utility, self._config(), full_acc, workers=self.n_jobs)
        self.values_ = self.result_.final_values
        return self
