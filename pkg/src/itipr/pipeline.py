"""End-to-end run: value triplets, resample with TIP, revalue, reweight and retrain.

Stages (all seeded from one master seed):

1. load or synthesize interactions and split them
2. sample the initial triplet set and train the plain BPR baseline on it
3. Shapley values of the initial set (with control variates)
4. fit TIP on those values, resample new negatives into the augmented set
5. Shapley values of the augmented set
6. min-max normalize into weights, train the weighted model from scratch
7. evaluate both arms on the test split
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as tomli
else:
    import tomli

from .backbone import MF, save_model
from .dataset import (
    SplitInteractions,
    binarize,
    filter_by_activity,
    load_records,
    make_planted,
    save_split,
    split,
)
from .recommender import BPRRecommender
from .shapley import McConfig, ShapleyResult, estimate_tmc
from .tip import ResampleConfig, TargetScaler, resample, save_tip, tip_features, tip_train
from .triplets import TripletSet, sample_triplets
from .utility import RankingUtility

__all__ = [
    "DataConfig",
    "ModelConfig",
    "SeedConfig",
    "PipelineConfig",
    "RunReport",
    "StageError",
    "normalize_weights",
    "load_dataset",
    "run_itipr",
    "weights_digest",
]

log = logging.getLogger(__name__)

ENV_DATA = "ITIPR_DATA"
ENV_RUN_ROOT = "ITIPR_RUN_ROOT"


@dataclass(frozen=True)
class DataConfig:
    """Input file (``path``) or, when absent, the planted-preference generator."""

    path: str | None = None
    has_ratings: bool = True
    rating_threshold: float = 3.0
    min_user_degree: int = 0
    min_item_degree: int = 0
    ratios: tuple[int, int, int] = (8, 1, 1)
    synthetic_users: int = 500
    synthetic_items: int = 200
    synthetic_per_user: int = 15

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(int(r) for r in self.ratios))
        if len(self.ratios) != 3 or min(self.ratios) <= 0:
            raise ValueError("ratios must be three positive integers")


@dataclass(frozen=True)
class ModelConfig:
    """Backbone shape and the final (multi-epoch) training schedule."""

    backbone: str = MF
    dim: int = 16
    n_layers: int = 2
    l2: float = 1e-4
    learning_rate: float = 0.05
    batch_size: int | None = None
    max_epochs: int = 1000
    patience: int = 10
    negatives_per_positive: int = 1

    def recommender(self, k: int, seed: int) -> BPRRecommender:
        return BPRRecommender(
            dim=self.dim, backbone=self.backbone, n_layers=self.n_layers, learning_rate=self.learning_rate,
            l2=self.l2, batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            k=k, random_state=seed,
        )


_STAGES = ("split", "triplets", "init", "shapley", "tip", "resample")


@dataclass(frozen=True)
class SeedConfig:
    """Optional per-stage seeds; unset ones are derived from the master seed."""

    split: int | None = None
    triplets: int | None = None
    init: int | None = None
    shapley: int | None = None
    tip: int | None = None
    resample: int | None = None

    def resolve(self, master: int) -> dict[str, int]:
        out = {}
        for n, name in enumerate(_STAGES):
            v = getattr(self, name)
            out[name] = int(v) if v is not None else int(np.random.SeedSequence([master, n]).generate_state(1)[0])
        return out


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    shapley: McConfig = McConfig()
    resample: ResampleConfig = ResampleConfig()
    seeds: SeedConfig = SeedConfig()
    weight_floor: float = 0.05
    k: int = 20
    seed: int = 0
    run_root: str = "runs"

    def __post_init__(self):
        if not 0 < self.weight_floor < 1:
            raise ValueError("weight_floor must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PipelineConfig":
        d = dict(d)
        nested = {"data": DataConfig, "model": ModelConfig, "shapley": McConfig, "resample": ResampleConfig,
                  "seeds": SeedConfig}
        kw = {}
        for name, typ in nested.items():
            if name in d:
                kw[name] = _build(typ, d.pop(name), name)
        kw.update(_check_keys(cls, d, "top level"))
        cfg = cls(**kw)
        return cfg.with_env()

    @classmethod
    def from_toml(cls, path: str | Path) -> "PipelineConfig":
        with Path(path).open("rb") as fh:
            return cls.from_dict(tomli.load(fh))

    def with_env(self) -> "PipelineConfig":
        """Apply the path-only environment overrides."""
        cfg = self
        if os.environ.get(ENV_DATA):
            cfg = replace(cfg, data=replace(cfg.data, path=os.environ[ENV_DATA]))
        if os.environ.get(ENV_RUN_ROOT):
            cfg = replace(cfg, run_root=os.environ[ENV_RUN_ROOT])
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _check_keys(typ, d: dict, where: str) -> dict:
    known = {f.name for f in fields(typ)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return d


def _build(typ, d: dict, where: str):
    if not isinstance(d, dict):
        raise ValueError(f"[{where}] must be a table")
    return typ(**_check_keys(typ, d, where))


class StageError(RuntimeError):
    """A pipeline stage failed; ``report`` holds the stages completed so far."""

    def __init__(self, stage: str, report: "RunReport"):
        super().__init__(f"stage {stage!r} failed")
        self.stage = stage
        self.report = report


def normalize_weights(values, eps: float = 0.05) -> np.ndarray:
    """Min-max map onto ``[eps, 1]``; all ones when every value is equal."""
    v = np.asarray(values, dtype=float)
    if not len(v):
        raise ValueError("no values to normalize")
    if not np.isfinite(v).all():
        raise ValueError("non-finite value")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.ones_like(v)
    return eps + (1.0 - eps) * (v - lo) / (hi - lo)


def weights_digest(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype="<f8").tobytes()).hexdigest()


def load_dataset(cfg: DataConfig, seed: int) -> SplitInteractions:
    if cfg.path:
        s = binarize(load_records(cfg.path, cfg.has_ratings), cfg.rating_threshold)
        s = filter_by_activity(s, cfg.min_user_degree, cfg.min_item_degree)
    else:
        s = make_planted(cfg.synthetic_users, cfg.synthetic_items, cfg.synthetic_per_user, seed=seed)
    return split(s, cfg.ratios, seed)


@dataclass
class RunReport:
    """Everything a run produced except the artifacts themselves.

    ``runtime`` (timings, run directory, worker count) is the only part that
    may differ between repeated runs with the same config and seed.
    """

    seed: int
    config: dict
    seeds: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    triplet_counts: dict = field(default_factory=dict)
    full_accuracy: dict = field(default_factory=dict)
    shapley: dict = field(default_factory=dict)
    tip: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    baseline: dict | None = None
    itipr: dict | None = None
    completed: list = field(default_factory=list)
    error: str | None = None
    runtime: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        if not timings:
            d.pop("runtime")
        return d

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), sort_keys=True, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _shapley_summary(r: ShapleyResult) -> dict:
    v = r.final_values
    out = {
        "n_triplets": int(len(v)),
        "n_permutations": int(r.n_permutations),
        "converged": bool(r.converged),
        "gradient_steps": int(r.steps),
        "truncated_fraction": float(r.truncated_count.sum() / max(1, r.n_permutations * len(v))),
        "mean": float(v.mean()),
        "std": float(v.std()),
        "min": float(v.min()),
        "max": float(v.max()),
        "positive_fraction": float((v > 0).mean()),
    }
    if r.rho is not None:
        out["mean_abs_rho"] = float(np.abs(r.rho).mean())
        out["mean_c"] = float(r.c.mean())
    return out


def _fit_arm(cfg: PipelineConfig, seeds, sp, t, weights=None):
    rec = cfg.model.recommender(cfg.k, seeds["init"])
    rec.fit(t.array, sample_weight=weights, split=sp)
    return rec


def run_itipr(cfg: PipelineConfig, *, workers: int = 1, run_dir: str | Path | None = None) -> RunReport:
    """Run every stage and write artifacts plus ``report.json`` under the run directory."""
    seeds = cfg.seeds.resolve(cfg.seed)
    if run_dir is None:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        run_dir = Path(cfg.run_root) / f"{stamp}-seed{cfg.seed}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport(seed=cfg.seed, config=cfg.to_dict(), seeds=seeds,
                       runtime={"run_dir": str(run_dir), "workers": workers, "timings": {}})
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    mc = replace(cfg.shapley, seed=seeds["shapley"], init_seed=seeds["init"], eval_k=cfg.k)
    rcfg = replace(cfg.resample, seed=seeds["resample"])
    state: dict[str, Any] = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            report.error = f"{name}: {type(exc).__name__}: {exc}"
            report.save(run_dir / "report.json")
            raise StageError(name, report) from exc
        report.runtime["timings"][name] = time.perf_counter() - t0
        report.completed.append(name)
        log.info("stage %s done in %.1fs", name, report.runtime["timings"][name])

    def s_data():
        sp = load_dataset(cfg.data, seeds["split"])
        save_split(sp, run_dir / "split.csv")
        state["split"] = sp
        report.dataset = {"n_users": sp.n_users, "n_items": sp.n_items, "train": len(sp.train.pairs),
                          "validation": len(sp.validation.pairs), "test": len(sp.test.pairs)}

    def s_triplets():
        sp = state["split"]
        dt = sample_triplets(sp.train, cfg.model.negatives_per_positive, seeds["triplets"])
        dt.to_csv(run_dir / "triplets.csv", sp.train)
        state["dt"] = dt
        report.triplet_counts["initial"] = len(dt)

    def s_baseline():
        base = _fit_arm(cfg, seeds, state["split"], state["dt"])
        save_model(base.model_, run_dir / "baseline_model.npz")
        state["baseline"] = base
        report.full_accuracy["initial"] = float(base.best_score_)
        report.training["baseline"] = {"epochs": base.n_epochs_, "best_epoch": base.best_epoch_}

    def utility():
        m = cfg.model
        return RankingUtility(state["split"], dim=m.dim, backbone=m.backbone, n_layers=m.n_layers, l2=m.l2, k=cfg.k)

    def s_value():
        r = estimate_tmc(state["dt"], utility(), mc, report.full_accuracy["initial"], workers=workers)
        r.to_csv(run_dir / "shapley_initial.csv", state["split"].train)
        state["values"] = r.final_values
        report.shapley["initial"] = _shapley_summary(r)

    def s_tip():
        sc = TargetScaler.fit(state["values"])
        X = tip_features(state["baseline"].model_, state["dt"])
        tm, mse = tip_train(X, sc.transform(state["values"]), replace(rcfg, seed=seeds["tip"]))
        save_tip(tm, run_dir / "tip.npz", sc)
        state["tip"] = tm
        report.tip = {"train_mse": mse, "scaler_center": sc.center, "scaler_scale": sc.scale}

    def s_resample():
        sp = state["split"]
        aug = resample(state["dt"], state["tip"], state["baseline"].model_, sp.train, rcfg, workers=workers)
        aug.to_csv(run_dir / "triplets_aug.csv", sp.train)
        state["aug"] = aug
        report.triplet_counts["new"] = int(aug.resampled.sum())
        report.triplet_counts["augmented"] = len(aug)

    def s_full_acc_aug():
        rec = _fit_arm(cfg, seeds, state["split"], state["aug"])
        report.full_accuracy["augmented"] = float(rec.best_score_)

    def s_revalue():
        r = estimate_tmc(state["aug"], utility(), mc, report.full_accuracy["augmented"], workers=workers)
        r.to_csv(run_dir / "shapley_augmented.csv", state["split"].train)
        state["values_aug"] = r.final_values
        report.shapley["augmented"] = _shapley_summary(r)
        report.triplet_counts["reestimated"] = len(r.values)

    def s_weights():
        w = normalize_weights(state["values_aug"], cfg.weight_floor)
        np.savetxt(run_dir / "weights.csv", w, fmt="%.17g", header="weight", comments="")
        state["weights"] = w
        report.weights = {"sha256": weights_digest(w), "floor": cfg.weight_floor, "mean": float(w.mean()),
                          "min": float(w.min()), "max": float(w.max())}

    def s_final():
        w = state["weights"]
        final = _fit_arm(cfg, seeds, state["split"], state["aug"], w)
        save_model(final.model_, run_dir / "itipr_model.npz")
        state["final"] = final
        report.training["itipr"] = {"epochs": final.n_epochs_, "best_epoch": final.best_epoch_,
                                    "weights_sha256": weights_digest(w)}

    def s_evaluate():
        report.baseline = json.loads(state["baseline"].evaluate("test", cfg.k).to_json())
        report.itipr = json.loads(state["final"].evaluate("test", cfg.k).to_json())

    for name, fn in [
        ("data", s_data), ("triplets", s_triplets), ("baseline", s_baseline), ("value", s_value),
        ("tip", s_tip), ("resample", s_resample), ("full_acc_augmented", s_full_acc_aug),
        ("revalue", s_revalue), ("weights", s_weights), ("final", s_final), ("evaluate", s_evaluate),
    ]:
        stage(name, fn)
    report.save(run_dir / "report.json")
    return report
