"""Command-line entry point (``itipr <subcommand>``)."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .backbone import load_model, save_model
from .dataset import load_split, save_split
from .metrics import EvalReport, evaluate
from .pipeline import PipelineConfig, StageError, load_dataset, normalize_weights, run_itipr
from .shapley import MAX_EXACT, McConfig, ShapleyResult, estimate_tmc, exact_shapley, read_values
from .tip import TargetScaler, load_tip, resample, save_tip, tip_features, tip_train
from .triplets import TripletSet, sample_triplets
from .utility import RankingUtility

log = logging.getLogger("itipr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, workers: bool = False) -> None:
    p.add_argument("--config", type=Path, help="TOML configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    if workers:
        p.add_argument("--workers", type=int, default=1, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="itipr", description="Triplet Shapley valuation and importance-aware BPR training.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="ingest or synthesize data, split it and sample triplets")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("value", help="estimate triplet Shapley values")
    _common(p, workers=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--triplets", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--cv", dest="cv", action="store_true", default=None, help="use control variates")
    p.add_argument("--no-cv", dest="cv", action="store_false")
    p.add_argument("--exact", action="store_true", help=f"enumerate all permutations (at most {MAX_EXACT} triplets)")
    p.add_argument("--full-acc", type=float, help="accuracy of a model trained on all triplets")
    p.add_argument("--max-permutations", type=int)
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("tip", help="fit the importance predictor")
    _common(p)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--triplets", type=Path, required=True)
    p.add_argument("--values", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="embeddings fed to the predictor")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("resample", help="draw new negatives with the importance predictor")
    _common(p, workers=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--triplets", type=Path, required=True)
    p.add_argument("--tip", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a (weighted) BPR model")
    _common(p)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--triplets", type=Path, required=True)
    p.add_argument("--values", type=Path, help="Shapley CSV; normalized into weights")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="Recall@K / NDCG@K of a saved model")
    _common(p)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--role", choices=("validation", "test"), default="test")
    p.add_argument("--k", type=int)
    p.add_argument("--csv", action="store_true", help="print a CSV row instead of JSON")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p, workers=True)
    p.add_argument("--run-dir", type=Path, help="explicit run directory")

    p = sub.add_parser("stability", help="repeat valuation and report cross-run agreement")
    _common(p, workers=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--triplets", type=Path, required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--cv", dest="cv", action="store_true", default=True)
    p.add_argument("--no-cv", dest="cv", action="store_false")
    p.add_argument("--full-acc", type=float)
    p.add_argument("--max-permutations", type=int)
    p.add_argument("--out", type=Path, help="per-triplet variance CSV")
    return ap


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_toml(args.config) if args.config else PipelineConfig().with_env()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _utility(cfg: PipelineConfig, sp) -> RankingUtility:
    m = cfg.model
    return RankingUtility(sp, dim=m.dim, backbone=m.backbone, n_layers=m.n_layers, l2=m.l2, k=cfg.k)


def _mc(cfg: PipelineConfig, args, seeds) -> McConfig:
    mc = replace(cfg.shapley, seed=seeds["shapley"], init_seed=seeds["init"], eval_k=cfg.k)
    if getattr(args, "cv", None) is not None:
        mc = replace(mc, control_variates=args.cv)
    if getattr(args, "max_permutations", None):
        mc = replace(mc, max_permutations=args.max_permutations)
    return mc


def _full_acc(cfg, seeds, sp, dt, given):
    if given is not None:
        return given
    rec = cfg.model.recommender(cfg.k, seeds["init"]).fit(dt.array, split=sp)
    return float(rec.best_score_)


def _aligned_values(path, dt: TripletSet, train) -> np.ndarray:
    keys, values = read_values(path)
    expect = [(train.user_ids[u], train.item_ids[i], train.item_ids[j]) for u, i, j in dt.array.tolist()]
    if keys != expect:
        raise ValueError(f"{path} does not list the triplets of the given triplet file in order")
    return values


def cmd_prepare(args, cfg):
    seeds = cfg.seeds.resolve(cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    sp = load_dataset(cfg.data, seeds["split"])
    save_split(sp, args.out / "split.csv")
    dt = sample_triplets(sp.train, cfg.model.negatives_per_positive, seeds["triplets"])
    dt.to_csv(args.out / "triplets.csv", sp.train)
    print(json.dumps({"n_users": sp.n_users, "n_items": sp.n_items, "train": len(sp.train.pairs),
                      "validation": len(sp.validation.pairs), "test": len(sp.test.pairs), "triplets": len(dt)}))
    return 0


def cmd_value(args, cfg):
    seeds = cfg.seeds.resolve(cfg.seed)
    sp = load_split(args.split)
    dt = TripletSet.from_csv(args.triplets, sp.train)
    mc = _mc(cfg, args, seeds)
    ut = _utility(cfg, sp)
    if args.exact:
        if len(dt) > MAX_EXACT:
            print(f"refused: exact enumeration needs {len(dt)}! = {math.factorial(len(dt))} permutations; "
                  f"the factorial guard allows at most {MAX_EXACT} triplets", file=sys.stderr)
            return 3
        v = exact_shapley(dt, ut, mc)
        res = ShapleyResult(dt, v, math.factorial(len(dt)), np.zeros(len(dt), dtype=np.int64), 0, True, float("nan"))
    else:
        full = _full_acc(cfg, seeds, sp, dt, args.full_acc)
        res = estimate_tmc(dt, ut, mc, full, workers=args.workers, checkpoint=args.checkpoint)
    res.to_csv(args.out, sp.train)
    print(json.dumps({"triplets": len(dt), "permutations": res.n_permutations, "converged": res.converged}))
    return 0


def cmd_tip(args, cfg):
    seeds = cfg.seeds.resolve(cfg.seed)
    sp = load_split(args.split)
    dt = TripletSet.from_csv(args.triplets, sp.train)
    values = _aligned_values(args.values, dt, sp.train)
    m = load_model(args.model)
    sc = TargetScaler.fit(values)
    tm, mse = tip_train(tip_features(m, dt), sc.transform(values), replace(cfg.resample, seed=seeds["tip"]))
    save_tip(tm, args.out, sc)
    print(json.dumps({"train_mse": mse}))
    return 0


def cmd_resample(args, cfg):
    seeds = cfg.seeds.resolve(cfg.seed)
    sp = load_split(args.split)
    dt = TripletSet.from_csv(args.triplets, sp.train)
    tm, _ = load_tip(args.tip)
    aug = resample(dt, tm, load_model(args.model), sp.train, replace(cfg.resample, seed=seeds["resample"]),
                   workers=args.workers)
    aug.to_csv(args.out, sp.train)
    print(json.dumps({"initial": len(dt), "new": int(aug.resampled.sum()), "augmented": len(aug)}))
    return 0


def cmd_train(args, cfg):
    seeds = cfg.seeds.resolve(cfg.seed)
    sp = load_split(args.split)
    dt = TripletSet.from_csv(args.triplets, sp.train)
    w = None
    if args.values:
        w = normalize_weights(_aligned_values(args.values, dt, sp.train), cfg.weight_floor)
    rec = cfg.model.recommender(cfg.k, seeds["init"]).fit(dt.array, sample_weight=w, split=sp)
    save_model(rec.model_, args.out)
    print(json.dumps({"epochs": rec.n_epochs_, "best_epoch": rec.best_epoch_, "validation": rec.best_score_}))
    return 0


def cmd_evaluate(args, cfg):
    sp = load_split(args.split)
    rep: EvalReport = evaluate(load_model(args.model), sp, args.role, args.k or cfg.k)
    print(f"{EvalReport.csv_header}\n{rep.to_csv_row()}" if args.csv else rep.to_json())
    return 0


def cmd_pipeline(args, cfg):
    try:
        report = run_itipr(cfg, workers=args.workers, run_dir=args.run_dir)
    except StageError as exc:
        print(exc.report.to_json(), file=sys.stderr)
        print(f"pipeline failed: {exc.report.error}", file=sys.stderr)
        return 1
    print(report.to_json())
    return 0


def cmd_stability(args, cfg):
    seeds = cfg.seeds.resolve(cfg.seed)
    sp = load_split(args.split)
    dt = TripletSet.from_csv(args.triplets, sp.train)
    mc = _mc(cfg, args, seeds)
    ut = _utility(cfg, sp)
    full = _full_acc(cfg, seeds, sp, dt, args.full_acc)
    runs = []
    for r in range(args.runs):
        res = estimate_tmc(dt, ut, replace(mc, seed=mc.seed + r), full, workers=args.workers)
        runs.append(res.final_values)
    V = np.array(runs)
    rhos = [spearmanr(V[a], V[b])[0] for a, b in itertools.combinations(range(len(V)), 2)]
    var = V.var(axis=0, ddof=1) if len(V) > 1 else np.zeros(V.shape[1])
    if args.out:
        with args.out.open("w", encoding="utf-8") as fh:
            fh.write("user,pos_item,neg_item,mean,variance\n")
            for (u, i, j), m, v in zip(dt.array.tolist(), V.mean(axis=0), var):
                fh.write(f"{sp.train.user_ids[u]},{sp.train.item_ids[i]},{sp.train.item_ids[j]},{m!r},{v!r}\n")
    print(json.dumps({"runs": args.runs, "cv": mc.control_variates,
                      "mean_spearman": float(np.nanmean(rhos)) if rhos else float("nan"),
                      "mean_variance": float(var.mean())}))
    return 0


COMMANDS = {
    "prepare": cmd_prepare, "value": cmd_value, "tip": cmd_tip, "resample": cmd_resample, "train": cmd_train,
    "evaluate": cmd_evaluate, "pipeline": cmd_pipeline, "stability": cmd_stability,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ValueError, OSError, KeyError) as exc:
        print(f"itipr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
