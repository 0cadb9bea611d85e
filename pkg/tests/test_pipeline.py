import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from itipr.pipeline import (
    PipelineConfig,
    SeedConfig,
    StageError,
    normalize_weights,
    run_itipr,
    weights_digest,
)

TINY = {
    "data": {"synthetic_users": 60, "synthetic_items": 40, "synthetic_per_user": 8},
    "model": {"dim": 8, "max_epochs": 30, "patience": 3},
    "shapley": {"max_permutations": 6, "cv_warmup": 3},
    "resample": {"tip_epochs": 5, "candidate_pool_size": 10},
    "k": 10,
}


def _cfg(**over):
    d = json.loads(json.dumps(TINY))
    for key, val in over.items():
        if isinstance(val, dict):
            d.setdefault(key, {}).update(val)
        else:
            d[key] = val
    return PipelineConfig.from_dict(d)


def test_normalize_hand_case():
    np.testing.assert_allclose(normalize_weights([-1.0, 0.0, 1.0], 0.1), [0.1, 0.55, 1.0])


def test_normalize_constant_gives_ones():
    assert normalize_weights([0.3, 0.3]).tolist() == [1.0, 1.0]


@pytest.mark.parametrize("bad", [[], [np.nan], [np.inf, 1.0]])
def test_normalize_rejects(bad):
    with pytest.raises(ValueError):
        normalize_weights(bad)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.01, 0.99))
def test_normalize_preserves_order_and_range(v, eps):
    w = normalize_weights(v, eps)
    v = np.asarray(v)
    assert (w >= eps - 1e-12).all() and (w <= 1 + 1e-12).all()
    i, j = np.triu_indices(len(v), 1)
    # monotone, with ties kept; float rounding may merge values closer than one ulp of the range
    assert ((v[i] < v[j]) <= (w[i] <= w[j])).all() and ((v[i] == v[j]) <= (w[i] == w[j])).all()
    wide = np.abs(v[i] - v[j]) > 1e-9 * (v.max() - v.min())
    assert (np.sign(w[i] - w[j])[wide] == np.sign(v[i] - v[j])[wide]).all()


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown keys"):
        PipelineConfig.from_dict({"shapley": {"tolerence": 0.1}})
    with pytest.raises(ValueError, match="unknown keys"):
        PipelineConfig.from_dict({"sed": 1})


def test_config_toml_and_env(tmp_path, monkeypatch):
    p = tmp_path / "c.toml"
    p.write_text('seed = 7\nweight_floor = 0.2\n[data]\npath = "x.csv"\n[shapley]\ncv_positions = 0\n', encoding="utf-8")
    cfg = PipelineConfig.from_toml(p)
    assert (cfg.seed, cfg.weight_floor, cfg.data.path, cfg.shapley.cv_positions) == (7, 0.2, "x.csv", None)
    monkeypatch.setenv("ITIPR_DATA", "/elsewhere.csv")
    monkeypatch.setenv("ITIPR_RUN_ROOT", "/tmp/r")
    cfg = PipelineConfig.from_toml(p)
    assert cfg.data.path == "/elsewhere.csv" and cfg.run_root == "/tmp/r"


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(weight_floor=1.0)
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"data": {"ratios": [8, 0, 1]}})


def test_seed_resolution():
    a = SeedConfig().resolve(3)
    assert a == SeedConfig().resolve(3) and a != SeedConfig().resolve(4)
    assert len(set(a.values())) == len(a)
    assert SeedConfig(tip=11).resolve(3)["tip"] == 11


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    return run_itipr(_cfg(), run_dir=d), d


def test_run_report_contents(tiny_run):
    rep, d = tiny_run
    assert rep.completed[-1] == "evaluate" and rep.error is None
    for name in ("split.csv", "triplets.csv", "shapley_initial.csv", "tip.npz", "triplets_aug.csv",
                 "shapley_augmented.csv", "weights.csv", "baseline_model.npz", "itipr_model.npz", "report.json"):
        assert (d / name).exists(), name
    # revaluation runs over the augmented set
    counts = rep.triplet_counts
    assert counts["reestimated"] == counts["augmented"] == counts["initial"] + counts["new"] > counts["initial"]
    assert set(rep.baseline) == set(rep.itipr) == {"recall_at_k", "ndcg_at_k", "k", "n_users_evaluated"}
    assert rep.baseline["n_users_evaluated"] == rep.itipr["n_users_evaluated"]


def test_weights_audit_hash(tiny_run):
    rep, d = tiny_run
    w = np.loadtxt(d / "weights.csv", skiprows=1)
    assert weights_digest(w) == rep.weights["sha256"] == rep.training["itipr"]["weights_sha256"]
    assert rep.weights["min"] >= rep.weights["floor"]


def test_report_json_roundtrip(tiny_run):
    rep, d = tiny_run
    saved = json.loads((d / "report.json").read_text(encoding="utf-8"))
    assert saved == json.loads(rep.to_json())
    assert "runtime" not in json.loads(rep.to_json(timings=False))


def test_degenerates_to_bpr(tmp_path):
    # no resampling and infinite tolerance: every marginal is zero, weights are all one
    cfg = _cfg(resample={"new_triplets_per_positive": 0}, shapley={"tolerance": float("inf")})
    rep = run_itipr(cfg, run_dir=tmp_path)
    assert rep.triplet_counts["new"] == 0
    assert rep.weights["min"] == rep.weights["max"] == 1.0
    assert rep.itipr == rep.baseline


def test_stage_failure_reports_progress(tmp_path):
    cfg = _cfg(data={"path": str(tmp_path / "missing.csv")})
    with pytest.raises(StageError) as exc:
        run_itipr(cfg, run_dir=tmp_path / "r")
    assert exc.value.stage == "data"
    saved = json.loads((tmp_path / "r" / "report.json").read_text(encoding="utf-8"))
    assert saved["completed"] == [] and saved["error"].startswith("data:")


def test_default_run_dir_named_by_seed(tmp_path):
    cfg = _cfg(run_root=str(tmp_path), seed=4, data={"path": str(tmp_path / "missing.csv")})
    with pytest.raises(StageError):
        run_itipr(cfg)
    (run,) = tmp_path.iterdir()
    assert run.name.endswith("-seed4")
