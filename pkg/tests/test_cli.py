import json

import numpy as np
import pytest

from _builders import cv_probe
from itipr.cli import main
from itipr.dataset import InteractionSet, SplitInteractions, load_split, save_split
from itipr.shapley import read_values
from itipr.triplets import TripletSet

SMALL = """\
seed = 3
k = 10
[data]
synthetic_users = 50
synthetic_items = 40
synthetic_per_user = 8
[model]
dim = 4
max_epochs = 20
patience = 3
[shapley]
max_permutations = 5
cv_warmup = 3
[resample]
tip_epochs = 3
candidate_pool_size = 10
"""


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.toml").write_text(SMALL, encoding="utf-8")
    assert main(["prepare", "--config", str(d / "c.toml"), "--out", str(d)]) == 0
    return d


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_unknown_subcommand_and_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["value", "--bogus"])
    assert exc.value.code != 0


def test_exact_refused_for_ten_triplets(prepared, tmp_path, capsys):
    train = load_split(prepared / "split.csv").train
    TripletSet.from_csv(prepared / "triplets.csv", train).subset(np.arange(10)).to_csv(tmp_path / "t10.csv", train)
    code, _, err = _run(capsys, "value", "--config", prepared / "c.toml", "--split", prepared / "split.csv",
                        "--triplets", tmp_path / "t10.csv", "--out", tmp_path / "v.csv", "--exact")
    assert code == 3 and "factorial guard" in err
    assert not (tmp_path / "v.csv").exists()


def test_exact_on_small_set(prepared, tmp_path, capsys):
    train = load_split(prepared / "split.csv").train
    TripletSet.from_csv(prepared / "triplets.csv", train).subset(np.arange(3)).to_csv(tmp_path / "t3.csv", train)
    code, out, _ = _run(capsys, "value", "--config", prepared / "c.toml", "--split", prepared / "split.csv",
                        "--triplets", tmp_path / "t3.csv", "--out", tmp_path / "v.csv", "--exact")
    assert code == 0 and json.loads(out)["permutations"] == 6
    assert len(read_values(tmp_path / "v.csv")[1]) == 3


def test_missing_input_is_an_error(tmp_path, capsys):
    code, _, err = _run(capsys, "evaluate", "--split", tmp_path / "nope.csv", "--model", tmp_path / "m.npz")
    assert code == 2 and "error" in err


def test_stage_by_stage_chain(prepared, tmp_path, capsys):
    cfg = prepared / "c.toml"
    common = ["--config", cfg, "--split", prepared / "split.csv"]
    assert _run(capsys, "train", *common, "--triplets", prepared / "triplets.csv", "--out", tmp_path / "base.npz")[0] == 0
    code, out, _ = _run(capsys, "value", *common, "--triplets", prepared / "triplets.csv", "--out", tmp_path / "v.csv",
                        "--workers", 2)
    assert code == 0 and json.loads(out)["permutations"] == 5
    assert _run(capsys, "tip", *common, "--triplets", prepared / "triplets.csv", "--values", tmp_path / "v.csv",
                "--model", tmp_path / "base.npz", "--out", tmp_path / "tip.npz")[0] == 0
    code, out, _ = _run(capsys, "resample", *common, "--triplets", prepared / "triplets.csv", "--tip",
                        tmp_path / "tip.npz", "--model", tmp_path / "base.npz", "--out", tmp_path / "aug.csv")
    counts = json.loads(out)
    assert code == 0 and counts["augmented"] == counts["initial"] + counts["new"]
    assert _run(capsys, "value", *common, "--triplets", tmp_path / "aug.csv", "--out", tmp_path / "va.csv",
                "--no-cv", "--full-acc", 0.1)[0] == 0
    assert "shapley_cv" not in (tmp_path / "va.csv").read_text(encoding="utf-8").splitlines()[0]
    assert _run(capsys, "train", *common, "--triplets", tmp_path / "aug.csv", "--values", tmp_path / "va.csv",
                "--out", tmp_path / "final.npz")[0] == 0
    code, out, _ = _run(capsys, "evaluate", *common, "--model", tmp_path / "final.npz", "--k", 5, "--csv")
    header, row = out.strip().splitlines()
    assert code == 0 and header == "k,n_users_evaluated,recall_at_k,ndcg_at_k" and row.startswith("5,")


def test_values_must_align_with_triplets(prepared, tmp_path, capsys):
    common = ["--config", prepared / "c.toml", "--split", prepared / "split.csv"]
    train = load_split(prepared / "split.csv").train
    TripletSet.from_csv(prepared / "triplets.csv", train).subset(np.arange(4)).to_csv(tmp_path / "t4.csv", train)
    _run(capsys, "value", *common, "--triplets", tmp_path / "t4.csv", "--out", tmp_path / "v.csv", "--exact")
    code, _, err = _run(capsys, "train", *common, "--triplets", prepared / "triplets.csv", "--values",
                        tmp_path / "v.csv", "--out", tmp_path / "m.npz")
    assert code == 2 and "in order" in err


def test_pipeline_twice_identical(prepared, tmp_path, capsys):
    reports = []
    for k in range(2):
        code, out, _ = _run(capsys, "pipeline", "--config", prepared / "c.toml", "--seed", 7, "--run-dir", tmp_path / str(k))
        assert code == 0
        rep = json.loads(out)
        rep.pop("runtime")
        reports.append(rep)
    assert reports[0] == reports[1] and reports[0]["seed"] == 7


def test_pipeline_failure_exit_code(tmp_path, capsys):
    (tmp_path / "c.toml").write_text(f'[data]\npath = "{tmp_path / "missing.csv"}"\n', encoding="utf-8")
    code, _, err = _run(capsys, "pipeline", "--config", tmp_path / "c.toml", "--run-dir", tmp_path / "r")
    assert code == 1 and "pipeline failed" in err


def test_stability_cv_beats_plain(tmp_path, capsys):
    sp, t = cv_probe(seed=1)
    # the snapshot only lists items with interactions, so a train-only user
    # (never evaluated) keeps the probe's inert negatives in the index
    extra = [(sp.n_users, j) for j in t[:, 2]]
    sp = SplitInteractions(*(InteractionSet.from_pairs(np.vstack([p.pairs] + ([extra] if r == 0 else [])), sp.n_users + 1,
                                                       sp.n_items) for r, p in enumerate((sp.train, sp.validation, sp.test))))
    save_split(sp, tmp_path / "split.csv")
    TripletSet(t).to_csv(tmp_path / "t.csv", sp.train)
    (tmp_path / "c.toml").write_text(
        "k = 20\n[model]\ndim = 8\n[seeds]\ninit = 0\n"
        "[shapley]\ntolerance = 0.0\nlearning_rate = 4.0\nmax_permutations = 200\n"
        "convergence_delta = 1e-300\ncv_positions = 0\n",
        encoding="utf-8",
    )
    res = {}
    for flag in ("--cv", "--no-cv"):
        code, out, _ = _run(capsys, "stability", "--config", tmp_path / "c.toml", "--split", tmp_path / "split.csv",
                            "--triplets", tmp_path / "t.csv", "--runs", 5, flag, "--out", tmp_path / f"{flag}.csv")
        assert code == 0
        res[flag] = json.loads(out)
    assert res["--cv"]["cv"] and not res["--no-cv"]["cv"]
    assert res["--cv"]["mean_spearman"] > res["--no-cv"]["mean_spearman"]
    assert res["--cv"]["mean_variance"] < res["--no-cv"]["mean_variance"]
    rows = (tmp_path / "--cv.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "user,pos_item,neg_item,mean,variance" and len(rows) == 1 + len(t)
