import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from itipr.backbone import MF, ModelState, init_model
from itipr.dataset import make_planted, split
from itipr.metrics import (
    EvalReport,
    accuracy,
    evaluate,
    ndcg_at_k,
    per_user_metrics,
    recall_at_k,
    top_k,
)


def _model(scores_row):
    # one user with a 1-d embedding of 1 and item embeddings equal to the scores
    return ModelState(np.ones((1, 1)), np.asarray(scores_row, float).reshape(-1, 1), MF)


def test_top_k_tie_break_to_lower_index():
    items, short = top_k(_model([0.5, 0.9, 0.9, 0.1]), 0, 2)
    assert items == [1, 2] and not short


def test_top_k_exclusion_and_short_list():
    items, short = top_k(_model([3.0, 2.0, 1.0]), 0, 3, exclude={0})
    assert items == [1, 2] and short


def test_recall_and_ndcg_hand_values():
    assert recall_at_k([1, 2, 3], {3, 9}, 3) == 0.5
    assert recall_at_k([1, 2, 3], {3}, 3) == 1.0
    assert ndcg_at_k([5, 7], {7}, 2) == pytest.approx(1 / math.log2(3))
    assert ndcg_at_k([7, 5], {7}, 2) == 1.0
    # recall denominator is min(k, |test|)
    assert recall_at_k([0, 1], set(range(10)), 2) == 1.0


def test_empty_test_items_rejected():
    with pytest.raises(ValueError):
        recall_at_k([1], set(), 1)
    with pytest.raises(ValueError):
        ndcg_at_k([1], set(), 1)


def _brute_ndcg(rec, test, k):
    dcg = sum(1 / math.log2(r + 2) for r, it in enumerate(rec[:k]) if it in test)
    idcg = sum(1 / math.log2(r + 2) for r in range(min(k, len(test))))
    return dcg / idcg


lists_st = st.lists(st.integers(0, 30), unique=True, max_size=25)


@given(lists_st, st.sets(st.integers(0, 30), min_size=1), st.integers(1, 25))
def test_metrics_bounded_and_match_reference(rec, test, k):
    r = recall_at_k(rec, test, k)
    n = ndcg_at_k(rec, test, k)
    assert 0.0 <= r <= 1.0 and 0.0 <= n <= 1.0 + 1e-12
    assert n == pytest.approx(_brute_ndcg(rec, test, k), rel=1e-12, abs=1e-15)


@given(st.sets(st.integers(0, 30), min_size=1), st.integers(1, 25))
def test_perfect_ranking_scores_one(test, k):
    rec = sorted(test) + [i for i in range(31) if i not in test]
    assert recall_at_k(rec, test, k) == 1.0
    assert ndcg_at_k(rec, test, k) == pytest.approx(1.0, rel=1e-12)


@given(st.integers(0, 10_000))
def test_vectorized_metrics_match_scalar(seed):
    rng = np.random.default_rng(seed)
    U, V, k = 6, 15, 5
    scores = rng.integers(0, 4, size=(U, V)).astype(float)  # many ties
    exclude = rng.random((U, V)) < 0.3
    targets = (rng.random((U, V)) < 0.25) & ~exclude
    users, rec, nd = per_user_metrics(scores, exclude, targets, k)
    for pos, u in enumerate(users):
        m = ModelState(np.ones((1, 1)), scores[u].reshape(-1, 1), MF)
        items, _ = top_k(m, 0, k, exclude=np.flatnonzero(exclude[u]))
        t = set(np.flatnonzero(targets[u]).tolist())
        assert rec[pos] == pytest.approx(recall_at_k(items, t, k), abs=1e-15)
        assert nd[pos] == pytest.approx(ndcg_at_k(items, t, k), rel=1e-12)


def test_evaluate_skips_users_without_targets_and_excludes_train():
    sp = split(make_planted(30, 25, 6, seed=0), seed=0)
    m = init_model(sp.n_users, sp.n_items, 4, MF, seed=0)
    rep = evaluate(m, sp, "test", 5)
    assert rep.n_users_evaluated == int((sp.test.user_degrees() > 0).sum())
    assert 0 <= rep.recall_at_k <= 1 and 0 <= rep.ndcg_at_k <= 1
    assert accuracy(m, sp, "test", 5) == rep.ndcg_at_k
    assert accuracy(m, sp, "test", 5, metric="recall") == rep.recall_at_k


def test_evaluate_with_no_targets_raises():
    sp = split(make_planted(5, 10, 2, seed=0), seed=0)  # users with 2 items keep all in train
    m = init_model(sp.n_users, sp.n_items, 2, MF, seed=0)
    with pytest.raises(ValueError):
        evaluate(m, sp, "test", 5)


def test_report_serialization():
    rep = EvalReport(0.25, 0.5, 20, 7)
    assert json.loads(rep.to_json()) == {"k": 20, "n_users_evaluated": 7, "ndcg_at_k": 0.5, "recall_at_k": 0.25}
    assert rep.to_csv_row() == "20,7,0.25,0.5"


def test_top_k_sorted_by_score():
    assert top_k(_model([2.0, 1.0, 3.0]), 0, 2)[0] == [2, 0]


def test_top_k_everything_excluded():
    assert top_k(_model([1.0, 2.0]), 0, 3, exclude={0, 1}) == ([], True)


def test_recall_partial_and_zero():
    assert recall_at_k(list(range(20)), {5, 99}, 20) == 0.5
    assert recall_at_k([1, 2], {3}, 2) == 0.0
    assert ndcg_at_k([1, 2], {3}, 2) == 0.0


def test_ndcg_below_one_unless_packed():
    assert ndcg_at_k([9, 1, 2], {1, 2}, 3) < 1.0
    assert ndcg_at_k([2, 1, 9], {1, 2}, 3) == pytest.approx(1.0)


def test_trained_model_beats_random():
    from itipr.recommender import BPRRecommender
    from itipr.triplets import sample_triplets

    sp = split(make_planted(50, 40, 12, seed=0), seed=0)
    t = sample_triplets(sp.train, 1, seed=0).array
    rec = BPRRecommender(dim=8, max_epochs=40, patience=5, learning_rate=0.5).fit(t, split=sp)
    rnd = init_model(sp.n_users, sp.n_items, 8, MF, seed=0)
    assert accuracy(rec.model_, sp, "test") > accuracy(rnd, sp, "test")
    assert accuracy(rnd.copy(), sp) == accuracy(rnd, sp)


def test_accuracy_invariant_to_item_relabeling():
    from itipr.dataset import InteractionSet, SplitInteractions

    sp = split(make_planted(30, 25, 6, seed=1), seed=0)
    m = init_model(sp.n_users, sp.n_items, 4, MF, seed=2)
    perm = np.random.default_rng(0).permutation(sp.n_items)  # old item -> new item
    relabel = lambda part: InteractionSet.from_pairs(
        np.stack([part.pairs[:, 0], perm[part.pairs[:, 1]]], axis=1), sp.n_users, sp.n_items)
    sp2 = SplitInteractions(relabel(sp.train), relabel(sp.validation), relabel(sp.test))
    Q2 = np.empty_like(m.item_embeddings)
    Q2[perm] = m.item_embeddings
    m2 = ModelState(m.user_embeddings, Q2, MF)
    # continuous random scores have no ties, so tie-breaking cannot differ
    assert accuracy(m2, sp2, "test", 5) == pytest.approx(accuracy(m, sp, "test", 5), rel=1e-12)
