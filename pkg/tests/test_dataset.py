import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from itipr.dataset import (
    DataWarning,
    EmptyDatasetError,
    InteractionSet,
    RawRecord,
    binarize,
    filter_by_activity,
    load_records,
    load_split,
    make_planted,
    save_split,
    split,
)


def _write(tmp_path, text, name="r.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_two_records(tmp_path):
    recs = load_records(_write(tmp_path, "u1,i1,4\nu1,i2,2\n"))
    assert recs == [RawRecord("u1", "i1", 4.0, None), RawRecord("u1", "i2", 2.0, None)]


def test_load_empty_file_no_warnings(tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert load_records(_write(tmp_path, "")) == []


def test_out_of_range_rating_rejected_with_one_warning(tmp_path):
    with pytest.warns(DataWarning) as rec:
        out = load_records(_write(tmp_path, "u1,i1,9\n"))
    assert out == []
    assert len(rec) == 1


def test_header_tsv_and_timestamp(tmp_path):
    recs = load_records(_write(tmp_path, "user\titem\trating\tts\nu1\ti1\t5\t1700000000\n", "r.tsv"))
    assert recs == [RawRecord("u1", "i1", 5.0, 1700000000)]


def test_malformed_lines_counted(tmp_path):
    with pytest.warns(DataWarning) as rec:
        out = load_records(_write(tmp_path, "u1,i1,4\nu2\nu3,i3,abc\n"))
    assert len(out) == 1 and len(rec) == 2


def test_missing_file_is_fatal(tmp_path):
    with pytest.raises(OSError):
        load_records(tmp_path / "nope.csv")


def test_implicit_file_without_ratings(tmp_path):
    recs = load_records(_write(tmp_path, "a,x\nb,y\n"), has_ratings=False)
    assert [r.rating for r in recs] == [None, None]
    assert len(binarize(recs)) == 2


@pytest.mark.parametrize("rating, kept", [(4.0, True), (3.0, False), (3.5, True), (0.0, False)])
def test_binarize_strict_threshold(rating, kept):
    s = binarize([RawRecord("u", "i", rating)], threshold=3)
    assert (len(s) == 1) is kept


def test_binarize_collapses_duplicates():
    s = binarize([RawRecord("u", "i", 5.0), RawRecord("u", "i", 4.0)])
    assert len(s) == 1 and s.user_index_map == {"u": 0}


records_st = st.lists(
    st.tuples(st.sampled_from("abcde"), st.sampled_from("vwxyz"), st.sampled_from([None, 1.0, 3.0, 4.0, 5.0])),
    max_size=30,
).map(lambda rows: [RawRecord(u, i, r) for u, i, r in rows])


@given(records_st, st.randoms(use_true_random=False))
def test_binarize_order_independent(records, rnd):
    shuffled = list(records)
    rnd.shuffle(shuffled)
    assert binarize(records) == binarize(shuffled)


def test_filter_identity_at_zero():
    s = make_planted(30, 20, 5, seed=0)
    assert filter_by_activity(s, 0, 0) == s


def test_filter_star_graph_empties():
    s = InteractionSet.from_pairs([(0, i) for i in range(5)], 1, 5)
    with pytest.raises(EmptyDatasetError):
        filter_by_activity(s, 0, 2)


def test_filter_accepts_large_thresholds():
    s = make_planted(60, 40, 25, seed=0)
    out = filter_by_activity(s, 15, 20)
    assert out.user_degrees().min() >= 15 and out.item_degrees().min() >= 20


def test_filter_negative_threshold_rejected():
    with pytest.raises(ValueError):
        filter_by_activity(make_planted(10, 10, 3, seed=0), -1, 0)


pairs_st = st.lists(st.tuples(st.integers(0, 9), st.integers(0, 7)), min_size=1, max_size=60)


@given(pairs_st, st.integers(0, 4), st.integers(0, 4))
def test_filter_idempotent(pairs, mu, mi):
    s = InteractionSet.from_pairs(pairs, 10, 8)
    try:
        once = filter_by_activity(s, mu, mi)
    except EmptyDatasetError:
        return
    assert filter_by_activity(once, mu, mi) == once
    assert once.user_degrees().min() >= mu and once.item_degrees().min() >= mi


def test_split_exact_ratio():
    s = InteractionSet.from_pairs([(0, i) for i in range(10)], 1, 10)
    sp = split(s, (8, 1, 1), seed=3)
    assert (len(sp.train), len(sp.validation), len(sp.test)) == (8, 1, 1)


def test_split_small_user_all_train():
    s = InteractionSet.from_pairs([(0, 0), (0, 1), (1, 0), (1, 1), (1, 2)], 2, 3)
    sp = split(s, seed=0)
    assert sp.train.user_items[0].tolist() == [0, 1]
    assert len(sp.validation.user_items[0]) == 0 and len(sp.test.user_items[0]) == 0


@given(pairs_st, st.integers(0, 2**31 - 1))
def test_split_partitions_each_user(pairs, seed):
    s = InteractionSet.from_pairs(pairs, 10, 8)
    sp = split(s, seed=seed)
    for u in range(10):
        parts = [set(p.user_items[u].tolist()) for p in (sp.train, sp.validation, sp.test)]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        assert parts[0] | parts[1] | parts[2] == set(s.user_items[u].tolist())
    again = split(s, seed=seed)
    assert again.train == sp.train and again.validation == sp.validation and again.test == sp.test


def test_split_roundtrip(tmp_path):
    sp = split(make_planted(20, 15, 6, seed=2), seed=1)
    save_split(sp, tmp_path / "s.csv")
    back = load_split(tmp_path / "s.csv")
    for role in ("train", "validation", "test"):
        a, b = sp.role(role), back.role(role)
        ext = lambda part: {(part.user_ids[u], part.item_ids[i]) for u, i in part.pairs}
        assert ext(a) == ext(b)


def test_planted_shape_and_determinism():
    a = make_planted(50, 30, 7, seed=4)
    assert (a.user_degrees() == 7).all()
    assert a == make_planted(50, 30, 7, seed=4)
    assert a != make_planted(50, 30, 7, seed=5)


def test_index_maps_bijective():
    s = binarize([RawRecord("b", "y", 5.0), RawRecord("a", "x", 5.0)])
    assert s.user_ids == ("a", "b")
    assert [s.user_index_map[u] for u in s.user_ids] == [0, 1]
    assert np.array_equal(s.pairs, [[0, 0], [1, 1]])
