import math
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairunlearn.dataset import (G0, G1, UNKNOWN, Sample, SampleSet, compute_popularity, head_size,
                                 load_groups, load_interactions, load_item_embeddings,
                                 read_index_map, sample_candidates, temporal_split,
                                 write_index_map, InteractionLog)
from fairunlearn.errors import DegenerateSplitError, EmptyInputError, ParseError


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return _write


def targets_only(targets, item_count):
    samples = [Sample(k, 0, np.array([0]), t, k) for k, t in enumerate(targets)]
    return compute_popularity(SampleSet.from_samples(samples), item_count)


# -- loading ---------------------------------------------------------------

def test_three_row_fixture_counts(write):
    log, groups = load_interactions(write("a.tsv", "u1\ti1\t10\nu2\ti2\t20\nu1\ti2\t30\n"))
    assert (log.user_count, log.item_count, len(log)) == (2, 2, 3)
    assert log.user_ids == ["u1", "u2"]
    assert np.all(groups.group_of == UNKNOWN)


def test_dense_ids_follow_first_appearance(write):
    log, _ = load_interactions(write("a.csv", "zed,b,1\nalf,a,2\nzed,a,3\n"))
    assert log.user_ids == ["zed", "alf"] and log.item_ids == ["b", "a"]
    assert log.users.tolist() == [0, 1, 0] and log.items.tolist() == [0, 1, 1]


def test_header_and_rating_column(write):
    log, _ = load_interactions(write("a.tsv", "user\titem\ttimestamp\trating\nu\ti\t5\t4.0\n"))
    assert len(log) == 1 and log.timestamps.tolist() == [5]


def test_movielens_double_colon_rows(write):
    log, _ = load_interactions(write("ratings.dat", "1::1193::5::978300760\n1::661::3::978302109\n"))
    assert log.item_ids == ["1193", "661"]
    assert log.timestamps.tolist() == [978300760, 978302109]


@pytest.mark.parametrize("text,line", [
    ("u\ti\t1\nu\ti\n", 2),
    ("u\ti\t1\nu\ti\tsoon\n", 2),
    ("u\ti\t1\nu\ti\t2\n\ta\t3\n", 3),
])
def test_malformed_row_reports_line(write, text, line):
    with pytest.raises(ParseError) as err:
        load_interactions(write("bad.tsv", text))
    assert err.value.line == line


def test_empty_file(write):
    with pytest.raises(EmptyInputError):
        load_interactions(write("empty.tsv", "\n"))


def test_groups_missing_user_is_unknown(write):
    path = write("a.tsv", "u1\ti\t1\nu2\ti\t2\nu3\ti\t3\n")
    attrs = write("g.tsv", "u1\tM\nu3\tF\nghost\tM\n")
    _, groups = load_interactions(path, attrs)
    assert groups.group_of.tolist() == [G1, UNKNOWN, G0]  # labels sorted: F -> G0
    assert groups.labels == ("F", "M")


def test_more_than_two_labels_rejected(write):
    with pytest.raises(ParseError):
        load_groups(write("g.tsv", "a\tx\nb\ty\nc\tz\n"), {"a": 0, "b": 1, "c": 2})


def test_item_embeddings_align_with_index(write):
    emb = load_item_embeddings(write("e.tsv", "b\t1\t2\na\t3\t4\n"), ["a", "b"])
    assert emb.tolist() == [[3.0, 4.0], [1.0, 2.0]]
    with pytest.raises(ParseError):
        load_item_embeddings(write("e2.tsv", "a\t1\t2\n"), ["a", "b"])


def test_index_map_round_trip(tmp_path):
    log = InteractionLog.from_arrays([0, 1], [0, 0], [1, 2])
    write_index_map(log, tmp_path / "map.json")
    assert read_index_map(tmp_path / "map.json") == (log.user_ids, log.item_ids)


@pytest.mark.skipif(not Path(os.environ.get("ML1M_RATINGS", "data/ml-1m/ratings.dat")).is_file(),
                    reason="MovieLens-1M ratings.dat not available")
def test_movielens_1m_counts():
    log, _ = load_interactions(os.environ.get("ML1M_RATINGS", "data/ml-1m/ratings.dat"))
    # 3,952 is the id range; only 3,706 distinct movies occur in ratings.dat
    assert log.user_count == 6040 and len(log) == 1_000_209
    assert max(int(i) for i in log.item_ids) == 3952


# -- splitting -------------------------------------------------------------

@pytest.fixture
def twenty_events():
    # user 0 acts at odd times 1..19 on items 0..9, user 1 at even times 2..20 on items 10..19
    users = [0] * 10 + [1] * 10
    items = list(range(20))
    stamps = list(range(1, 20, 2)) + list(range(2, 21, 2))
    return InteractionLog.from_arrays(users, items, stamps)


def _members(samples):
    return sorted((int(u), int(t)) for u, t in zip(samples.user, samples.timestamp))


def test_twenty_event_split_membership(twenty_events):
    split = temporal_split(twenty_events)
    # lower quantiles of 1..20 at 0, .1, ..., .9
    assert split.period_boundaries == [1, 2, 4, 6, 8, 10, 12, 14, 16, 18]
    assert _members(split.train) == [(0, t) for t in (3, 5, 7, 9, 11, 13, 15)] + \
        [(1, t) for t in (4, 6, 8, 10, 12, 14)]
    assert _members(split.valid) == [(0, 17), (1, 16)]
    assert _members(split.test) == [(0, 19), (1, 18), (1, 20)]
    late = [s for s in split.valid if s.user == 0][0]
    assert late.history.tolist() == list(range(8)) and late.target == 8


def test_history_cap(twenty_events):
    split = temporal_split(twenty_events, max_history=3)
    s = [s for s in split.test if s.user == 0][0]
    assert s.history.tolist() == [6, 7, 8] and s.target == 9


def test_single_timestamp_is_degenerate():
    log = InteractionLog.from_arrays([0, 0, 1, 1], [0, 1, 0, 1], [5, 5, 5, 5])
    with pytest.raises(DegenerateSplitError):
        temporal_split(log)


def test_uniform_timestamps_give_eight_tenths():
    rng = np.random.default_rng(0)
    n_users, per_user = 300, 40
    users = np.repeat(np.arange(n_users), per_user)
    log = InteractionLog.from_arrays(users, rng.integers(0, 50, users.size),
                                     rng.integers(0, 10**6, users.size))
    split = temporal_split(log)
    total = len(split.train) + len(split.valid) + len(split.test)
    assert len(split.train) / total == pytest.approx(0.8, abs=0.02)
    assert split.train.timestamp.max() <= split.valid.timestamp.min()
    assert split.valid.timestamp.max() <= split.test.timestamp.min()


def test_bad_period_counts(twenty_events):
    with pytest.raises(ValueError):
        temporal_split(twenty_events, 10, 7, 1, 1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 6), st.integers(0, 60)),
                min_size=30, max_size=80))
def test_split_never_leaks(events):
    users, items, stamps = map(list, zip(*events))
    log = InteractionLog.from_arrays(users, items, stamps)
    try:
        split = temporal_split(log)
    except DegenerateSplitError:
        return
    assert split.train.timestamp.max() <= split.test.timestamp.min()
    for part in (split.train, split.valid, split.test):
        for s in part:
            assert len(s.history) >= 1


# -- popularity ------------------------------------------------------------

def test_popularity_hand_counts():
    pop = targets_only([0] * 9 + [1] * 3 + [2], 5)
    assert pop.count.tolist() == [9, 3, 1, 0, 0]
    assert pop.head_set.tolist() == [0]
    assert pop.tail_set.tolist() == [1, 2, 3, 4]
    assert pop.v_pop[3] == 0.0
    assert pop.v_pop[0] == pytest.approx(math.log(10))


def test_popularity_ties_break_by_index():
    pop = targets_only([3, 3, 1, 1, 4], 10)  # items 1 and 3 tie; head has 2 slots
    assert pop.head_set.tolist() == [1, 3]


def test_head_matches_sort_oracle_on_zipf():
    rng = np.random.default_rng(3)
    p = 1.0 / np.arange(1, 101) ** 1.1
    targets = rng.permutation(100)[rng.choice(100, size=3000, p=p / p.sum())]
    pop = targets_only(targets.tolist(), 100)
    counts = [int(np.sum(targets == i)) for i in range(100)]
    ranked = sorted(range(100), key=lambda i: (-counts[i], i))
    assert pop.head_set.tolist() == sorted(ranked[:20])
    assert head_size(100) == 20


@pytest.mark.parametrize("mode,expected", [("raw", [2.0, 1.0, 0.0]),
                                           ("normalized", [1.0, 0.5, 0.0])])
def test_value_modes(mode, expected):
    samples = SampleSet.from_samples([Sample(k, 0, np.array([2]), t, k) for k, t in enumerate([0, 0, 1])])
    assert compute_popularity(samples, 3, value_mode=mode).v_pop.tolist() == expected


def test_occurrence_counting_includes_history():
    samples = SampleSet.from_samples([Sample(0, 0, np.array([2, 2]), 0, 0)])
    assert compute_popularity(samples, 3, count_mode="occurrences").count.tolist() == [1, 0, 2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=60))
def test_popularity_monotone_and_partition(targets):
    pop = targets_only(targets, 10)
    assert len(pop.head_set) == head_size(10)
    assert sorted(pop.head_set.tolist() + pop.tail_set.tolist()) == list(range(10))
    for a in range(10):
        for b in range(10):
            if pop.count[a] > pop.count[b]:
                assert pop.v_pop[a] > pop.v_pop[b]


# -- candidates ------------------------------------------------------------

def _train(n):
    return SampleSet.from_samples([Sample(k, 0, np.array([0]), 0, k) for k in range(n)])


def test_candidate_size_for_large_train():
    cand = sample_candidates(_train(65_536), 0.1, 0)
    assert len(cand) == 6554


def test_candidates_full_ratio_and_determinism():
    train = _train(37)
    assert sample_candidates(train, 1.0, 5).sample_ids.tolist() == list(range(37))
    a, b = sample_candidates(train, 0.3, 9), sample_candidates(train, 0.3, 9)
    assert a.sample_ids.tolist() == b.sample_ids.tolist()
    assert len(np.unique(a.sample_ids)) == len(a) == math.ceil(0.3 * 37)


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
def test_candidate_ratio_out_of_range(ratio):
    with pytest.raises(ValueError):
        sample_candidates(_train(5), ratio, 0)


def test_candidate_inclusion_is_uniform():
    n, seeds = 50, 1000
    hits = np.zeros(n)
    train = _train(n)
    for seed in range(seeds):
        hits[sample_candidates(train, 0.1, seed).sample_ids] += 1
    sigma = math.sqrt(0.1 * 0.9 / seeds)
    assert np.all(np.abs(hits / seeds - 0.1) <= 3 * sigma)
