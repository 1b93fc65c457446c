import json

import numpy as np
import pytest

from fairunlearn.costs import CostCounters, StageCost
from fairunlearn.dataset import PopularityTable, Sample, SampleSet
from fairunlearn.fairness import EvalReport
from fairunlearn.recmodel import ModelState
from fairunlearn.reports import (cost_report, decile_report, fit_cost_constant, popularity_deciles,
                                 read_cost_json, read_metrics_csv, write_cost_json, write_metrics_csv)


def pop_table(count):
    count = np.asarray(count, dtype=np.int64)
    n = len(count)
    return PopularityTable(count, np.log1p(count.astype(float)), np.arange(n // 5), np.arange(n // 5, n))


def test_deciles_partition_by_popularity():
    count = np.array([5, 9, 1, 9, 0, 3, 7, 2, 8, 4, 6, 1, 0, 2, 5, 3, 3, 9, 0, 1])
    buckets = popularity_deciles(pop_table(count))
    assert len(buckets) == 10
    assert sorted(np.concatenate(buckets).tolist()) == list(range(20))
    assert buckets[0].tolist() == [1, 3]  # ties broken by index
    flat = np.concatenate(buckets)
    assert np.all(np.diff(count[flat]) <= 0)


def test_single_popular_item_takes_the_top_decile():
    # item 0 sits at the origin and every history is item 0, so the query is 0
    E = np.zeros((50, 2))
    E[:, 0] = np.arange(50)
    model = ModelState(E, np.eye(2), 0.0)
    test = SampleSet.from_samples([Sample(k, k, np.array([0]), k % 50, k) for k in range(40)])
    table = decile_report(model, test, pop_table(np.arange(50)[::-1]), 1)
    assert table[0][2] == 1.0
    assert all(r[2] == 0.0 for r in table[1:])
    assert sum(r[3] for r in table) == pytest.approx(1.0, abs=1e-9)


def test_random_models_spread_exposure_evenly():
    # each draw is a fresh random model, so no item is favoured on average
    rng = np.random.default_rng(0)
    items, n, K, draws = 100, 20, 5, 400
    pop = pop_table(np.full(items, 4))
    shares = []
    for _ in range(draws):
        model = ModelState(rng.normal(size=(items, 4)), rng.normal(size=(4, 4)), 0.0)
        test = SampleSet.from_samples([Sample(k, k, rng.integers(0, items, size=3), 0, k) for k in range(n)])
        table = decile_report(model, test, pop, K)
        assert [r[1] for r in table] == [10] * 10
        shares.append([r[2] for r in table])
    shares = np.array(shares)
    se = shares.std(axis=0, ddof=1) / np.sqrt(draws)
    assert np.all(np.abs(shares.mean(axis=0) - 0.1) <= 3 * se)
    np.testing.assert_allclose(shares.sum(axis=1), 1.0, atol=1e-9)


def test_empty_test_set_rejected():
    model = ModelState(np.eye(3), np.eye(3), 0.0)
    with pytest.raises(ValueError):
        decile_report(model, SampleSet.from_samples([]), pop_table([1, 2, 3]), 1)


# -- costs -----------------------------------------------------------------

def test_fit_cost_constant():
    c_max, c_lsq = fit_cost_constant([10, 40], [10, 20])
    assert c_max == 2.0
    assert c_lsq == pytest.approx((100 + 800) / 500)
    assert fit_cost_constant([0, 0], [0, 0]) == (0.0, 0.0)


def test_empty_unlearn_contributes_nothing():
    counters = CostCounters(StageCost(121, 20), StageCost(), n_c=100, n_u=0, n=1000)
    summary = cost_report(counters)
    assert summary.unlearn_x == 0 and summary.c_max == pytest.approx(121 / 120)
    assert not summary.identify_violation and not summary.unlearn_violation


def test_violation_flagged_above_ten_percent():
    counters = CostCounters(StageCost(100, 0), StageCost(200, 0), n_c=100, n_u=100)
    summary = cost_report(counters)
    assert summary.c_lsq == 1.5
    assert not summary.identify_violation and summary.unlearn_violation


def test_cost_json_round_trip(tmp_path):
    counters = CostCounters(StageCost(131, 30), StageCost(45, 12), n_c=100, n_u=32, n=900, E=50)
    write_cost_json(counters, tmp_path / "cost.json")
    assert read_cost_json(tmp_path / "cost.json") == counters
    doc = json.loads((tmp_path / "cost.json").read_text())
    assert doc["grad_evals"] == 176 and doc["cg_iters_total"] == 42
    assert doc["bounds"]["identify_x"] == 130 and doc["bounds"]["unlearn_x"] == 44


def test_metrics_csv_round_trip(tmp_path):
    row = dict(hr=0.5, ndcg=0.25, arp=1.5, apt=0.1, hd=0.0, dp=0.3, f_pop=0.2, f_attr=float("nan"))
    rep = EvalReport()
    rep.rows[5] = row
    write_metrics_csv({"backbone": rep}, tmp_path / "m.csv")
    back = read_metrics_csv(tmp_path / "m.csv")["backbone"][5]
    assert {k: v for k, v in back.items() if k != "f_attr"} == {k: v for k, v in row.items() if k != "f_attr"}
    assert np.isnan(back["f_attr"])
