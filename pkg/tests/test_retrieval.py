import json

import numpy as np
import pytest

import oracles
from sbirkit.retrieval import (
    build_index,
    metrics_record,
    recall_at_k,
    retrieve_topk,
    target_ranks,
    write_metrics_json,
)
from sbirkit.tensor import ShapeError


def test_query_on_gallery_row():
    g = np.random.default_rng(0).normal(size=(10, 4))
    assert retrieve_topk(build_index(g), g[3], 1) == [(3, 0.0)]


def test_full_ranking_is_permutation():
    g = np.random.default_rng(1).normal(size=(12, 3))
    ids = [f"p{i:02d}" for i in range(12)]
    got = [pid for pid, _ in retrieve_topk(build_index(g, ids), np.zeros(3), 12)]
    assert sorted(got) == ids


@pytest.mark.parametrize("seed", range(5))
def test_topk_matches_full_sort(seed):
    rng = np.random.default_rng(seed)
    g, q = rng.normal(size=(100, 16)), rng.normal(size=16)
    assert retrieve_topk(build_index(g), q, 10) == oracles.topk(g, list(range(100)), q, 10)


def test_ties_broken_by_photo_id():
    g = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    ids = [30, 10, 40, 20]
    got = retrieve_topk(build_index(g, ids), np.zeros(2), 4)
    assert [pid for pid, _ in got] == [10, 20, 30, 40]
    assert got == oracles.topk(g, ids, np.zeros(2), 4)


def test_target_ranks_agree_with_topk():
    rng = np.random.default_rng(2)
    g = np.round(rng.normal(size=(20, 3)), 1)
    g[7] = g[2]  # exact tie
    index = build_index(g, list(range(100, 120)))
    queries = np.concatenate([g[[2, 7]], rng.normal(size=(10, 3))])
    targets = [100 + int(t) for t in rng.integers(0, 20, len(queries))]
    ranks = target_ranks(index, queries, targets, chunk=3)
    for q, t, r in zip(queries, targets, ranks):
        order = [pid for pid, _ in retrieve_topk(index, q, 20)]
        assert order.index(t) == r


def test_recall_perfect_and_adversarial():
    g = np.random.default_rng(3).normal(size=(5, 4))
    index = build_index(g)
    assert recall_at_k(index, g, list(range(5)), 1) == 1.0
    assert recall_at_k(index, g, [1, 2, 3, 4, 0], 1) == 0.0


def test_recall_hand_placed_one_in_three():
    g = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    queries = np.array([[0.5, 0.0], [9.0, 0.0], [0.0, 1.0]])
    targets = [0, 2, 1]
    assert recall_at_k(build_index(g), queries, targets, 1) == pytest.approx(1 / 3)
    hits = [oracles.topk(g, [0, 1, 2], q, 1)[0][0] == t for q, t in zip(queries, targets)]
    assert hits == [True, False, False]


def test_recall_at_full_k_is_one():
    rng = np.random.default_rng(4)
    index = build_index(rng.normal(size=(8, 3)))
    assert recall_at_k(index, rng.normal(size=(6, 3)), [0, 1, 2, 3, 4, 5], 8) == 1.0


def test_cosine_metric():
    index = build_index(np.array([[1.0, 0.0], [0.0, 1.0]]), metric="cosine")
    assert retrieve_topk(index, np.array([5.0, 0.1]), 1)[0][0] == 0


def test_errors():
    index = build_index(np.ones((3, 2)) * np.arange(3)[:, None])
    with pytest.raises(ValueError):
        retrieve_topk(index, np.zeros(2), 0)
    with pytest.raises(ValueError):
        retrieve_topk(index, np.zeros(2), 4)
    with pytest.raises(ShapeError):
        retrieve_topk(index, np.zeros(3), 1)
    with pytest.raises(ValueError):
        build_index(np.ones((2, 2)), ["a", "a"])
    with pytest.raises(KeyError):
        recall_at_k(index, np.zeros((1, 2)), [99], 1)


def test_metrics_json(tmp_path):
    rec = metrics_record("r1", 1, 0.5, 50, 250, 3)
    write_metrics_json(tmp_path / "m.json", rec)
    assert json.loads((tmp_path / "m.json").read_text()) == rec
    assert set(rec) == {"run_id", "k", "recall", "n_gallery", "n_queries", "seed"}
