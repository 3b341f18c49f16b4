import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from alignrec.errors import TimestampOrderError, ValidationError
from alignrec.evaluation import (EvalReport, SplitSpec, StreamRunner, aggregate, evaluate, make_splits,
                                 measure_latency, paired_ttest, sample_candidates)
from alignrec.metrics import hit_at_k, metrics_from_ranks, ndcg_at_k, positive_rank, recall_at_k
from alignrec.types import Interactions


def test_hit_examples():
    ranked = list(range(20))
    assert hit_at_k(ranked, 0, 10) == 1
    assert hit_at_k(ranked, 10, 10) == 0


def test_ndcg_examples():
    ranked = ["a", "b", "c", "d"]
    assert ndcg_at_k(ranked, "a", 10) == 1.0
    assert ndcg_at_k(ranked, "c", 10) == 0.5
    assert ndcg_at_k(ranked, "d", 3) == 0.0


def test_recall_examples():
    ranked = [1, 2, 3, 4, 5, 6]
    assert recall_at_k(ranked, {1, 2}, 3) == 1.0
    assert recall_at_k(ranked, {5, 6}, 3) == 0.0
    assert recall_at_k(ranked, {1, 3, 5, 6}, 3) == 0.5
    with pytest.raises(ValidationError):
        recall_at_k(ranked, set(), 3)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=30), st.integers(1, 10))
def test_positive_rank_matches_sort(scores, K):
    s = np.array([scores])
    ids = np.arange(len(scores))[None, :][:, ::-1].copy()
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], ids[0, j]))
    r = int(positive_rank(s, ids)[0])
    assert r == order.index(0) + 1
    m = metrics_from_ranks([r], ks=(K,))
    assert m[f"hit@{K}"] == float(r <= K)
    assert m[f"ndcg@{K}"] == (1.0 / math.log2(r + 1) if r <= K else 0.0)


def test_standard_split_sizes():
    inter = Interactions(np.zeros(10), np.arange(10), np.arange(10.0))
    s = make_splits(inter, SplitSpec("standard"), seed=0)
    assert (len(s.train), len(s.valid), len(s.test)) == (8, 1, 1)
    assert sorted(np.concatenate([s.train, s.valid, s.test]).tolist()) == list(range(10))


def test_streaming_split_partition():
    inter = Interactions(np.zeros(100), np.arange(100) % 7, np.arange(100.0))
    s = make_splits(inter, SplitSpec("streaming", window_size=10), seed=0)
    assert s.train.tolist() == list(range(70))
    assert [w.tolist() for w in s.windows] == [list(range(a, a + 10)) for a in range(70, 100, 10)]


def test_streaming_split_seconds_windows():
    inter = Interactions(np.zeros(20), np.zeros(20), np.arange(20.0) * 2.0)
    s = make_splits(inter, SplitSpec("streaming", ratios=(0.5, 0.5), window_mode="seconds", window_size=5.0))
    assert np.concatenate(s.windows).tolist() == list(range(10, 20))
    assert all(len(w) <= 3 for w in s.windows)


def test_streaming_split_rejects_disorder():
    inter = Interactions([0, 0, 0], [0, 1, 2], [1.0, 3.0, 2.0])
    with pytest.raises(TimestampOrderError):
        make_splits(inter, SplitSpec("streaming"))


def test_cold_split_puts_rare_items_in_test():
    items = np.array([0] * 10 + [1] * 10 + [2] * 2)
    inter = Interactions(np.zeros(22), items, np.arange(22.0))
    s = make_splits(inter, SplitSpec("cold_start", cold_threshold=5), seed=0)
    assert set(items[s.test]) == {2}
    assert set(items[np.concatenate([s.train, s.valid])]) == {0, 1}


def test_sample_candidates():
    rng = np.random.default_rng(0)
    c = sample_candidates(np.array([3, 7]), 20, 5, rng)
    assert c.shape == (2, 6)
    assert c[:, 0].tolist() == [3, 7]
    for row in c:
        assert len(set(row)) == 6
    full = sample_candidates(np.array([1]), 4, 99, rng)
    assert full.tolist() == [[1, 0, 2, 3]]


def test_paired_ttest():
    assert paired_ttest([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    t, p = paired_ttest([0.3, 0.5, 0.4, 0.6], [0.1, 0.2, 0.25, 0.3])
    assert t > 0 and 0 <= p < 0.05


def test_eval_report_roundtrip(tmp_path):
    rep = EvalReport({"n": 3, "hit@10": 0.5}, [{"window": 0, "n": 3, "hit@10": 0.5}], [], None, {"seed": 1})
    again = EvalReport.from_jsonl(rep.to_jsonl())
    assert again.to_jsonl() == rep.to_jsonl()
    rep.save(tmp_path / "r")
    assert (tmp_path / "r.jsonl").read_text() == rep.to_jsonl()


def test_aggregate_is_event_weighted():
    out = aggregate([{"window": 0, "n": 1, "hit@10": 1.0}, {"window": 1, "n": 3, "hit@10": 0.0}])
    assert out == {"n": 4, "hit@10": 0.25}


def test_evaluate_is_deterministic(trained_system, small_bundle):
    inter = small_bundle.interactions
    q = np.arange(2500, 2800)
    a = evaluate(trained_system, inter, q, np.arange(len(inter)), seed=3)
    b = evaluate(trained_system, inter, q, np.arange(len(inter)), seed=3)
    assert a.to_jsonl() == b.to_jsonl()
    assert 0.0 <= a.metrics["hit@10"] <= 1.0


def test_static_stream_equals_static_replay(trained_system, small_bundle):
    inter = small_bundle.interactions
    spec = SplitSpec("streaming", window_size=150)
    splits = make_splits(inter, spec, 0)
    a = StreamRunner(trained_system, inter, splits, spec, adapter=False, update=False).run()
    b = StreamRunner(trained_system, inter, splits, spec, adapter=False, update=False).run()
    assert a.windows == b.windows
    # with an untrained zero-output adapter, switching it on changes nothing
    c = StreamRunner(trained_system, inter, splits, spec, adapter=True, update=False).run()
    assert [w["hit@10"] for w in c.windows] == [w["hit@10"] for w in a.windows]


def test_latency_more_tokens_take_longer(trained_system):
    res = measure_latency(trained_system, [(20, 8), (80, 32)], reps=5, warmup=1, batch=64)
    assert res.rows[0]["tokens"] < res.rows[1]["tokens"]
    assert res.rows[0]["mean_s"] < res.rows[1]["mean_s"]
