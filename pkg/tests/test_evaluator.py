import json
import time

import numpy as np
import pytest
import scipy.special
import scipy.stats

from coex.evaluator import (
    LatencyReport,
    benchmark_latency,
    f1,
    regularized_incomplete_beta,
    score_triples,
    t_test,
    triples_to_payload,
)
from coex.tagger import Span, Triple


def test_score_triples_hand_counts():
    predictions = [
        [("丹参", "treats", "头痛"), ("丹参", "treats", "眩晕")],
        [("当归", "composition", "当归片")],
        [],
    ]
    gold = [
        [("丹参", "treats", "头痛")],
        [("当归", "composition", "当归片"), ("川芎", "composition", "当归片")],
        [("甘草", "flavor", "甘")],
    ]
    report = score_triples(predictions, gold)
    assert report.true_positives == 2
    assert report.predicted == 3
    assert report.gold == 4
    assert report.precision == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(0.5)
    assert report.f1 == pytest.approx(2 * (2 / 3) * 0.5 / (2 / 3 + 0.5))


def test_score_triples_strips_whitespace_and_collapses_duplicates():
    predictions = [[(" 丹参 ", "treats", "头痛"), ("丹参", "treats", "头痛")]]
    gold = [[("丹参", "treats", "头痛")]]
    report = score_triples(predictions, gold)
    assert report.predicted == 1
    assert report.true_positives == 1
    assert report.f1 == 1.0


def test_score_triples_accepts_triple_objects():
    predictions = [[Triple("丹参", "treats", "头痛", Span(1, 2), Span(5, 6))]]
    gold = [[("丹参", "treats", "头痛")]]
    assert score_triples(predictions, gold).f1 == 1.0


def test_score_triples_no_predictions_gives_zero_precision():
    report = score_triples([[], []], [[("a", "b", "c")], []])
    assert report.precision == 0.0
    assert report.recall == 0.0
    assert report.f1 == 0.0


def test_score_triples_length_mismatch():
    with pytest.raises(ValueError):
        score_triples([[]], [[], []])


def test_f1_values():
    assert f1(0.0, 0.0) == 0.0
    assert f1(1.0, 1.0) == 1.0
    assert f1(0.906, 0.924) == pytest.approx(0.914911, abs=5e-7)


def test_incomplete_beta_against_scipy():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = float(rng.uniform(0.1, 20.0))
        b = float(rng.uniform(0.1, 20.0))
        x = float(rng.uniform(0.0, 1.0))
        ours = regularized_incomplete_beta(a, b, x)
        ref = float(scipy.special.betainc(a, b, x))
        assert abs(ours - ref) < 1e-10, (a, b, x)


def test_incomplete_beta_edges_and_symmetry():
    assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
    assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0
    lhs = regularized_incomplete_beta(2.5, 4.0, 0.3)
    rhs = 1.0 - regularized_incomplete_beta(4.0, 2.5, 0.7)
    assert abs(lhs - rhs) < 1e-12
    with pytest.raises(ValueError):
        regularized_incomplete_beta(0.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        regularized_incomplete_beta(1.0, 1.0, 1.5)


def test_t_test_matches_scipy_across_random_samples():
    rng = np.random.default_rng(13)
    for trial in range(50):
        na = int(rng.integers(2, 12))
        nb = int(rng.integers(2, 12))
        a = rng.normal(loc=rng.uniform(-1, 1), scale=rng.uniform(0.1, 2.0), size=na)
        b = rng.normal(loc=rng.uniform(-1, 1), scale=rng.uniform(0.1, 2.0), size=nb)
        ours = t_test(a.tolist(), b.tolist())
        ref = scipy.stats.ttest_ind(a, b, equal_var=True)
        assert ours.statistic == pytest.approx(float(ref.statistic), abs=1e-10), trial
        assert ours.pvalue == pytest.approx(float(ref.pvalue), abs=1e-10), trial
        assert ours.df == na + nb - 2


def test_t_test_zero_variance_cases():
    same = t_test([2.0, 2.0, 2.0], [2.0, 2.0])
    assert same.statistic == 0.0
    assert same.pvalue == 1.0
    with pytest.raises(ValueError, match="zero variance"):
        t_test([2.0, 2.0], [3.0, 3.0])


def test_t_test_requires_two_observations_each():
    with pytest.raises(ValueError):
        t_test([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        t_test([], [])


def test_triples_to_payload_shapes():
    triples = [
        Triple("丹参", "treats", "头痛", Span(1, 2), Span(5, 6)),
        Triple("甘草", "flavor", "甘"),
    ]
    payload = triples_to_payload(triples)
    assert payload[0] == {
        "subject": "丹参",
        "predicate": "treats",
        "object": "头痛",
        "subject_span": [1, 2],
        "object_span": [5, 6],
    }
    assert payload[1] == {"subject": "甘草", "predicate": "flavor", "object": "甘"}


def test_benchmark_latency_statistics_recompute():
    triples = [Triple("丹参", "treats", "头痛", Span(1, 2), Span(5, 6))]
    calls = []

    def infer(text):
        calls.append(text)
        time.sleep(0.001)
        return triples

    texts = ["丹参主治头痛。", "短句。"]
    report = benchmark_latency(infer, texts, iterations=3, warmup=1)
    assert report.requests == 6
    assert len(calls) == 7
    assert len(report.latencies_ms) == 6
    lat = np.asarray(report.latencies_ms)
    assert report.mean_ms == pytest.approx(float(lat.mean()), rel=1e-9)
    assert report.max_ms == pytest.approx(float(lat.max()), rel=1e-9)
    assert report.p50_ms == pytest.approx(float(np.percentile(lat, 50)), rel=1e-9)
    assert report.p95_ms == pytest.approx(float(np.percentile(lat, 95)), rel=1e-9)
    assert all(v >= 1.0 for v in report.latencies_ms)

    req = sum(
        len(json.dumps({"text": t}, ensure_ascii=False).encode("utf-8")) for t in texts
    ) * 3
    resp = len(
        json.dumps({"triples": triples_to_payload(triples)}, ensure_ascii=False).encode("utf-8")
    ) * 6
    assert report.mean_request_bytes == pytest.approx(req / 6)
    assert report.mean_response_bytes == pytest.approx(resp / 6)


def test_benchmark_latency_validation():
    with pytest.raises(ValueError):
        benchmark_latency(lambda t: [], [], iterations=1)
    with pytest.raises(ValueError):
        benchmark_latency(lambda t: [], ["x"], iterations=0)
    report = benchmark_latency(lambda t: [], ["x"], iterations=1, warmup=0)
    assert isinstance(report, LatencyReport)
    assert report.requests == 1
