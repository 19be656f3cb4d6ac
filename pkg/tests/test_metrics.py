import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcar.metrics import (
    ConfusionCounts,
    assign_labels,
    average_precision,
    evaluate,
    mean_average_precision,
    prf_from_counts,
    prf_report,
)
from oracles import ap_bruteforce, prf_bruteforce, top3_bruteforce


def test_ap_perfect_and_hand_value():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.3], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 5, 17])
def test_ap_single_positive_ranked_last(n):
    labels = [0] * (n - 1) + [1]
    scores = list(range(n, 0, -1))
    assert average_precision(scores, labels) == pytest.approx(1 / n, abs=1e-15)


def test_ap_ties_keep_original_order():
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_ap_requires_positive():
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [0, 0])


def test_map_skips_absent_classes():
    labels = np.array([[1, 0], [0, 0], [1, 0]])
    scores = np.array([[0.9, 0.1], [0.1, 0.5], [0.8, 0.3]])
    m, ap, absent = mean_average_precision(scores, labels)
    assert m == 1.0 and absent == [1] and np.isnan(ap[1])


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(1, 50), C=st.integers(1, 8), seed=st.integers(0, 2**31),
    quantize=st.booleans(),
)
def test_ap_and_prf_match_bruteforce(n, C, seed, quantize):
    rng = np.random.default_rng(seed)
    scores = rng.random((n, C))
    if quantize:  # plenty of ties
        scores = np.round(scores * 4) / 4
    labels = (rng.random((n, C)) < 0.4).astype(int)
    m, ap, absent = mean_average_precision(scores, labels)
    for c in range(C):
        if labels[:, c].any():
            assert abs(ap[c] - ap_bruteforce(scores[:, c].tolist(), labels[:, c].tolist())) <= 1e-9
        else:
            assert c in absent
    for mode in ("threshold", "top3"):
        got = prf_report(scores, labels, 0.6, mode)
        pred = (scores > 0.6).astype(int).tolist() if mode == "threshold" else top3_bruteforce(scores.tolist())
        want = prf_bruteforce(pred, labels.tolist())
        for key in want:
            assert abs(got[key] - want[key]) <= 1e-9, (mode, key)


def test_worked_example():
    # preds {0}, {0,1}; truth {0,1}, {1}
    scores = np.array([[0.9, 0.2], [0.7, 0.8]])
    labels = np.array([[1, 1], [0, 1]])
    counts = ConfusionCounts.from_predictions(assign_labels(scores, 0.6), labels)
    assert counts.correct.tolist() == [1, 1]
    assert counts.predicted.tolist() == [2, 1]
    assert counts.truth.tolist() == [1, 2]
    r = prf_from_counts(counts)
    for key in ("OP", "OR", "OF1"):
        assert r[key] == pytest.approx(2 / 3, abs=1e-12)
    for key in ("CP", "CR", "CF1"):
        assert r[key] == pytest.approx(0.75, abs=1e-12)


def test_perfect_prediction_and_top3_exhaustive():
    labels = np.array([[1, 0, 1], [0, 1, 0]])
    r = prf_report(labels * 0.9 + 0.05, labels, 0.5)
    assert all(v == 1.0 for v in r.values())
    r = prf_report(np.random.default_rng(0).random((4, 3)), np.array([[1, 0, 0], [0, 1, 1], [1, 1, 1], [0, 0, 1]]), mode="top3")
    assert r["OR"] == 1.0


def test_threshold_is_strict_and_top3_ties_lower_index():
    assert assign_labels(np.array([[0.6, 0.61]])).tolist() == [[0, 1]]
    assert assign_labels(np.array([[0.5, 0.5, 0.5, 0.5]]), mode="top3").tolist() == [[1, 1, 1, 0]]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_ap_invariant_under_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(30)
    labels = (rng.random(30) < 0.3).astype(int)
    labels[0] = 1
    base = average_precision(scores, labels)
    assert average_precision(np.exp(3 * scores), labels) == pytest.approx(base, abs=1e-12)
    assert average_precision(scores ** 3 + 7, labels) == pytest.approx(base, abs=1e-12)


def test_map_of_random_scores_is_prevalence():
    rng = np.random.default_rng(11)
    prevalence = 0.3
    labels = (rng.random((10_000, 4)) < prevalence).astype(int)
    m, _, _ = mean_average_precision(rng.random((10_000, 4)), labels)
    assert abs(m - prevalence) <= 0.05


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 20), C=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_f1_between_precision_and_recall(n, C, seed):
    rng = np.random.default_rng(seed)
    r = prf_report(rng.random((n, C)), (rng.random((n, C)) < 0.5).astype(int), 0.6)
    for p, rc, f in (("OP", "OR", "OF1"), ("CP", "CR", "CF1")):
        assert all(0.0 <= r[k] <= 1.0 for k in (p, rc, f))
        if r[p] + r[rc] > 0:
            assert min(r[p], r[rc]) - 1e-12 <= r[f] <= max(r[p], r[rc]) + 1e-12


def test_report_json_is_stable():
    rng = np.random.default_rng(3)
    scores = rng.random((10, 3))
    labels = (rng.random((10, 3)) < 0.5).astype(int)
    labels[0] = 1
    a = evaluate(scores, labels, class_names=["a", "b", "c"]).to_json()
    b = evaluate(scores.copy(), labels.copy(), class_names=["a", "b", "c"]).to_json()
    assert a == b
    doc = json.loads(a)
    assert set(doc["all"]) == {"OP", "OR", "OF1", "CP", "CR", "CF1"}
    assert list(doc) == sorted(doc)
