import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glpnet.metrics import ConfusionMatrix, cm_update, compute_metrics, metrics_report
from glpnet.tensor import ContractError
from tests import oracles


def cm_from(counts):
    cm = ConfusionMatrix(len(counts))
    cm.counts[...] = counts
    return cm


def test_perfect_prediction_is_diagonal():
    label = np.array([[0, 1], [1, 0]])
    cm = ConfusionMatrix(2)
    cm_update(cm, label, label)
    assert cm.counts.tolist() == [[2, 0], [0, 2]]
    m = compute_metrics(cm)
    assert m["acc"] == m["macc"] == m["miou"] == 1.0


def test_all_ignored_leaves_matrix_unchanged():
    cm = ConfusionMatrix(3)
    cm_update(cm, np.zeros((4, 4), int), np.full((4, 4), 255))
    assert cm.total == 0
    with pytest.raises(ContractError):
        compute_metrics(cm)


def test_hand_example_balanced():
    m = compute_metrics(cm_from([[3, 1], [1, 3]]))
    assert m["acc"] == 0.75 and m["macc"] == 0.75
    assert m["miou"] == pytest.approx(0.6, abs=1e-12)
    assert m["per_class_iou"] == [pytest.approx(0.6), pytest.approx(0.6)]


def test_hand_example_one_class_missed():
    m = compute_metrics(cm_from([[0, 2], [0, 2]]))
    assert m["per_class_iou"] == [0.0, 0.5]
    assert m["miou"] == 0.25


def test_absent_class_excluded():
    # class 2 never appears in labels or predictions
    m = compute_metrics(cm_from([[2, 0, 0], [0, 2, 0], [0, 0, 0]]))
    assert m["miou"] == 1.0 and m["per_class_iou"][2] is None


def test_out_of_range_ids_rejected():
    cm = ConfusionMatrix(2)
    with pytest.raises(ValueError):
        cm_update(cm, np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValueError):
        cm_update(cm, np.array([0, 1]), np.array([0, 3]))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_matches_counting_oracle(k, n, seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, k, n)
    label = rng.integers(0, k, n)
    label[rng.random(n) < 0.2] = 255
    cm = ConfusionMatrix(k)
    cm_update(cm, pred, label)
    np.testing.assert_array_equal(cm.counts, oracles.confusion_loops(pred, label, k))
    assert cm.total == int((label != 255).sum())
    if cm.total:
        m = compute_metrics(cm)
        assert m["miou"] == pytest.approx(oracles.miou_by_sets(pred, label, k), abs=1e-12)
        for key in ("acc", "macc", "miou"):
            assert 0.0 <= m[key] <= 1.0


def test_batch_order_and_merge_invariance():
    rng = np.random.default_rng(3)
    batches = [(rng.integers(0, 4, (2, 5, 5)), rng.integers(0, 4, (2, 5, 5))) for _ in range(5)]
    fwd, rev = ConfusionMatrix(4), ConfusionMatrix(4)
    shards = [ConfusionMatrix(4) for _ in range(2)]
    for i, (p, l) in enumerate(batches):
        cm_update(fwd, p, l)
        cm_update(shards[i % 2], p, l)
    for p, l in reversed(batches):
        cm_update(rev, p, l)
    np.testing.assert_array_equal(fwd.counts, rev.counts)
    merged = shards[0].merge(shards[1])
    np.testing.assert_array_equal(merged.counts, fwd.counts)
    np.testing.assert_array_equal(shards[1].merge(shards[0]).counts, merged.counts)


def test_report_is_json():
    doc = json.loads(metrics_report(compute_metrics(cm_from([[3, 1], [1, 3]]))))
    assert set(doc) == {"acc", "macc", "miou", "per_class_iou"}
