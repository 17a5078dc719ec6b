import itertools
import json

import numpy as np
import pytest

from fddm.data import OCT, DatasetManifest, ImageRecord
from fddm.errors import ConfigError, DataError, UndefinedMetricError
from fddm.evaluation import (
    TABLE_COLUMNS,
    EyePrediction,
    average_precision,
    ensemble_eye,
    evaluate,
    make_report,
    majority_minority_split,
    predict_images,
    roc_auc,
    threshold_metrics,
)
from fddm.model import BackboneConfig, init_params


# Brute-force references, deliberately naive.

def ap_rank_walk(scores, truth):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])  # sorted() is stable
    hits, total = 0, 0.0
    for k, i in enumerate(order, start=1):
        if truth[i]:
            hits += 1
            total += hits / k
    return total / sum(truth)


def auc_pairs(scores, truth):
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    win = 0.0
    for p in pos:
        for n in neg:
            win += 1.0 if p > n else 0.5 if p == n else 0.0
    return win / (len(pos) * len(neg))


def random_instances(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        L = int(rng.integers(2, 51))
        # coarse grid forces ties
        scores = np.round(rng.random(L), int(rng.integers(1, 4)))
        truth = (rng.random(L) < rng.uniform(0.1, 0.9)).astype(int)
        yield scores, truth


def test_ap_worked_example():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)


def test_ap_perfect_and_all_positive():
    assert average_precision([0.9, 0.8, 0.1, 0.05], [1, 1, 0, 0]) == 1.0
    assert average_precision([0.1, 0.7, 0.3], [1, 1, 1]) == 1.0


def test_ap_no_positives():
    with pytest.raises(UndefinedMetricError):
        average_precision([0.1, 0.2], [0, 0])


def test_ap_matches_rank_walk():
    for scores, truth in random_instances(1000, 0):
        if truth.sum() == 0:
            continue
        assert abs(average_precision(scores, truth) - ap_rank_walk(list(scores), list(truth))) < 1e-9


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.75
    assert roc_auc([0.9, 0.8, 0.2], [1, 1, 0]) == 1.0
    assert roc_auc([0.5] * 4, [1, 0, 1, 0]) == 0.5


def test_auc_single_class():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_enumeration():
    for scores, truth in random_instances(1000, 1):
        if truth.sum() in (0, truth.size):
            continue
        assert abs(roc_auc(scores, truth) - auc_pairs(list(scores), list(truth))) < 1e-9


def test_ap_auc_invariant_under_cube():
    for scores, truth in random_instances(200, 2):
        if truth.sum() in (0, truth.size):
            continue
        s = scores - 0.5
        assert average_precision(s ** 3, truth) == pytest.approx(average_precision(s, truth), abs=1e-12)
        assert roc_auc(s ** 3, truth) == pytest.approx(roc_auc(s, truth), abs=1e-12)


# -- threshold metrics -------------------------------------------------------

def test_threshold_perfect():
    t = np.array([[1, 0], [0, 1], [1, 1]])
    m = threshold_metrics(t, t)
    assert m.sensitivity.tolist() == [1, 1] and m.specificity.tolist() == [1, 1] and m.f1.tolist() == [1, 1]


def test_threshold_all_negative():
    m = threshold_metrics([[0], [0], [0]], [[1], [0], [0]])
    assert m.sensitivity[0] == 0 and m.specificity[0] == 1


def test_threshold_confusion_arithmetic():
    # TP, FP, FN, TN
    m = threshold_metrics([[1], [1], [0], [0]], [[1], [0], [1], [0]])
    assert (m.sensitivity[0], m.specificity[0], m.f1[0]) == (0.5, 0.5, 0.5)


def test_threshold_zero_denominator_flagged():
    m = threshold_metrics([[0], [0]], [[0], [0]], ["x"])
    assert m.sensitivity[0] == 0 and any("sensitivity" in f for f in m.flags)


# -- eye ensemble --------------------------------------------------------------

def test_ensemble_examples():
    (e,) = ensemble_eye({"e": [[0.2], [0.9]]})
    assert e.scores[0] == 0.9 and e.decisions[0] == 1
    (e,) = ensemble_eye({"e": [[0.3, 0.6]]})
    assert e.scores.tolist() == [0.3, 0.6]
    (e,) = ensemble_eye({"e": [[0.1], [0.4], [0.49]]})
    assert e.decisions[0] == 0


def test_ensemble_order_invariant(rng):
    probs = rng.random((4, 3))
    a = ensemble_eye({"e": probs})[0]
    b = ensemble_eye({"e": probs[::-1]})[0]
    np.testing.assert_array_equal(a.scores, b.scores)


def test_ensemble_empty_group():
    with pytest.raises(DataError):
        ensemble_eye({"e": np.zeros((0, 3))})


# -- majority / minority -------------------------------------------------------

def _manifest_with_counts(n_total, positives):
    recs = []
    for i in range(n_total):
        labels = tuple(int(i < p) for p in positives)
        recs.append(ImageRecord(f"r{i}", f"e{i}", f"p{i}", OCT, labels, (0.0,)))
    return DatasetManifest(recs, len(positives), [f"c{k}" for k in range(len(positives))])


def test_majority_minority_table_counts():
    # Image counts of the OCT row: DR 502 / 1435 and RVO 34 / 1435
    m = _manifest_with_counts(1435, [502, 34])
    assert majority_minority_split(m) == ([0], [1])


def test_exactly_ten_percent_is_minority():
    assert majority_minority_split(_manifest_with_counts(100, [10, 11])) == ([1], [0])


# -- report --------------------------------------------------------------------

def _preds_and_manifest(rng, n_eyes=30, C=4, perfect=False):
    recs, preds = [], []
    for e in range(n_eyes):
        truth = (rng.random(C) < 0.4).astype(int)
        truth[e % C] = 1
        if e % 5 == 0:
            truth[:] = 0
        truth[(e + 1) % C] = 0 if e % 3 else truth[(e + 1) % C]
        recs.append(ImageRecord(f"r{e}", f"e{e:03d}", f"p{e}", OCT, tuple(truth.tolist()), (0.0,)))
        scores = truth * 0.8 + 0.1 if perfect else rng.random(C)
        preds.append(EyePrediction(f"e{e:03d}", scores, (scores >= 0.5).astype(int), truth))
    return preds, DatasetManifest(recs, C, [f"c{k}" for k in range(C)])


def test_report_internal_consistency(rng):
    preds, m = _preds_and_manifest(rng)
    rep = make_report(preds, m)
    defined = [a for a in rep.ap if a is not None]
    assert abs(rep.map - np.mean(defined)) < 1e-12
    groups = set(rep.majority) | set(rep.minority)
    assert groups == set(range(4)) and not set(rep.majority) & set(rep.minority)
    for v in rep.aggregates().values():
        assert v is None or 0 <= v <= 1


def test_report_perfect_predictor(rng):
    preds, m = _preds_and_manifest(rng, perfect=True)
    rep = make_report(preds, m)
    for k in TABLE_COLUMNS:
        assert rep.aggregates()[k] == 1.0


def test_report_flags_undefined_class(rng):
    preds, m = _preds_and_manifest(rng, C=3)
    for p in preds:
        p.truth = p.truth.copy()
        p.truth[2] = 0
    recs = [ImageRecord(r.record_id, r.eye_id, r.patient_id, r.modality, r.labels[:2] + (0,), r.features)
            for r in m.records]
    rep = make_report(preds, DatasetManifest(recs, 3, m.class_names))
    assert rep.ap[2] is None and rep.auc[2] is None
    assert any("AP undefined" in f for f in rep.flags)


def test_report_missing_eye(rng):
    preds, m = _preds_and_manifest(rng)
    with pytest.raises(DataError):
        make_report(preds[1:], m)


def test_map_class_permutation_invariant(rng):
    preds, m = _preds_and_manifest(rng)
    perm = [2, 0, 3, 1]
    pp = [EyePrediction(p.eye_id, p.scores[perm], p.decisions[perm], p.truth[perm]) for p in preds]
    recs = [ImageRecord(r.record_id, r.eye_id, r.patient_id, r.modality, tuple(r.labels[k] for k in perm), r.features)
            for r in m.records]
    a = make_report(preds, m).map
    b = make_report(pp, DatasetManifest(recs, 4, [m.class_names[k] for k in perm])).map
    assert a == pytest.approx(b, abs=1e-12)


def test_report_serialization(tmp_path, rng):
    preds, m = _preds_and_manifest(rng)
    rep = make_report(preds, m)
    doc = json.loads(rep.to_json())
    assert doc["schema"] == "fddm-eval-report/1"
    header = rep.to_csv().splitlines()[0].split(",")
    assert header == ["row", "MAP", "Sensitivity", "Specificity", "F1", "AUC"]
    jp, cp = rep.save(tmp_path / "r")
    assert open(jp).read() == rep.to_json()


# -- inference ----------------------------------------------------------------

def test_predict_images(tiny_dataset):
    cfg = BackboneConfig(32, (8,), 4, 6)
    p = init_params(cfg, 0)
    probs, recs = predict_images(p, tiny_dataset, OCT)
    assert probs.shape == (len(recs), 6)
    assert ((probs > 0) & (probs < 1)).all()
    probs2, _ = predict_images(p, tiny_dataset, OCT)
    assert probs.tobytes() == probs2.tobytes()
    for k in p.arrays:
        p.arrays[k][:] = 0
    np.testing.assert_array_equal(predict_images(p, tiny_dataset, OCT)[0], 0.5)


def test_predict_images_mismatch(tiny_dataset):
    with pytest.raises(ConfigError):
        predict_images(init_params(BackboneConfig(32, (8,), 4, 5), 0), tiny_dataset)
    with pytest.raises(ConfigError):
        predict_images(init_params(BackboneConfig(31, (8,), 4, 6), 0), tiny_dataset)


def test_evaluate_end_to_end(tiny_dataset):
    rep = evaluate(init_params(BackboneConfig(32, (8,), 4, 6), 0), tiny_dataset)
    assert rep.num_eyes == len(tiny_dataset.eyes())


def test_exhaustive_any_positive_rule():
    # every eye of 1-4 images, every boolean pattern of "image indicates disease"
    for k in range(1, 5):
        for pattern in itertools.product([0, 1], repeat=k):
            probs = [[0.9 if b else 0.1] for b in pattern]
            (e,) = ensemble_eye({"e": probs})
            assert e.decisions[0] == int(any(pattern))
