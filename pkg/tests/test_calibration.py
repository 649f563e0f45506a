import itertools
import math
import random

import numpy as np
import pytest

from oracles import exhaustive_calibration, random_instance, toy_space
from fflreport.calibration import (
    CalibrationError,
    OperatingPoints,
    ScoreMatrix,
    apply_thresholds,
    calibrate,
    f1_scores,
    label_auc,
    loss,
    merge_patterns,
    read_score_csv,
    write_score_csv,
)
from fflreport.patterndb import LabelSpace, LabelSpaceMismatch, PatternVector


def mats(s, t):
    s, t = np.asarray(s, float), np.asarray(t, float)
    ids = tuple(f"i{k}" for k in range(s.shape[0]))
    keys = tuple(f"<anatomical|yes|f{k}>" for k in range(s.shape[1]))
    return ScoreMatrix(ids, keys, s), ScoreMatrix(ids, keys, t)


def test_f1_empty_empty_is_one():
    assert f1_scores(np.zeros((1, 3)), np.zeros((1, 3))).tolist() == [1.0]
    assert f1_scores(np.array([[1, 0]]), np.array([[0, 1]])).tolist() == [0.0]


def test_separable_reaches_zero():
    s, t = mats([[0.9, 0.1], [0.2, 0.8], [0.7, 0.6]], [[1, 0], [0, 1], [1, 1]])
    p = calibrate(s, t)
    assert p.achieved_loss == 0.0
    assert (f1_scores(s.scores >= np.array(p.thresholds), t.scores) == 1).all()


def test_all_half_all_positive():
    s, t = mats([[0.5, 0.5], [0.5, 0.5]], [[1, 1], [1, 1]])
    p = calibrate(s, t)
    assert all(x <= 0.5 for x in p.thresholds)
    assert p.achieved_loss == 0.0


def test_five_by_three_matches_sweep_over_observed_scores():
    # instance for which the descent reaches the global optimum (checked against the sweep)
    rng = np.random.default_rng(0)
    s = np.round(rng.random((5, 3)), 2)
    t = (rng.random((5, 3)) < 0.5).astype(float)
    sm, tm = mats(s, t)
    p = calibrate(sm, tm)
    grids = [sorted(set(s[:, l]) | {0.0, 1.0}) for l in range(3)]
    best = min(loss(s, t, th) for th in itertools.product(*grids))
    assert p.achieved_loss == pytest.approx(best, abs=1e-12)


def test_descent_never_worse_than_init():
    from fflreport.calibration import _label_f1_init

    rng = random.Random(2)
    for _ in range(300):
        s, t = random_instance(rng)
        sm, tm = mats(s, t)
        for mode in ("image", "label"):
            p = calibrate(sm, tm, mode=mode)
            assert p.achieved_loss <= loss(s, t, _label_f1_init(s, t), mode) + 1e-15
            assert p.achieved_loss == pytest.approx(loss(s, t, p.thresholds, mode))
            assert p.achieved_loss >= exhaustive_calibration(s, t, (0.0, 0.25, 0.5, 0.75, 1.0), mode) - 1e-12


def test_mismatched_files():
    s, _ = mats([[0.5]], [[1]])
    t = ScoreMatrix(("other",), s.label_keys, np.array([[1.0]]))
    with pytest.raises(CalibrationError):
        calibrate(s, t)


def test_scores_outside_unit_interval():
    with pytest.raises(CalibrationError):
        mats([[1.5]], [[1]])


def test_non_binary_truth():
    s, t = mats([[0.5]], [[0.5]])
    with pytest.raises(CalibrationError):
        calibrate(s, t)


def test_csv_and_json_round_trip(tmp_path):
    s, t = mats([[0.9, 0.1], [0.2, 0.8]], [[1, 0], [0, 1]])
    write_score_csv(s, tmp_path / "s.csv")
    again = read_score_csv(tmp_path / "s.csv")
    assert again.image_ids == s.image_ids and np.array_equal(again.scores, s.scores)
    p = calibrate(s, t)
    p.save(tmp_path / "th.json")
    assert OperatingPoints.load(tmp_path / "th.json") == p


def test_bad_csv(tmp_path):
    (tmp_path / "bad.csv").write_text("id,a\nx,0.1\n")
    with pytest.raises(CalibrationError, match="image_id"):
        read_score_csv(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text("image_id,a\nx,zz\n")
    with pytest.raises(CalibrationError, match="line 2"):
        read_score_csv(tmp_path / "bad2.csv")


# -- thresholding and merging -----------------------------------------------------


def space3():
    return toy_space()


def points_for(space, thresholds):
    return OperatingPoints(space.keys, tuple(thresholds), 0.0)


def test_apply_thresholds_boundary():
    sp = space3()
    n = len(sp)
    row = np.zeros(n)
    row[0], row[1] = 0.9, 0.5
    q = apply_thresholds(row, points_for(sp, [0.5] * n), sp)
    assert q.set_indices() == [0, 1]
    assert apply_thresholds(np.zeros(n), points_for(sp, [0.5] * n), sp).set_indices() == []


def test_apply_thresholds_monotone():
    sp = space3()
    rng = random.Random(8)
    n = len(sp)
    for _ in range(200):
        row = [rng.random() for _ in range(n)]
        th = [rng.random() for _ in range(n)]
        base = set(apply_thresholds(row, points_for(sp, th), sp).set_indices())
        l = rng.randrange(n)
        th2 = list(th)
        th2[l] = min(1.0, th[l] + rng.random())
        assert set(apply_thresholds(row, points_for(sp, th2), sp).set_indices()) <= base


def test_apply_thresholds_unknown_key():
    sp = space3()
    p = OperatingPoints(("<device|yes|pacemaker>",), (0.5,), 0.0)
    with pytest.raises(LabelSpaceMismatch):
        apply_thresholds([0.9], p, sp)


def fine_space():
    keys = ("<anatomical|yes|opacity>", "<anatomical|yes|pleural_effusion>",
            "<anatomical|yes|opacity|laterality:left>")
    return LabelSpace(keys, (0.6, 0.7, 0.6), (1, 1, 1), (0, 1))


def test_merge_core_without_fine():
    sp = fine_space()
    q = merge_patterns(PatternVector.from_indices(3, [0]), PatternVector.zeros(3), sp)
    assert q.set_indices() == [0]


def test_merge_fine_implies_core():
    sp = fine_space()
    q = merge_patterns(PatternVector.from_indices(3, [0]), PatternVector.from_indices(3, [2]), sp)
    assert q.set_indices() == [2]


def test_merge_zero_and_stray():
    sp = fine_space()
    assert merge_patterns(PatternVector.zeros(3), PatternVector.zeros(3), sp).set_indices() == []
    with pytest.raises(LabelSpaceMismatch):
        merge_patterns(PatternVector.from_indices(3, [2]), PatternVector.zeros(3), sp)


def test_auc():
    s = np.array([[0.9], [0.1], [0.5]])
    t = np.array([[1], [0], [1]])
    assert label_auc(s, t) == [1.0]
    assert math.isnan(label_auc(s, np.ones((3, 1)))[0])
