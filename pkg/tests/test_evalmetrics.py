import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import percentile_linear, precision, recall
from xbld.errors import EmptyMaskError, ShapeError
from xbld.evalmetrics import (DEFAULT_THRESHOLDS, EvalReport, MetricCurve, accuracy,
                              activation_precision, activation_recall, evaluate_model,
                              percentile_threshold, sweep, write_curves_csv)

EXPL = np.array([[0.9, 0.1], [0.2, 0.8]])
OBJ = np.array([[1, 1], [0, 0]])


class TestThreshold:
    def test_two_by_two_at_median(self):
        np.testing.assert_array_equal(percentile_threshold(EXPL, 50).values, [[1, 0], [0, 1]])

    def test_constant_map_keeps_everything(self):
        assert percentile_threshold(np.full((5, 5), 0.3), 90).values.all()

    def test_zero_keeps_everything(self):
        assert percentile_threshold(np.random.default_rng(0).random((6, 6)), 0).values.all()

    @pytest.mark.parametrize("t", [-1, 100, 150])
    def test_out_of_range(self, t):
        with pytest.raises(ValueError):
            percentile_threshold(EXPL, t)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 99))
    def test_cut_matches_oracle(self, seed, t):
        vals = np.random.default_rng(seed).random((6, 7))
        kept = percentile_threshold(vals, t).values
        np.testing.assert_array_equal(kept, vals >= percentile_linear(vals, t))


class TestApAr:
    def test_two_by_two(self):
        assert activation_precision(EXPL, OBJ, 50) == 0.5
        assert activation_recall(EXPL, OBJ, 50) == 0.5

    def test_perfect_explanation(self):
        expl = OBJ.astype(float)
        assert activation_precision(expl, OBJ, 50) == 1.0
        assert activation_recall(expl, OBJ, 50) == 1.0

    def test_everything_kept(self):
        obj = np.zeros((4, 4))
        obj[:2] = 1
        flat = np.ones((4, 4))
        assert activation_precision(flat, obj, 70) == 0.5
        assert activation_recall(flat, obj, 70) == 1.0

    def test_empty_object_mask(self):
        assert activation_precision(EXPL, np.zeros((2, 2)), 50) == 0.0
        with pytest.raises(EmptyMaskError):
            activation_recall(EXPL, np.zeros((2, 2)), 50)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            activation_precision(EXPL, np.zeros((3, 3)), 50)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 98))
    def test_recall_non_increasing_in_t(self, seed, t):
        rng = np.random.default_rng(seed)
        expl, obj = rng.random((8, 8)), rng.random((8, 8)) > 0.5
        obj[0, 0] = True
        assert activation_recall(expl, obj, t + 1) <= activation_recall(expl, obj, t)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 99))
    def test_within_unit_interval(self, seed, t):
        rng = np.random.default_rng(seed)
        expl, obj = rng.random((5, 5)), rng.random((5, 5)) > 0.3
        obj[2, 2] = True
        assert 0 <= activation_precision(expl, obj, t) <= 1
        assert 0 <= activation_recall(expl, obj, t) <= 1


class TestSweep:
    def test_against_loop_oracle(self):
        rng = np.random.default_rng(9)
        expls = [rng.random((8, 8)) for _ in range(6)]
        objs = [rng.random((8, 8)) > 0.5 for _ in range(6)]
        ar, ap = sweep(expls, objs)
        assert ar.thresholds == list(DEFAULT_THRESHOLDS) and len(ar.values) == 12
        for j, t in enumerate(DEFAULT_THRESHOLDS):
            assert ar.values[j] == pytest.approx(np.mean([recall(e, o, t) for e, o in zip(expls, objs)]),
                                                 rel=1e-12)
            assert ap.values[j] == pytest.approx(
                np.mean([precision(e, o, t) for e, o in zip(expls, objs)]), rel=1e-12)

    def test_empty_masks_excluded_from_recall_only(self):
        expls = [EXPL, EXPL]
        objs = [OBJ, np.zeros((2, 2))]
        ar, ap = sweep(expls, objs, [50])
        assert ar.n_instances == [1] and ap.n_instances == [2]
        assert ar.values == [0.5] and ap.values == [0.25]

    def test_misaligned(self):
        with pytest.raises(ValueError):
            sweep([EXPL], [])

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            MetricCurve("AR", [50, 40], [0.1, 0.2], [1, 1])

    def test_curves_csv(self, tmp_path):
        ar, ap = sweep([EXPL], [OBJ], [40, 50], method="xbl_d")
        write_curves_csv([ar, ap], tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "method,metric,threshold,value,n_instances"
        assert len(lines) == 5


class TestAccuracy:
    def test_perfect_and_chance(self):
        labels = np.arange(100) % 4
        images = np.zeros((100, 2))
        assert accuracy(lambda x: np.eye(4)[labels[:len(x)]], images, labels) == 1.0
        constant = accuracy(lambda x: np.tile([1.0, 0, 0, 0], (len(x), 1)), images, labels)
        assert constant == 0.25

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy(lambda x: x, np.zeros((0, 2)), np.zeros(0))


def test_report_json_roundtrip(tmp_path):
    ar, ap = sweep([EXPL], [OBJ], [40, 50], method="rrr")
    rep = EvalReport(0.75, [ar, ap], "rrr", "fmnist", {"seed": 3})
    rep.to_json(tmp_path / "r.json")
    back = EvalReport.from_json(tmp_path / "r.json")
    assert back == rep
    with pytest.raises(ValueError):
        EvalReport(1.5, [])


def test_evaluate_model(trained, test_split):
    rep = evaluate_model(trained, test_split.subset(range(20)), thresholds=[40, 95])
    assert rep.method == "unrefined"
    assert rep.provenance["n_test"] == 20
    for c in rep.curves:
        assert len(c.values) == 2 and all(0 <= v <= 1 for v in c.values)
