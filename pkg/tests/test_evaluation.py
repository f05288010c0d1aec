"""Metric oracles: hand-counted matrices, degenerate cases, report formats."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osvit.errors import ConfigError
from osvit.evaluation import (
    ConfusionMatrix,
    confusion,
    metrics,
    render_report,
    report_as_dict,
)

# hand-computed reference: 6 of 9 on the diagonal, every class 2/3
HAND_CM = ConfusionMatrix(((2, 1, 0), (0, 2, 1), (1, 0, 2)))


class TestConfusion:
    def test_perfect_prediction_is_diagonal(self):
        cm = confusion([0, 1, 2], [0, 1, 2])
        assert cm.counts == ((1, 0, 0), (0, 1, 0), (0, 0, 1))

    def test_hand_count(self):
        cm = confusion([0, 0, 1], [0, 1, 1])
        assert cm.counts[0][0] == 1
        assert cm.counts[0][1] == 1
        assert cm.counts[1][1] == 1
        assert cm.total == 3

    def test_empty_input_gives_zero_matrix(self):
        cm = confusion([], [])
        assert cm.total == 0
        with pytest.raises(ConfigError, match="empty"):
            metrics(cm)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="length"):
            confusion([0, 1], [0])

    def test_out_of_range_code_rejected(self):
        with pytest.raises(ConfigError, match="codes"):
            confusion([0, 3], [0, 0])
        with pytest.raises(ConfigError, match="codes"):
            confusion([0, 0], [-1, 0])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 60))
    def test_sample_order_is_irrelevant(self, seed, n):
        rng = np.random.default_rng(seed)
        true = rng.integers(0, 3, size=n)
        pred = rng.integers(0, 3, size=n)
        perm = rng.permutation(n)
        assert confusion(true, pred) == confusion(true[perm], pred[perm])


class TestMetrics:
    def test_perfect_classifier_scores_one(self):
        report = metrics(confusion([0, 1, 2, 1], [0, 1, 2, 1]))
        assert report.accuracy == 1.0
        assert report.precision == (1.0, 1.0, 1.0)
        assert report.recall == (1.0, 1.0, 1.0)
        assert report.f1 == (1.0, 1.0, 1.0)
        assert report.macro_f1 == 1.0

    def test_hand_computed_matrix_is_two_thirds_everywhere(self):
        report = metrics(HAND_CM)
        assert report.accuracy == 2 / 3
        assert report.precision == (2 / 3, 2 / 3, 2 / 3)
        assert report.recall == (2 / 3, 2 / 3, 2 / 3)
        assert report.f1 == (2 / 3, 2 / 3, 2 / 3)
        assert report.macro_precision == 2 / 3
        assert report.macro_recall == 2 / 3
        assert report.macro_f1 == 2 / 3

    def test_never_predicted_class_gets_zero_precision(self):
        # no prediction ever lands in column 2
        report = metrics(confusion([2, 2, 0], [0, 1, 0]))
        assert report.precision[2] == 0.0
        assert report.recall[2] == 0.0
        assert report.f1[2] == 0.0

    def test_single_class_truth_recall_equals_accuracy(self):
        report = metrics(confusion([1, 1, 1, 1], [1, 0, 1, 2]))
        assert report.recall[1] == report.accuracy == 0.5

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_macro_is_the_arithmetic_mean_to_full_precision(self, seed):
        rng = np.random.default_rng(seed)
        true = rng.integers(0, 3, size=40)
        pred = rng.integers(0, 3, size=40)
        report = metrics(confusion(true, pred))
        assert report.macro_precision == sum(report.precision) / 3
        assert report.macro_recall == sum(report.recall) / 3
        assert report.macro_f1 == sum(report.f1) / 3
        assert 0.0 <= report.accuracy <= 1.0
        assert all(0.0 <= v <= 1.0 for v in report.precision + report.recall + report.f1)

    def test_accuracy_is_exact_trace_over_total(self):
        report = metrics(HAND_CM)
        assert report.accuracy == 6 / 9
        assert report.total == 9


class TestRenderReport:
    def test_perfect_case_text(self):
        cm = confusion([0, 1, 2], [0, 1, 2])
        text = render_report(metrics(cm), cm, format="text")
        assert "accuracy: 100.0%" in text
        assert "Long" in text and "Medium" in text and "Short" in text

    def test_hand_case_text_accuracy_line(self):
        text = render_report(metrics(HAND_CM), HAND_CM, format="text")
        assert "accuracy: 66.7%" in text

    def test_json_round_trips_losslessly(self):
        report = metrics(HAND_CM, partition="test")
        doc = render_report(report, HAND_CM, format="json")
        parsed = json.loads(doc)
        assert parsed == json.loads(json.dumps(parsed))
        assert parsed["accuracy"] == report.accuracy
        assert parsed["confusion_matrix"] == [[2, 1, 0], [0, 2, 1], [1, 0, 2]]
        assert parsed["macro"]["f1"] == report.macro_f1
        assert [c["code"] for c in parsed["classes"]] == [0, 1, 2]
        assert parsed["partition"] == "test"
        assert parsed["samples"] == 9

    def test_dict_schema_fields(self):
        doc = report_as_dict(metrics(HAND_CM, partition="train"), HAND_CM)
        assert set(doc) == {"partition", "samples", "accuracy", "confusion_matrix",
                            "classes", "macro"}
        assert set(doc["classes"][0]) == {"code", "name", "precision", "recall", "f1"}

    def test_unknown_format_rejected(self):
        with pytest.raises(ConfigError, match="format"):
            render_report(metrics(HAND_CM), HAND_CM, format="yaml")

    def test_text_contains_matrix_rows(self):
        text = render_report(metrics(HAND_CM), HAND_CM, format="text")
        lines = text.splitlines()
        matrix_lines = [ln for ln in lines if ln.startswith(("0 Long", "1 Medium", "2 Short"))]
        assert len(matrix_lines) == 3
        assert matrix_lines[0].split()[-3:] == ["2", "1", "0"]
