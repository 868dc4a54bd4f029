import csv

import pytest

from ville.datagen import window_spans
from ville.evalkit import (
    DataError,
    MomentResult,
    RetrievalResult,
    ScoredSpan,
    average_precision,
    emit_report,
    mean_top_iou,
    moment_map,
    moment_recall_at_iou,
    oracle_seed_merge,
    random_window_baseline,
    rank_of,
    read_metrics_log,
    recall_at_k,
    token_histogram,
    write_csv,
)


class TestRetrievalMetrics:
    results = [RetrievalResult("q1", ["a", "b", "c"]), RetrievalResult("q2", ["c", "a", "b"])]
    truth = {"q1": "a", "q2": "b"}

    def test_recall(self):
        assert recall_at_k(self.results, self.truth, 1) == 0.5
        assert recall_at_k(self.results, self.truth, 2) == 0.5
        assert recall_at_k(self.results, self.truth, 3) == 1.0
        assert recall_at_k([], self.truth, 1) == 0.0

    def test_rank_of(self):
        assert rank_of(self.results[1], "b") == 3
        assert rank_of(self.results[1], "z") is None

    def test_errors(self):
        with pytest.raises(DataError):
            recall_at_k(self.results, {"q1": "a"}, 1)
        with pytest.raises(DataError):
            RetrievalResult("q", ["a", "a"])
        with pytest.raises(ValueError):
            recall_at_k(self.results, self.truth, 0)


class TestMomentMetrics:
    def test_recall_at_iou(self):
        rs = [
            MomentResult("q1", [ScoredSpan(0, 10, 1.0)], [(0, 10)]),
            MomentResult("q2", [ScoredSpan(0, 10, 1.0)], [(5, 15)]),
            MomentResult("q3", [], [(5, 15)]),
        ]
        assert moment_recall_at_iou(rs, 0.5) == pytest.approx(1 / 3)
        assert moment_recall_at_iou(rs, 0.3) == pytest.approx(2 / 3)
        assert mean_top_iou(rs) == pytest.approx((1 + 1 / 3 + 0) / 3)

    def test_truth_required(self):
        with pytest.raises(DataError):
            MomentResult("q", [ScoredSpan(0, 1)], [])

    def test_average_precision(self):
        preds = [ScoredSpan(0, 10, 0.9), ScoredSpan(20, 30, 0.8), ScoredSpan(40, 50, 0.7)]
        assert average_precision(preds, [(40, 50)], 0.5) == pytest.approx(1 / 3)
        assert average_precision(preds, [(0, 10), (40, 50)], 0.5) == pytest.approx((1 + 2 / 3) / 2)

    def test_duplicate_predictions_match_once(self):
        preds = [ScoredSpan(0, 10, 0.9), ScoredSpan(0, 10, 0.8)]
        assert average_precision(preds, [(0, 10)], 0.5) == 1.0
        assert average_precision(preds, [(0, 10), (0, 10)], 0.5) == 1.0

    def test_map_perfect_and_degenerate(self):
        perfect = [MomentResult("q", [ScoredSpan(3, 9, 1.0)], [(3, 9)])]
        assert moment_map(perfect) == pytest.approx(1.0)
        assert moment_map([MomentResult("q", [], [(3, 9)])]) == 0.0
        assert moment_map([]) == 0.0
        # IoU 0.6: counts for thresholds 0.5, 0.55, 0.6 only
        partial = [MomentResult("q", [ScoredSpan(0, 6, 1.0)], [(0, 10)])]
        assert moment_map(partial) == pytest.approx(0.3)


class TestOracle:
    def test_examples(self):
        assert oracle_seed_merge([0.1, 0.5, 0.9, 0.42, 0.3], 0.4, 0.5) == (1, 3)
        assert oracle_seed_merge([1.0], 0.4, 0.5) == (0, 0)
        assert oracle_seed_merge([0.9, 0.9, 0.1], 0.95, 1.0) == (0, 1)
        with pytest.raises(ValueError):
            oracle_seed_merge([], 0.4, 0.5)


def test_random_window_baseline():
    # duration 20, window 10 / stride 5: windows (0,10) (5,15) (10,20); truth (0,10) -> only one hits IoU 0.5
    spans_for = lambda d: window_spans(d, 10, 5)
    assert random_window_baseline([(20.0, (0.0, 10.0))], spans_for) == pytest.approx(1 / 3)
    assert random_window_baseline([(20.0, (0.0, 10.0))], spans_for, threshold=0.3) == pytest.approx(2 / 3)
    assert random_window_baseline([], spans_for) == 0.0


class TestOutputs:
    def test_header_only_csv(self, tmp_path):
        p = write_csv([], tmp_path / "m.csv", ["a", "b"])
        assert p.read_text() == "a,b\n"

    def test_csv_formatting_and_determinism(self, tmp_path):
        rows = [{"name": "x", "v": 1 / 3, "n": 2, "ok": True}, {"name": "y", "v": 0.5, "extra": None}]
        a = write_csv(rows, tmp_path / "a.csv")
        b = write_csv(rows, tmp_path / "b.csv")
        assert a.read_bytes() == b.read_bytes()
        parsed = list(csv.reader(a.read_text().splitlines()))
        assert parsed[0] == ["name", "v", "n", "ok", "extra"]
        assert parsed[1] == ["x", "0.333333", "2", "1", ""]
        assert not (tmp_path / "a.csv.tmp").exists()

    def test_histogram(self):
        assert token_histogram([3, 1, 3, 2, 3]) == {1: 1, 2: 1, 3: 3}
        assert list(token_histogram([5, 1])) == [1, 5]
        assert token_histogram([]) == {}

    def test_read_metrics_log(self, tmp_path):
        assert read_metrics_log(tmp_path / "none.jsonl") == []
        p = tmp_path / "log.jsonl"
        p.write_text('{"step": 0, "ret": 1.5}\n\n{"step": 1, "ret": 1.2}\n')
        assert [r["step"] for r in read_metrics_log(p)] == [0, 1]

    def test_emit_report(self, tmp_path):
        metrics = {
            "train_log": [{"stage": 1, "step": i, "lr": 0.1, "ret": 2.0 - i * 0.1, "cap": 1.0} for i in range(5)],
            "summary": {"ret/R@1": 0.5, "ret/R@5": 0.9},
            "token_counts": [1, 2, 2, 5],
        }
        written = {p.name for p in emit_report(metrics, tmp_path / "rep")}
        assert {"train_log.csv", "metrics.csv", "token_counts.csv"} <= written
        lines = (tmp_path / "rep" / "token_counts.csv").read_text().splitlines()
        assert lines == ["token_count,n", "1,1", "2,2", "5,1"]
        assert (tmp_path / "rep" / "train_log.csv").read_text().splitlines()[0] == "stage,step,lr,cap,ret"
        assert {"loss_curves.png", "recall_bars.png", "token_hist.png"} <= written

    def test_emit_report_empty(self, tmp_path):
        emit_report({}, tmp_path / "rep")
        assert (tmp_path / "rep" / "metrics.csv").read_text() == "\n"
