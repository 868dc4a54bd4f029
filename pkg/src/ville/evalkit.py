"""Retrieval and moment metrics, brute-force oracles and CSV/plot reports.

All metric arithmetic runs in float64.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class DataError(ValueError):
    pass


@dataclass
class RetrievalResult:
    query_id: str
    ranked_ids: list[str]

    def __post_init__(self):
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise DataError(f"duplicate candidates for query {self.query_id}")


@dataclass
class ScoredSpan:
    start_s: float
    end_s: float
    score: float = 0.0


@dataclass
class MomentResult:
    query_id: str
    predictions: list  # objects with start_s, end_s, score
    truths: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.truths:
            raise DataError(f"query {self.query_id} has no truth span")


def _iou(a, b) -> float:
    # kept local so metrics do not depend on the data module
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def recall_at_k(results: Sequence[RetrievalResult], truth_map: Mapping[str, str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        return 0.0
    hits = 0
    for r in results:
        if r.query_id not in truth_map:
            raise DataError(f"no truth for query {r.query_id}")
        hits += truth_map[r.query_id] in r.ranked_ids[:k]
    return hits / len(results)


def rank_of(result: RetrievalResult, truth: str) -> int | None:
    try:
        return result.ranked_ids.index(truth) + 1
    except ValueError:
        return None


def moment_recall_at_iou(results: Sequence[MomentResult], threshold: float = 0.5) -> float:
    if not results:
        return 0.0
    hits = 0
    for r in results:
        if not r.predictions:
            continue
        p = r.predictions[0]
        hits += any(_iou((p.start_s, p.end_s), t) >= threshold for t in r.truths)
    return hits / len(results)


def mean_top_iou(results: Sequence[MomentResult]) -> float:
    vals = [max(_iou((r.predictions[0].start_s, r.predictions[0].end_s), t) for t in r.truths) if r.predictions else 0.0 for r in results]
    return float(np.mean(vals)) if vals else 0.0


def average_precision(predictions, truths, threshold: float) -> float:
    """AP of score-ranked predictions; each truth may be matched once."""
    preds = sorted(predictions, key=lambda p: -p.score)
    used = [False] * len(truths)
    tp, ap = 0, 0.0
    for rank, p in enumerate(preds, 1):
        best, best_j = -1.0, -1
        for j, t in enumerate(truths):
            if not used[j]:
                v = _iou((p.start_s, p.end_s), t)
                if v > best:
                    best, best_j = v, j
        if best_j >= 0 and best >= threshold:
            used[best_j] = True
            tp += 1
            ap += tp / rank
    return ap / len(truths)


def moment_map(results: Sequence[MomentResult], thresholds: Sequence[float] = MAP_THRESHOLDS) -> float:
    if not results:
        return 0.0
    per_t = [np.mean([average_precision(r.predictions, r.truths, t) for r in results]) for t in thresholds]
    return float(np.mean(per_t))


def oracle_seed_merge(scores: Sequence[float], tau_merge: float, alpha: float) -> tuple[int, int]:
    """Literal per-neighbour rule evaluation, independent of the inference module."""
    if len(scores) == 0:
        raise ValueError("no window scores")
    seed = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[seed]:
            seed = i
    accepted = {seed}
    for direction in (-1, 1):
        i = seed + direction
        while 0 <= i < len(scores):
            passes_abs = scores[i] >= tau_merge
            passes_rel = scores[i] >= alpha * scores[seed]
            if not (passes_abs or passes_rel):
                break
            accepted.add(i)
            i += direction
    return min(accepted), max(accepted)


def random_window_baseline(
    truths: Iterable[tuple[float, tuple[float, float]]], spans_for: callable, threshold: float = 0.5
) -> float:
    """Expected R@1@IoU when one window is picked uniformly from the grid.

    ``truths`` yields (duration, span); ``spans_for(duration)`` returns the grid.
    """
    vals = []
    for duration, span in truths:
        grid = spans_for(duration)
        vals.append(sum(_iou(w, span) >= threshold for w in grid) / len(grid))
    return float(np.mean(vals)) if vals else 0.0


# -- reports ------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return "" if v is None else str(v)


def write_csv(rows: Sequence[Mapping], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    """Atomic CSV write with a deterministic column order (first-seen, then sorted extras)."""
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_metrics_log(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def token_histogram(counts: Sequence[int]) -> dict[int, int]:
    out: dict[int, int] = {}
    for c in counts:
        out[int(c)] = out.get(int(c), 0) + 1
    return dict(sorted(out.items()))


def emit_report(metrics: Mapping, path: str | Path) -> list[Path]:
    """Write CSVs and plots under ``path``.

    ``metrics`` may hold ``train_log`` (list of step dicts), ``summary`` (flat
    dict or list of rows) and ``token_counts`` (list of ints). Plotting problems
    only cost the images.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    train = list(metrics.get("train_log", []))
    written.append(write_csv(train, out / "train_log.csv", _train_columns(train)))
    summary = metrics.get("summary", [])
    summary = [summary] if isinstance(summary, Mapping) else list(summary)
    written.append(write_csv(summary, out / "metrics.csv"))
    hist = token_histogram(metrics.get("token_counts", []))
    written.append(write_csv([{"token_count": k, "n": v} for k, v in hist.items()], out / "token_counts.csv", ["token_count", "n"]))
    try:
        written += _plots(train, summary, hist, out)
    except Exception as exc:  # noqa: BLE001 - plots are optional
        log.warning("plot generation failed, CSV only: %s", exc)
    return written


def _train_columns(rows):
    fixed = ["stage", "step", "lr", "loss"]
    extra = sorted({k for r in rows for k in r} - set(fixed))
    return [c for c in fixed if any(c in r for r in rows)] + extra if rows else fixed


def _plots(train, summary, hist, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    if train:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        keys = sorted({k for r in train for k, v in r.items() if k not in ("stage", "step", "lr") and isinstance(v, (int, float))})
        for k in keys:
            xs = [i for i, r in enumerate(train) if k in r]
            ax.plot(xs, [train[i][k] for i in xs], label=k, lw=0.8)
        ax.set_xlabel("logged step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        paths.append(out / "loss_curves.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    recall_keys = [k for r in summary for k in r if "R@" in k]
    if summary and recall_keys:
        keys = sorted(set(recall_keys))
        fig, ax = plt.subplots(figsize=(6, 3.5))
        width = 0.8 / len(summary)
        for i, r in enumerate(summary):
            ax.bar(np.arange(len(keys)) + i * width, [float(r.get(k, 0.0)) for k in keys], width, label=str(r.get("name", i)))
        ax.set_xticks(np.arange(len(keys)) + 0.4 - width / 2)
        ax.set_xticklabels(keys, fontsize=6, rotation=45, ha="right")
        ax.legend(fontsize=7)
        fig.tight_layout()
        paths.append(out / "recall_bars.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    if hist:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(list(hist), list(hist.values()))
        ax.set_xlabel("embedding tokens")
        ax.set_ylabel("videos")
        fig.tight_layout()
        paths.append(out / "token_hist.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    return paths
