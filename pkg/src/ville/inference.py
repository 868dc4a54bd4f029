"""Deployment-side protocols: exact embedding index, sliding-window moment
localization with seed-and-merge, Yes/No re-ranking and composed retrieval."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .datagen import SyntheticVideo, WindowConfig, window_spans
from .embedhead import EmbeddingVector, sparse_frames
from .model import ViLLE


class IndexBuildError(ValueError):
    pass


# -- index ---------------------------------------------------------------------


class EmbeddingIndex:
    """Brute-force cosine index; immutable after construction."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if list(ids).count(i) > 1})
            raise IndexBuildError(f"duplicate ids: {dup[:5]}")
        matrix = np.asarray(matrix, dtype=np.float64)
        matrix = matrix.reshape(len(ids), -1) if len(ids) else matrix.reshape(0, matrix.shape[-1] if matrix.ndim == 2 else 0)
        norms = np.linalg.norm(matrix, axis=1) if len(ids) else np.ones(0)
        if len(ids) and not np.allclose(norms, 1.0, atol=1e-4):
            raise IndexBuildError("index vectors must be unit-norm")
        self.ids = list(ids)
        self.matrix = matrix
        self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1]) if len(self.ids) else 0

    def __len__(self) -> int:
        return len(self.ids)


def index_build(items: Iterable[tuple[str, EmbeddingVector | torch.Tensor | np.ndarray]]) -> EmbeddingIndex:
    ids, rows = [], []
    for item_id, vec in items:
        v = vec.values if isinstance(vec, EmbeddingVector) else vec
        v = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
        ids.append(item_id)
        rows.append(v.astype(np.float64))
    matrix = np.stack(rows) if rows else np.zeros((0, 0))
    return EmbeddingIndex(ids, matrix)


def index_search(index: EmbeddingIndex, query, k: int) -> list[tuple[str, float]]:
    """Top-k (id, cosine) pairs, descending similarity, ties by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    q = query.values if isinstance(query, EmbeddingVector) else query
    q = q.detach().cpu().numpy() if torch.is_tensor(q) else np.asarray(q)
    q = q.astype(np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dim {q.shape} != index dim {index.dim}")
    sims = index.matrix @ (q / np.linalg.norm(q))
    order = np.lexsort((np.asarray(index.ids), -sims))
    return [(index.ids[i], float(sims[i])) for i in order[:k]]


def save_index(index: EmbeddingIndex, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "index.json").write_text(json.dumps({"ids": index.ids, "dim": index.dim, "count": len(index)}, indent=1))
    (d / "index.f32").write_bytes(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())
    return d


def load_index(directory: str | Path) -> EmbeddingIndex:
    d = Path(directory)
    meta = json.loads((d / "index.json").read_text())
    mat = np.frombuffer((d / "index.f32").read_bytes(), dtype="<f4").reshape(meta["count"], meta["dim"])
    return EmbeddingIndex(meta["ids"], mat.astype(np.float64))


# -- localization ------------------------------------------------------------------


@dataclass
class MergeConfig:
    tau_merge: float = 0.4
    alpha: float = 0.5
    center_correction: bool = True
    top_n: int = 1

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")


@dataclass
class MomentPrediction:
    video_id: str
    start_s: float
    end_s: float
    score: float

    def to_json(self, query: str | None = None) -> str:
        row = {"video_id": self.video_id, "query": query, "start_s": self.start_s, "end_s": self.end_s, "score": self.score}
        return json.dumps(row, sort_keys=True)


def window_clips(video: SyntheticVideo, cfg: WindowConfig | None = None) -> list[tuple[float, float]]:
    cfg = cfg or WindowConfig()
    return window_spans(video.duration_s, cfg.window_s, cfg.stride_s)


def seed_merge(scores: Sequence[float], cfg: MergeConfig) -> tuple[int, int]:
    """Inclusive window range grown from the best window.

    A neighbour joins if its score is >= tau_merge or >= alpha * seed score;
    growth on each side stops at the first neighbour failing both.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no window scores")
    seed = int(np.argmax(s))
    bar = min(cfg.tau_merge, cfg.alpha * s[seed])
    lo = seed
    while lo > 0 and s[lo - 1] >= bar:
        lo -= 1
    hi = seed
    while hi < s.size - 1 and s[hi + 1] >= bar:
        hi += 1
    return lo, hi


def merged_span(
    spans: Sequence[tuple[float, float]], lo: int, hi: int, seed: int, stride_s: float, correct: bool = True
) -> tuple[float, float]:
    """Union of accepted windows; non-seed boundary windows are trimmed by stride/2."""
    start, end = spans[lo][0], spans[hi][1]
    if correct:
        if lo != seed:
            start = min(start + stride_s / 2, spans[lo][1])
        if hi != seed:
            end = max(end - stride_s / 2, spans[hi][0])
        if start >= end:
            start, end = spans[lo][0], spans[hi][1]
    return float(start), float(end)


def segments_from_scores(
    spans: Sequence[tuple[float, float]], scores: Sequence[float], merge: MergeConfig, stride_s: float
) -> list[tuple[float, float, float]]:
    """Up to ``top_n`` (start, end, seed score) segments via repeated seed-merge on masked scores."""
    s = np.asarray(scores, dtype=np.float64).copy()
    out = []
    for _ in range(merge.top_n):
        if np.all(np.isneginf(s)):
            break
        lo, hi = seed_merge(s, merge)
        seed = int(np.argmax(s))
        start, end = merged_span(spans, lo, hi, seed, stride_s, merge.center_correction)
        out.append((start, end, float(s[seed])))
        s[lo : hi + 1] = -np.inf
    return out


def window_embeddings(model: ViLLE, video: SyntheticVideo, window_cfg: WindowConfig, stride: int):
    spans = window_clips(video, window_cfg)
    embs, counts = model.embed_videos([video.input_frames(stride, s) for s in spans])
    return spans, embs, counts


def localize(
    video: SyntheticVideo,
    query_text: Sequence[int],
    model: ViLLE,
    window_cfg: WindowConfig | None = None,
    merge_cfg: MergeConfig | None = None,
    frame_stride: int = 2,
    scorer: Callable[[list[tuple[float, float]]], Sequence[float]] | None = None,
    window_cache: tuple | None = None,
) -> list[MomentPrediction]:
    """Score every window against the contextual text embedding, then seed-merge.

    ``scorer`` replaces the model scoring (spans -> scores); ``window_cache`` lets a
    caller reuse (spans, embeddings) across queries on the same video.
    """
    window_cfg = window_cfg or WindowConfig()
    merge_cfg = merge_cfg or MergeConfig()
    if scorer is not None:
        spans = window_clips(video, window_cfg)
        scores = np.asarray(scorer(spans), dtype=np.float64)
    else:
        spans, embs, _ = window_cache or window_embeddings(model, video, window_cfg, frame_stride)
        ctx = sparse_frames(video.input_frames(frame_stride), model.cfg.context_frames)
        q = model.embed_texts([list(query_text)], [ctx])[0]
        scores = (embs @ q).double().numpy()
    segs = segments_from_scores(spans, scores, merge_cfg, window_cfg.stride_s)
    preds = []
    for start, end, score in segs:
        start, end = max(0.0, start), min(video.duration_s, end)
        preds.append(MomentPrediction(video.id, start, end, score))
    return preds


# -- two-stage retrieval ---------------------------------------------------------------


def matching_scores(model: ViLLE, frames_list: Sequence[torch.Tensor], caption: Sequence[int], batch_size: int = 64) -> list[float]:
    """logit(Yes) - logit(No) at the answer position for each (video, caption) pair."""
    out = []
    with torch.no_grad():
        for i in range(0, len(frames_list), batch_size):
            chunk = frames_list[i : i + batch_size]
            yes, no = model.match_logits(chunk, [list(caption)] * len(chunk))
            out += (yes - no).double().tolist()
    return out


def rerank(
    caption: Sequence[int],
    candidate_ids: Sequence[str],
    corpus: Mapping[str, SyntheticVideo],
    model: ViLLE | None,
    K: int = 25,
    frame_stride: int = 2,
    matcher: Callable[[Sequence[int], Sequence[str]], Sequence[float]] | None = None,
) -> list[tuple[str, float | None]]:
    """Re-order the first K candidates by matching score; the rest keep their order."""
    if K > len(candidate_ids):
        raise ValueError("K exceeds the candidate count")
    head = list(candidate_ids[:K])
    if matcher is not None:
        scores = list(matcher(caption, head))
    else:
        scores = matching_scores(model, [corpus[i].input_frames(frame_stride) for i in head], caption)
    order = sorted(range(len(head)), key=lambda j: (-scores[j], j))
    return [(head[j], float(scores[j])) for j in order] + [(i, None) for i in candidate_ids[K:]]


# -- composed retrieval ------------------------------------------------------------------


def retrieve_composed(
    source_video: SyntheticVideo,
    change_text: Sequence[int],
    index: EmbeddingIndex,
    model: ViLLE,
    k: int = 10,
    frame_stride: int = 2,
) -> list[tuple[str, float]]:
    if len(index) == 0:
        return []
    q = model.embed_texts([list(change_text)], [source_video.input_frames(frame_stride)])[0]
    return index_search(index, q, k)
