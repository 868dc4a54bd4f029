"""Evaluation protocols on a synthetic corpus: text-to-video retrieval,
moment localization, two-stage re-ranking and composed retrieval."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .datagen import SyntheticVideo, WindowConfig, window_spans
from .embedhead import video_prefix
from .evalkit import (
    MomentResult,
    RetrievalResult,
    mean_top_iou,
    moment_map,
    moment_recall_at_iou,
    random_window_baseline,
    recall_at_k,
)
from .inference import (
    EmbeddingIndex,
    MergeConfig,
    index_search,
    localize,
    rerank,
    window_embeddings,
)
from .model import ViLLE
from . import vocab as V


@dataclass
class RetrievalRun:
    results: list[RetrievalResult]
    truth: dict[str, str]
    token_counts: list[int]
    metrics: dict


def _ranked(sims: np.ndarray, ids: Sequence[str]) -> list[str]:
    order = np.lexsort((np.asarray(ids), -sims))
    return [ids[i] for i in order]


def evaluate_retrieval(model: ViLLE, videos: Sequence[SyntheticVideo], vocab, stride: int) -> RetrievalRun:
    """Caption -> video over the given gallery; query id = video id."""
    model.eval()
    ids = [v.id for v in videos]
    vid, counts = model.embed_videos([v.input_frames(stride) for v in videos])
    txt = model.embed_texts([v.caption(vocab) for v in videos])
    sims = (txt.double() @ vid.double().T).numpy()
    results = [RetrievalResult(q, _ranked(sims[i], ids)) for i, q in enumerate(ids)]
    truth = {q: q for q in ids}
    metrics = {f"R@{k}": recall_at_k(results, truth, k) for k in (1, 5, 10)}
    metrics["token_mean"] = float(np.mean(counts))
    return RetrievalRun(results, truth, counts, metrics)


def caption_nll(model: ViLLE, videos: Sequence[SyntheticVideo], vocab, stride: int, batch_size: int = 64) -> float:
    """Per-token teacher-forced caption NLL (caption + EOS after the video prompt)."""
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(videos), batch_size):
            chunk = videos[i : i + batch_size]
            prefixes = [video_prefix(v.input_frames(stride), model.cfg.head.fixed_tokens) for v in chunk]
            sums, counts = model.nll(prefixes, [v.caption(vocab) + [V.EOS] for v in chunk])
            total += float(sums.double().sum())
            n += int(counts.sum())
    return total / n


def localization_queries(videos: Sequence[SyntheticVideo], vocab) -> list[tuple[SyntheticVideo, list[int], tuple[float, float]]]:
    return [(v, a.caption_tokens, a.span) for v in videos if v.flags.loc for a in v.annotations(vocab)]


def evaluate_localization(
    model: ViLLE,
    videos: Sequence[SyntheticVideo],
    vocab,
    stride: int,
    window_cfg: WindowConfig | None = None,
    merge_cfg: MergeConfig | None = None,
    limit: int | None = None,
) -> tuple[list[MomentResult], dict]:
    window_cfg = window_cfg or WindowConfig()
    merge_cfg = merge_cfg or MergeConfig()
    queries = localization_queries(videos, vocab)[:limit]
    cache: dict[str, tuple] = {}
    results = []
    for n, (video, text, span) in enumerate(queries):
        if video.id not in cache:
            cache[video.id] = window_embeddings(model, video, window_cfg, stride)
        preds = localize(video, text, model, window_cfg, merge_cfg, stride, window_cache=cache[video.id])
        results.append(MomentResult(f"{video.id}#{n}", preds, [span]))
    baseline = random_window_baseline(
        [(v.duration_s, span) for v, _, span in queries],
        lambda d: window_spans(d, window_cfg.window_s, window_cfg.stride_s),
    )
    metrics = {
        "R@1@0.5": moment_recall_at_iou(results, 0.5),
        "R@1@0.7": moment_recall_at_iou(results, 0.7),
        "mAP": moment_map(results),
        "mIoU": mean_top_iou(results),
        "baseline@0.5": baseline,
        "n_queries": len(results),
    }
    return results, metrics


def evaluate_rerank(
    model: ViLLE, videos: Sequence[SyntheticVideo], vocab, stride: int, first: RetrievalRun, K: int = 25
) -> tuple[list[RetrievalResult], dict]:
    by_id = {v.id: v for v in videos}
    out = []
    for r in first.results:
        cap = by_id[r.query_id].caption(vocab)
        out.append(RetrievalResult(r.query_id, [i for i, _ in rerank(cap, r.ranked_ids, by_id, model, K, stride)]))
    metrics = {f"R@{k}": recall_at_k(out, first.truth, k) for k in (1, 5, 10)}
    return out, metrics


def evaluate_composed(model: ViLLE, corpus, split: str = "test") -> dict:
    """Source video + change text -> edited target, gallery = sources and targets of the split."""
    stride = corpus.config.frame_stride
    lookup = corpus.by_id()
    triplets = [t for t in corpus.composed if lookup[t.source_id].split == split]
    if not triplets:
        return {"R@1": 0.0, "R@5": 0.0, "random": 0.0, "n_queries": 0}
    gallery = [v for v in corpus.videos + corpus.targets if v.split == split]
    embs, _ = model.embed_videos([v.input_frames(stride) for v in gallery])
    index = EmbeddingIndex([v.id for v in gallery], embs.double().numpy())
    src_frames = [lookup[t.source_id].input_frames(stride) for t in triplets]
    q = model.embed_texts([t.change_tokens for t in triplets], src_frames)
    results = [RetrievalResult(t.source_id, [i for i, _ in index_search(index, q[n], 5)]) for n, t in enumerate(triplets)]
    truth = {t.source_id: t.target_id for t in triplets}
    row = {v: i for i, v in enumerate(index.ids)}
    sims = q.double().numpy() @ index.matrix.T
    beats = [sims[n, row[t.target_id]] > sims[n, row[t.source_id]] for n, t in enumerate(triplets)]
    # sanity probe: the source's own caption as the modifier should retrieve the source
    own = model.embed_texts([lookup[t.source_id].caption(corpus.vocab) for t in triplets], src_frames)
    self_hits = [index_search(index, own[n], 1)[0][0] == t.source_id for n, t in enumerate(triplets)]
    return {
        "R@1": recall_at_k(results, truth, 1),
        "R@5": recall_at_k(results, truth, 5),
        "random": 1.0 / len(gallery),
        "target_over_source": float(np.mean(beats)),
        "self_R@1": float(np.mean(self_hits)),
        "n_queries": len(triplets),
    }
