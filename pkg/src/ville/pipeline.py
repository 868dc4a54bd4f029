"""End-to-end run: corpus, staged training, checkpoints and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .datagen import Corpus, generate_corpus
from .model import ViLLE
from .protocols import (
    caption_nll,
    evaluate_composed,
    evaluate_localization,
    evaluate_rerank,
    evaluate_retrieval,
)
from .runconfig import RunConfig
from .trainer import checkpoint_from_model, run_stage, save_checkpoint

log = logging.getLogger(__name__)

ALL_EVALS = ("retrieval", "caption", "localization", "rerank", "composed")


@dataclass
class TrainedRun:
    model: ViLLE
    train_log: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def build_corpus(cfg: RunConfig) -> Corpus:
    return generate_corpus(cfg.corpus_config(), cfg.seed)


def build_model(cfg: RunConfig) -> ViLLE:
    torch.manual_seed(cfg.seed)
    return ViLLE(cfg.model_config())


def train(
    cfg: RunConfig,
    corpus: Corpus,
    model: ViLLE | None = None,
    previous_stage: int | None = None,
    from_scratch: bool = False,
    out_dir: str | Path | None = None,
    on_stage_end: Callable[[int, ViLLE], None] | None = None,
) -> TrainedRun:
    """Run every configured stage in order, chaining the stage guard."""
    model = model if model is not None else build_model(cfg)
    run = TrainedRun(model)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    prev = previous_stage
    for n, sc in enumerate(cfg.stage_configs()):
        log.info("stage %d: %d steps", sc.stage, sc.steps)
        res = run_stage(
            sc,
            corpus,
            model,
            seed=cfg.seed * 1000 + n,
            log_path=out / "train_log.jsonl" if out else None,
            previous_stage=prev,
            from_scratch=from_scratch,
            dump_dir=out,
        )
        run.train_log += res.metrics
        if out:
            run.checkpoints.append(
                save_checkpoint(out / f"stage{sc.stage}.ckpt", checkpoint_from_model(model, sc.stage, res.steps_done))
            )
        if on_stage_end:
            on_stage_end(sc.stage, model)
        prev = sc.stage
    return run


def evaluate(
    model: ViLLE, corpus: Corpus, cfg: RunConfig, which: Sequence[str] = ALL_EVALS, split: str = "test"
) -> dict:
    """Flat metrics dict; keys are prefixed by protocol."""
    unknown = set(which) - set(ALL_EVALS)
    if unknown:
        raise ValueError(f"unknown evaluations {sorted(unknown)}")
    opts = cfg.eval_options()
    videos = corpus.split(split)
    stride = corpus.config.frame_stride
    vocab = corpus.vocab
    model.eval()
    out: dict = {}
    first = None
    if "retrieval" in which or "rerank" in which:
        first = evaluate_retrieval(model, videos, vocab, stride)
        for k, v in first.metrics.items():
            out[f"ret/{k}"] = v
        counts = np.asarray(first.token_counts)
        n_events = np.asarray([len(v.events) for v in videos])
        out["ret/token_var"] = float(counts.var())
        for ne in (1, 5):
            sel = counts[n_events == ne]
            out[f"ret/token_mean_{ne}ev"] = float(sel.mean()) if sel.size else float("nan")
        out["_token_counts"] = [int(c) for c in counts]
    if "caption" in which:
        out["cap/nll_token"] = caption_nll(model, videos, vocab, stride)
    if "localization" in which:
        _, m = evaluate_localization(
            model, videos, vocab, stride, cfg.window_config(), cfg.merge_config(), opts["loc_limit"]
        )
        out.update({f"loc/{k}": v for k, v in m.items()})
    if "rerank" in which:
        _, m = evaluate_rerank(model, videos, vocab, stride, first, opts["k"])
        out.update({f"rerank/{k}": v for k, v in m.items()})
    if "composed" in which:
        out.update({f"comp/{k}": v for k, v in evaluate_composed(model, corpus, split).items()})
    return out


def public(metrics: dict) -> dict:
    """Drop bulky private entries (leading underscore) before writing a table row."""
    return {k: v for k, v in metrics.items() if not k.startswith("_")}
