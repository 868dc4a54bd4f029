"""Command-line entry point: ``ville <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error (missing corpus or
checkpoint, corrupt files), 4 runtime error, 5 output directory locked.
"""
from __future__ import annotations

import argparse
import contextlib
import itertools
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import pipeline as PL
from .datagen import ConfigError, corpus_checksum, load_corpus, save_corpus
from .embedhead import HeadVariant
from .evalkit import emit_report, read_metrics_log, write_csv
from .inference import index_build, index_search, load_index, localize, retrieve_composed, save_index
from .protocols import evaluate_localization, evaluate_retrieval
from .runconfig import ConfigKeyError, RunConfig, profile
from .trainer import (
    IntegrityError,
    MigrationError,
    StageConfig,
    StagePipelineError,
    TrainingError,
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    run_stage,
    save_checkpoint,
)

log = logging.getLogger("ville")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME, EXIT_LOCKED = 0, 2, 3, 4, 5

SWEEP_AXES = {
    "head-variant": [v.value for v in HeadVariant],
    "pooling-tokens": [8, 32, 64],
    "fixed-tokens": [0, 1, 5],
    "loc-grid": [(w, s, t) for w, s, t in itertools.product((5, 10, 15), (5, 10), (0.3, 0.4, 0.5)) if s <= w],
}


class DataMissing(RuntimeError):
    pass


class LockHeld(RuntimeError):
    pass


# -- helpers ----------------------------------------------------------------------


def atomic_write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


@contextlib.contextmanager
def out_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise LockHeld(f"{out} is in use by another command (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def resolve_config(args) -> RunConfig:
    if args.profile and args.profile != "default":
        cfg = profile(args.profile)
        if args.config:
            cfg = cfg.override(**json.loads(Path(args.config).read_text()))
        cfg = cfg.with_env()
    else:
        cfg = RunConfig.load(args.config)
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out is not None:
        top["out"] = args.out
    head = {}
    if getattr(args, "head", None):
        head["variant"] = args.head
    if getattr(args, "pooling_tokens", None) is not None:
        head["P"] = args.pooling_tokens
    if getattr(args, "fixed_embed_tokens", None) is not None:
        head["fixed_tokens"] = args.fixed_embed_tokens
    window = {k: v for k, v in (("window_s", args.window_s), ("stride_s", args.stride_s)) if v is not None}
    merge = {k: v for k, v in (("tau_merge", args.tau_merge), ("alpha", args.alpha)) if v is not None}
    ev = {"k": args.k} if getattr(args, "k", None) is not None else None
    return cfg.override(head=head or None, window=window or None, merge=merge or None, eval=ev, **top)


def corpus_dir(args, cfg: RunConfig) -> Path:
    return Path(args.corpus) if args.corpus else Path(cfg.out) / "corpus"


def need_corpus(args, cfg):
    d = corpus_dir(args, cfg)
    if not (d / "manifest.json").exists():
        raise DataMissing(f"no corpus at {d}; run `ville gen-data` first")
    return load_corpus(d)


def final_checkpoint_path(args, cfg: RunConfig) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    last = cfg.stage_configs()[-1].stage
    return Path(cfg.out) / f"stage{last}.ckpt"


def need_model(args, cfg):
    p = final_checkpoint_path(args, cfg)
    if not p.exists():
        raise DataMissing(f"checkpoint not found: expected {p}")
    return model_from_checkpoint(load_checkpoint(p))


def echo_config(cfg: RunConfig) -> None:
    atomic_write_text(Path(cfg.out) / "config.json", json.dumps(cfg.effective(), indent=1, sort_keys=True) + "\n")


def write_metrics(out: Path, name: str, metrics: dict) -> None:
    row = PL.public(metrics)
    atomic_write_text(out / f"{name}.json", json.dumps(row, indent=1, sort_keys=True) + "\n")
    write_csv([row], out / f"{name}.csv", sorted(row))


def _tokens(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    out = corpus_dir(args, cfg)
    corpus = PL.build_corpus(cfg)
    tmp = out.with_name(out.name + ".tmp")
    shutil.rmtree(tmp, ignore_errors=True)
    save_corpus(corpus, tmp)
    old = out.with_name(out.name + ".old")
    if out.exists():
        shutil.rmtree(old, ignore_errors=True)
        os.replace(out, old)
    os.replace(tmp, out)
    shutil.rmtree(old, ignore_errors=True)
    digest = corpus_checksum(out)
    atomic_write_text(Path(cfg.out) / "corpus.sha256", digest + "\n")
    print(f"corpus {out} videos={len(corpus.videos)} targets={len(corpus.targets)} sha256={digest}")


def cmd_train(args, cfg):
    corpus = need_corpus(args, cfg)
    out = Path(cfg.out)
    stages = cfg.stage_configs()
    if args.stage is not None:
        chosen = [s for s in stages if s.stage == args.stage] or [StageConfig.default(args.stage)]
        earlier = [out / f"stage{j}.ckpt" for j in range(args.stage - 1, 0, -1)]
        prev_path = next((p for p in earlier if p.exists()), None)
        if args.stage > 1 and prev_path is None and not args.from_scratch:
            raise StagePipelineError(f"stage {args.stage} needs an earlier stage checkpoint such as {earlier[-1]} (or --from-scratch)")
        if prev_path is not None:
            model = model_from_checkpoint(load_checkpoint(prev_path))
            prev = int(prev_path.stem.removeprefix("stage"))
        else:
            model, prev = PL.build_model(cfg), None
        log_path = out / "train_log.jsonl"
        # re-running a stage replaces its rows instead of appending duplicates
        kept = [r for r in read_metrics_log(log_path) if r.get("stage") != args.stage]
        atomic_write_text(log_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
        positions = {s.stage: n for n, s in enumerate(stages)}
        for sc in chosen:
            # same per-stage seed as a full run over the configured stages
            seed = cfg.seed * 1000 + positions.get(sc.stage, sc.stage - 1)
            res = run_stage(sc, corpus, model, seed, log_path, prev, args.from_scratch, out)
            save_checkpoint(out / f"stage{sc.stage}.ckpt", checkpoint_from_model(model, sc.stage, res.steps_done))
            print(f"stage {sc.stage} done: {res.steps_done} steps -> {out / f'stage{sc.stage}.ckpt'}")
        return
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    if stages[0].stage > 1 and not args.from_scratch:
        raise StagePipelineError(f"configured stages start at {stages[0].stage}; pass --from-scratch")
    run = PL.train(cfg, corpus, from_scratch=args.from_scratch, out_dir=out)
    for p in run.checkpoints:
        print(f"wrote {p}")


def cmd_embed(args, cfg):
    corpus = need_corpus(args, cfg)
    model = need_model(args, cfg)
    videos = corpus.split(args.split)
    embs, counts = model.embed_videos([v.input_frames(corpus.config.frame_stride) for v in videos])
    index = index_build((v.id, e) for v, e in zip(videos, embs))
    d = save_index(index, Path(cfg.out) / "index")
    atomic_write_text(d / "token_counts.json", json.dumps(dict(zip([v.id for v in videos], counts)), indent=1) + "\n")
    print(f"indexed {len(index)} videos (dim {index.dim}) -> {d}")


def cmd_retrieve(args, cfg):
    corpus = need_corpus(args, cfg)
    model = need_model(args, cfg)
    out = Path(cfg.out)
    k = cfg.eval_options()["k"]
    if args.query:
        idx_dir = out / "index"
        if not (idx_dir / "index.json").exists():
            raise DataMissing(f"no index at {idx_dir}; run `ville embed` first")
        q = model.embed_texts([_tokens(args.query)])[0]
        for rank, (vid, sim) in enumerate(index_search(load_index(idx_dir), q, k), 1):
            print(f"{rank}\t{vid}\t{sim:.6f}")
        return
    run = evaluate_retrieval(model, corpus.split(args.split), corpus.vocab, corpus.config.frame_stride)
    lines = [json.dumps({"query_id": r.query_id, "ranked": r.ranked_ids[:k]}) for r in run.results]
    atomic_write_text(out / "retrieval.jsonl", "\n".join(lines) + "\n")
    write_metrics(out, "retrieval_metrics", run.metrics)
    print(json.dumps(run.metrics, sort_keys=True))


def cmd_localize(args, cfg):
    corpus = need_corpus(args, cfg)
    model = need_model(args, cfg)
    out = Path(cfg.out)
    stride = corpus.config.frame_stride
    if args.video:
        video = corpus.by_id()[args.video]
        preds = localize(video, _tokens(args.query), model, cfg.window_config(), cfg.merge_config(), stride)
        for p in preds:
            print(p.to_json(args.query))
        return
    results, metrics = evaluate_localization(
        model, corpus.split(args.split), corpus.vocab, stride, cfg.window_config(), cfg.merge_config(),
        cfg.eval_options()["loc_limit"],
    )
    lines = [p.to_json(r.query_id) for r in results for p in r.predictions]
    atomic_write_text(out / "localization.jsonl", "\n".join(lines) + "\n")
    write_metrics(out, "localization_metrics", metrics)
    print(json.dumps(metrics, sort_keys=True))


def cmd_rerank(args, cfg):
    corpus = need_corpus(args, cfg)
    model = need_model(args, cfg)
    m = PL.evaluate(model, corpus, cfg, ("rerank",), args.split)
    write_metrics(Path(cfg.out), "rerank_metrics", m)
    print(json.dumps(PL.public(m), sort_keys=True))


def cmd_compose(args, cfg):
    corpus = need_corpus(args, cfg)
    model = need_model(args, cfg)
    if args.video:
        stride = corpus.config.frame_stride
        gallery = [v for v in corpus.videos + corpus.targets if v.split == args.split]
        embs, _ = model.embed_videos([v.input_frames(stride) for v in gallery])
        index = index_build((v.id, e) for v, e in zip(gallery, embs))
        hits = retrieve_composed(corpus.by_id()[args.video], _tokens(args.query), index, model, cfg.eval_options()["k"], stride)
        for rank, (vid, sim) in enumerate(hits, 1):
            print(f"{rank}\t{vid}\t{sim:.6f}")
        return
    m = PL.evaluate(model, corpus, cfg, ("composed",), args.split)
    write_metrics(Path(cfg.out), "composed_metrics", m)
    print(json.dumps(PL.public(m), sort_keys=True))


def cmd_eval(args, cfg):
    corpus = need_corpus(args, cfg)
    model = need_model(args, cfg)
    out = Path(cfg.out)
    m = PL.evaluate(model, corpus, cfg, PL.ALL_EVALS, args.split)
    atomic_write_text(out / "token_counts.json", json.dumps(m.get("_token_counts", [])) + "\n")
    write_metrics(out, "metrics", m)
    print(json.dumps(PL.public(m), sort_keys=True, indent=1))


def cmd_sweep(args, cfg):
    corpus = need_corpus(args, cfg)
    out = Path(cfg.out)
    values = SWEEP_AXES[args.axis]
    if args.values:
        parse = str if args.axis == "head-variant" else int
        values = [parse(v) for v in args.values.split(",")]
    rows = []
    if args.axis == "loc-grid":
        model = need_model(args, cfg)
        for w, s, t in values:
            c = cfg.override(window={"window_s": float(w), "stride_s": float(s)}, merge={"tau_merge": float(t)})
            m = PL.evaluate(model, corpus, c, ("localization",), args.split)
            rows.append({"axis": args.axis, "window_s": w, "stride_s": s, "tau_merge": t, **PL.public(m)})
            print(json.dumps(rows[-1]))
    else:
        key = {"head-variant": "variant", "pooling-tokens": "P", "fixed-tokens": "fixed_tokens"}[args.axis]
        for v in values:
            c = cfg.override(head={key: v})
            run = PL.train(c, corpus, from_scratch=args.from_scratch)
            m = PL.evaluate(run.model, corpus, c, ("retrieval", "caption"), args.split)
            rows.append({"axis": args.axis, "value": v, **PL.public(m)})
            print(json.dumps(rows[-1]))
    write_csv(rows, out / f"sweep_{args.axis}.csv")


def cmd_report(args, cfg):
    out = Path(cfg.out)
    summary = []
    for name in ("metrics", "retrieval_metrics", "localization_metrics", "rerank_metrics", "composed_metrics"):
        p = out / f"{name}.json"
        if p.exists():
            summary.append({"name": name, **json.loads(p.read_text())})
    counts_path = out / "token_counts.json"
    counts = json.loads(counts_path.read_text()) if counts_path.exists() else []
    if isinstance(counts, dict):
        counts = list(counts.values())
    written = emit_report(
        {"train_log": read_metrics_log(out / "train_log.jsonl"), "summary": summary, "token_counts": counts},
        out / "report",
    )
    for p in written:
        print(p)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "retrieve": cmd_retrieve,
    "localize": cmd_localize,
    "rerank": cmd_rerank,
    "compose": cmd_compose,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--profile", default="default", choices=["default", "fast"], help="base settings preset")
    common.add_argument("--seed", type=int, help="overrides VILLE_SEED and the config")
    common.add_argument("--out", help="output directory (overrides VILLE_OUT and the config)")
    common.add_argument("--corpus", help="corpus directory (default: OUT/corpus)")
    common.add_argument("--checkpoint", help="model checkpoint (default: OUT/stage<last>.ckpt)")
    common.add_argument("--split", default="test", choices=["train", "test"])
    common.add_argument("--stage", type=int, choices=[1, 2, 3])
    common.add_argument("--from-scratch", action="store_true", help="allow a later stage without its predecessor")
    common.add_argument("--k", type=int, help="re-rank depth / result count")
    common.add_argument("--window-s", type=float)
    common.add_argument("--stride-s", type=float)
    common.add_argument("--tau-merge", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--head", choices=[v.value for v in HeadVariant])
    common.add_argument("--pooling-tokens", type=int, help="P learned pooling tokens")
    common.add_argument("--fixed-embed-tokens", type=int, help="0 = adaptive (until EOS)")
    common.add_argument("--query", help="token ids, space or comma separated")
    common.add_argument("--video", help="video id for single-item localize/compose")
    common.add_argument("--axis", choices=sorted(SWEEP_AXES), default="head-variant")
    common.add_argument("--values", help="comma-separated sweep values")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ville", description="Toy unified generative + embedding video-language model")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigKeyError, ConfigError, ValueError, TypeError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % 2**32)
    out = Path(cfg.out)
    try:
        with out_lock(out):
            if args.command in ("gen-data", "train"):
                echo_config(cfg)
            t0 = time.time()
            COMMANDS[args.command](args, cfg)
            log.info("%s finished in %.1fs", args.command, time.time() - t0)
    except LockHeld as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (StagePipelineError, ConfigKeyError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataMissing, IntegrityError, MigrationError, KeyError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
