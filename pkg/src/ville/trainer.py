"""Three-stage training pipeline and checkpoint container.

Stages 1 and 2 run joint captioning + retrieval with two forward passes per
step (video with caption teacher-forced, then captions alone). Stage 3 adds
QA, matching, hard-negative localization and composed retrieval, accumulating
gradients over every task minibatch before a single update.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import vocab as V
from .backbone import AdapterConfig, TokenSequence
from .datagen import (
    Corpus,
    MiningError,
    SyntheticVideo,
    WindowConfig,
    balance_by_keyword,
    keyword_records,
    make_multitask_batch,
    mine_hard_negatives,
)
from .embedhead import sparse_frames
from .model import ModelConfig, ViLLE
from .objectives import (
    info_nce,
    localization_from_similarities,
    matching_from_logits,
    retrieval_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VILLECKP"
CHECKPOINT_VERSION = 1
LOSS_KEYS = ("cap", "qa", "ret", "loc", "match", "compose")


class TrainingError(RuntimeError):
    pass


class StagePipelineError(RuntimeError):
    pass


class IntegrityError(RuntimeError):
    pass


class MigrationError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: int = 1
    steps: int = 3000
    base_lr: float = 2e-3
    warmup_steps: int = 200
    grad_accum: int = 1
    adapter_rank: int = 8
    adapter_scale: float = 1.0
    batch_size: int = 32
    loss_weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_KEYS})
    tasks: tuple = ("cap", "ret")
    weight_decay: float = 1e-5
    freeze_base: bool = False
    symmetric_ret: bool = False
    clip_prob: float = 0.25
    crop_prob: float = 0.0
    phase_jitter: bool = False
    hard_negatives: bool = False
    n_negatives: int = 2
    max_iou: float = 0.2
    detailed_captions: bool = False
    # extra match negatives: own caption with one symbol swapped, dropped or inserted
    match_perturbed: int = 0
    balance_min_occ: int = 30
    balance_cap: int = 500

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps must lie in [0, steps]")
        if self.grad_accum < 1 or self.batch_size < 1:
            raise ValueError("grad_accum and batch_size must be >= 1")
        unknown = set(self.tasks) - set(LOSS_KEYS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        self.loss_weights = {**{k: 1.0 for k in LOSS_KEYS}, **self.loss_weights}

    @classmethod
    def default(cls, stage: int, **overrides) -> "StageConfig":
        base = {
            1: dict(steps=3000, base_lr=2e-3, warmup_steps=200, adapter_rank=8, tasks=("cap", "ret")),
            2: dict(steps=500, base_lr=1e-3, warmup_steps=50, adapter_rank=8, tasks=("cap", "ret"),
                    detailed_captions=True, balance_min_occ=30, balance_cap=500),
            3: dict(steps=1000, base_lr=1e-3, warmup_steps=100, adapter_rank=4,
                    tasks=("cap", "qa", "ret", "loc", "match", "compose"), clip_prob=0.0),
        }[stage]
        base.update(overrides)
        return cls(stage=stage, **base)


def lr_schedule(step: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr`` over ``warmup_steps``, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


# -- batch helpers ----------------------------------------------------------------


@dataclass
class Sample:
    video: SyntheticVideo
    frames: torch.Tensor
    caption: list[int]


def _samples(videos, vocab, stride, rng, clip_prob, detailed, window=WindowConfig(), crop_prob=0.0, jitter=False):
    """Captioned inputs with optional augmentation.

    clip_prob: replace the video by one sliding-window clip and its clip caption.
    crop_prob: replace it by a random crop of at least half its length.
    jitter: start frame subsampling at a random offset in [0, stride).
    """
    out = []
    for v in videos:
        u = rng.random()
        span = None
        if u < clip_prob and v.duration_s > window.window_s:
            n_win = int((v.duration_s - window.window_s) // window.stride_s) + 1
            a = float(rng.integers(n_win)) * window.stride_s
            span = (a, min(a + window.window_s, v.duration_s))
        elif u < clip_prob + crop_prob:
            length = float(rng.integers(int(v.duration_s // 2), int(v.duration_s) + 1))
            a = float(rng.integers(0, int(v.duration_s - length) + 1))
            span = (a, a + length)
        if span is not None:
            cap = v.clip_caption(vocab, span)
            if cap:
                out.append(Sample(v, v.input_frames(stride, span), cap))
                continue
        if jitter and not detailed:
            phase = float(rng.integers(stride))
            out.append(Sample(v, v.input_frames(stride, (phase, v.duration_s)), v.caption(vocab)))
            continue
        cap = v.detailed_caption(vocab, stride) if detailed else v.caption(vocab)
        out.append(Sample(v, v.input_frames(stride), cap))
    return out


def _mean_nll(sums: torch.Tensor) -> torch.Tensor:
    return sums.mean()


# -- steps ------------------------------------------------------------------------------


def stage12_step(model: ViLLE, samples: Sequence[Sample], cfg: StageConfig) -> tuple[torch.Tensor, dict]:
    """Joint captioning + retrieval loss for one micro-batch (no optimizer update).

    Pass 1 feeds frames + ``<|vid_embed|>`` + caption: caption NLL and the video
    embedding come from the same forward computation. Pass 2 embeds the captions.
    """
    frames = [s.frames for s in samples]
    caps = [s.caption for s in samples]
    sums, counts, video_embs = model.video_caption_pass(frames, caps)
    report = {"cap": float(sums.detach().mean()), "cap_token": float(sums.detach().sum() / counts.sum())}
    total = torch.zeros(())
    if "cap" in cfg.tasks:
        total = total + cfg.loss_weights["cap"] * _mean_nll(sums)
    if "ret" in cfg.tasks:
        if len(samples) < 2:
            log.warning("batch of size 1: retrieval loss skipped")
            report["ret"] = 0.0
        else:
            text_embs = model.text_embeddings(caps)
            ret = retrieval_loss(video_embs, text_embs, model.temperature, cfg.symmetric_ret)
            total = total + cfg.loss_weights["ret"] * ret
            report["ret"] = float(ret.detach())
    return total, report


def _clip_scorer(model: ViLLE, video: SyntheticVideo, text_emb: torch.Tensor, stride: int, vocab):
    def score(spans):
        with torch.no_grad():
            frames = [video.input_frames(stride, s) for s in spans]
            caps = [video.clip_caption(vocab, s) for s in spans]
            _, _, e = model.video_caption_pass(frames, caps)
            return (e @ text_emb.detach()).tolist()

    return score


def stage3_step(
    model: ViLLE,
    batch: dict,
    cfg: StageConfig,
    corpus: Corpus,
    rng: np.random.Generator,
    stats: dict | None = None,
) -> tuple[torch.Tensor, dict]:
    """Weighted sum of every enabled task loss on its own minibatch."""
    vocab = corpus.vocab
    stride = corpus.config.frame_stride
    w = cfg.loss_weights
    report = {k: 0.0 for k in LOSS_KEYS}
    total = torch.zeros(())
    stats = stats if stats is not None else {}

    # captioning and retrieval share the teacher-forced video pass
    cap_ret = [v for v in batch["cap"]] if "cap" in cfg.tasks else []
    ret_set = [v for v in batch["ret"]] if "ret" in cfg.tasks else []
    pass_videos = list(dict.fromkeys(cap_ret + ret_set))
    video_emb_by_id = {}
    if pass_videos:
        frames = [v.input_frames(stride) for v in pass_videos]
        caps = [v.caption(vocab) for v in pass_videos]
        sums, _, embs = model.video_caption_pass(frames, caps)
        cap_mask = torch.tensor([v in cap_ret for v in pass_videos])
        if cap_mask.any():
            cap = sums[cap_mask].mean()
            total = total + w["cap"] * cap
            report["cap"] = float(cap.detach())
        ret_idx = [i for i, v in enumerate(pass_videos) if v in ret_set]
        video_emb_by_id = {pass_videos[i].id: embs[i] for i in ret_idx}
        if len(ret_idx) >= 2:
            texts = model.text_embeddings([caps[i] for i in ret_idx])
            ret = retrieval_loss(embs[ret_idx], texts, model.temperature, cfg.symmetric_ret)
            total = total + w["ret"] * ret
            report["ret"] = float(ret.detach())

    if "qa" in cfg.tasks and batch["qa"]:
        prefixes, targets = [], []
        for v in batch["qa"]:
            pairs = v.qa_pairs(vocab, stride)
            q, a = pairs[int(rng.integers(len(pairs)))]
            prefixes.append(TokenSequence(v.input_frames(stride), q))
            targets.append(a + [V.EOS])
        sums, _ = model.nll(prefixes, targets)
        qa = sums.mean()
        total = total + w["qa"] * qa
        report["qa"] = float(qa.detach())

    if "match" in cfg.tasks and batch["match"]:
        pairs = list(batch["match"])
        for v, c, y in batch["match"]:
            if y == 1:
                pairs += [(v, perturb_caption(c, vocab, rng), 0) for _ in range(cfg.match_perturbed)]
        frames = [v.input_frames(stride) for v, _, _ in pairs]
        yes, no = model.match_logits(frames, [c for _, c, _ in pairs])
        labels = torch.tensor([y for _, _, y in pairs], dtype=yes.dtype)
        m = matching_from_logits(yes, no, labels)
        total = total + w["match"] * m
        report["match"] = float(m.detach())

    if "loc" in cfg.tasks and batch["loc"]:
        loc, clip_nll = _localization_terms(model, batch["loc"], cfg, corpus, rng, stats)
        if loc is not None:
            total = total + w["loc"] * loc
            report["loc"] = float(loc.detach())
            if "cap" in cfg.tasks:
                total = total + w["cap"] * clip_nll
                report["clip_cap"] = float(clip_nll.detach())

    if "compose" in cfg.tasks and corpus.composed:
        comp = _composed_term(model, batch, corpus, video_emb_by_id)
        if comp is not None:
            total = total + w["compose"] * comp
            report["compose"] = float(comp.detach())
    return total, report


def perturb_caption(caption: Sequence[int], vocab, rng: np.random.Generator) -> list[int]:
    """A caption differing from ``caption``: one symbol swapped, dropped or inserted."""
    cap = list(caption)
    unused = [vocab.symbol_token(s) for s in range(vocab.n_symbols) if vocab.symbol_token(s) not in cap]
    ops = ["swap", "insert"] + (["drop"] if len(cap) > 1 else [])
    op = ops[int(rng.integers(len(ops)))]
    if op == "drop":
        del cap[int(rng.integers(len(cap)))]
    elif op == "insert":
        cap.insert(int(rng.integers(len(cap) + 1)), unused[int(rng.integers(len(unused)))])
    else:
        cap[int(rng.integers(len(cap)))] = unused[int(rng.integers(len(unused)))]
    return cap


def _localization_terms(model, videos, cfg, corpus, rng, stats):
    vocab = corpus.vocab
    stride = corpus.config.frame_stride
    queries, q_frames, clips = [], [], []
    for v in videos:
        anns = v.annotations(vocab)
        ann = anns[int(rng.integers(len(anns)))]
        ctx_frames = sparse_frames(v.input_frames(stride), model.cfg.context_frames)
        scorer = None
        if cfg.hard_negatives:
            with torch.no_grad():
                t = model.text_embeddings([ann.caption_tokens], [ctx_frames])[0]
            scorer = _clip_scorer(model, v, t, stride, vocab)
        try:
            negs = mine_hard_negatives(v, ann.span, max_iou=cfg.max_iou, count=cfg.n_negatives, seed=rng, scorer=scorer)
        except MiningError:
            stats["dropped"] = stats.get("dropped", 0) + 1
            continue
        queries.append(ann.caption_tokens)
        q_frames.append(ctx_frames)
        clips.append([(v, ann.span)] + [(v, s) for s in negs])
    if not queries:
        return None, None
    flat = [c for group in clips for c in group]
    frames = [v.input_frames(stride, s) for v, s in flat]
    caps = [v.clip_caption(vocab, s) for v, s in flat]
    sums, _, embs = model.video_caption_pass(frames, caps)
    k = 1 + cfg.n_negatives
    embs = embs.view(len(queries), k, -1)
    t = model.text_embeddings(queries, q_frames)
    sims = torch.einsum("nd,nkd->nk", t, embs)
    loss = localization_from_similarities(sims[:, 0], sims[:, 1:], model.temperature)
    return loss, sums.mean()


def _composed_term(model, batch, corpus, video_emb_by_id):
    """Composed query vs (targets + their sources); the source is a hard negative."""
    by_source = {c.source_id: c for c in corpus.composed}
    ids = by_source.keys() & video_emb_by_id.keys()
    trips = [by_source[i] for i in sorted(ids)]
    if len(trips) < 2:
        return None
    stride = corpus.config.frame_stride
    vocab = corpus.vocab
    lookup = corpus.by_id()
    targets = [lookup[c.target_id] for c in trips]
    _, _, t_embs = model.video_caption_pass([t.input_frames(stride) for t in targets], [t.caption(vocab) for t in targets])
    queries = model.text_embeddings([c.change_tokens for c in trips], [lookup[c.source_id].input_frames(stride) for c in trips])
    sources = torch.stack([video_emb_by_id[c.source_id] for c in trips])
    cands = torch.cat([t_embs, sources])
    return info_nce(queries, cands, torch.arange(len(trips)), model.temperature)


# -- optimizer / freezing ----------------------------------------------------------


def build_optimizer(model: ViLLE, cfg: StageConfig) -> torch.optim.Optimizer:
    head_names = model.head_parameter_names()
    decay, plain = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if name in head_names else plain).append(p)
    groups = [{"params": plain, "weight_decay": 0.0}, {"params": decay, "weight_decay": cfg.weight_decay}]
    return torch.optim.AdamW(groups, lr=0.0, betas=(0.9, 0.98))


def prepare_stage(model: ViLLE, cfg: StageConfig) -> None:
    """Fresh adapters at this stage's rank; optionally freeze the base weights."""
    bb = model.backbone
    if bb.adapter is not None:
        bb.merge_adapters()
    if cfg.adapter_rank > 0:
        bb.apply_adapters(AdapterConfig(rank=cfg.adapter_rank, scale=cfg.adapter_scale))
    bb.freeze_base(cfg.freeze_base)


# -- stage runner --------------------------------------------------------------


@dataclass
class StageResult:
    model: ViLLE
    metrics: list[dict]
    optimizer: torch.optim.Optimizer
    steps_done: int
    dropped: int = 0


def run_stage(
    cfg: StageConfig,
    corpus: Corpus,
    model: ViLLE,
    seed: int = 0,
    log_path: str | Path | None = None,
    previous_stage: int | None = None,
    from_scratch: bool = False,
    dump_dir: str | Path | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> StageResult:
    """Run ``cfg.steps`` optimizer updates, each over ``grad_accum`` micro-batches."""
    if cfg.stage > 1 and previous_stage is None and not from_scratch:
        raise StagePipelineError(f"stage {cfg.stage} needs a stage {cfg.stage - 1} checkpoint or from_scratch")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model.train()
    prepare_stage(model, cfg)
    opt = build_optimizer(model, cfg)
    pool = [v for v in corpus.split("train")]
    if cfg.stage == 2:
        keep = balance_by_keyword(keyword_records(pool), cfg.balance_min_occ, cfg.balance_cap)
        pool = [v for v in pool if v.id in keep] or pool
    stride = corpus.config.frame_stride
    metrics: list[dict] = []
    stats: dict = {}
    log_fh = open(log_path, "a") if log_path else None
    try:
        for step in range(cfg.steps):
            lr = lr_schedule(step + 1, cfg.warmup_steps, cfg.base_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            agg: dict = {}
            for _ in range(cfg.grad_accum):
                if cfg.stage in (1, 2):
                    idx = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
                    samples = _samples([pool[int(i)] for i in idx], corpus.vocab, stride, rng, cfg.clip_prob,
                                       cfg.detailed_captions, crop_prob=cfg.crop_prob, jitter=cfg.phase_jitter)
                    loss, rep = stage12_step(model, samples, cfg)
                    ids = [s.video.id for s in samples]
                else:
                    batch = make_multitask_batch(pool, cfg.batch_size, rng, corpus.vocab)
                    loss, rep = stage3_step(model, batch, cfg, corpus, rng, stats)
                    ids = sorted({v.id for t in ("cap", "qa", "ret", "loc") for v in batch[t]})
                if not torch.isfinite(loss):
                    _dump(dump_dir, cfg, step, ids, rep)
                    raise TrainingError(f"non-finite loss at stage {cfg.stage} step {step}: {rep}")
                if loss.requires_grad:
                    (loss / cfg.grad_accum).backward()
                for k, val in rep.items():
                    agg[k] = agg.get(k, 0.0) + val / cfg.grad_accum
            opt.step()
            row = {"stage": cfg.stage, "step": step, "lr": lr, **{k: round(v, 6) for k, v in sorted(agg.items())}}
            metrics.append(row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            if callback:
                callback(step, row)
    finally:
        if log_fh:
            log_fh.close()
    if model.backbone.adapter is not None:
        model.backbone.merge_adapters()
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return StageResult(model, metrics, opt, cfg.steps, stats.get("dropped", 0))


def _dump(dump_dir, cfg, step, ids, rep):
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nonfinite_stage{cfg.stage}_step{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"stage": cfg.stage, "step": step, "video_ids": ids, "losses": rep}, indent=1))


# -- checkpoints -----------------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    tensors: dict[str, torch.Tensor]
    meta: dict

    @property
    def parameters(self) -> dict[str, torch.Tensor]:
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}


_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64, "uint8": torch.uint8}


def _dtype_name(t: torch.Tensor) -> str:
    for name, dt in _DTYPES.items():
        if t.dtype == dt:
            return name
    raise TypeError(f"unsupported dtype {t.dtype}")


def checkpoint_from_model(model: ViLLE, stage: int, step: int, optimizer=None, extra: dict | None = None) -> Checkpoint:
    tensors = {f"param/{k}": v.detach().clone() for k, v in model.state_dict().items()}
    meta = {
        "stage": stage,
        "step": step,
        "model_config": model.cfg.to_dict(),
        "adapter": asdict(model.backbone.adapter) if model.backbone.adapter else None,
        "torch_rng": torch.get_rng_state().tolist(),
    }
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        groups = []
        for g in optimizer.param_groups:
            groups.append({k: v for k, v in g.items() if k != "params"} | {"params": [names[id(p)] for p in g["params"] if id(p) in names]})
            for p in g["params"]:
                for key, val in optimizer.state.get(p, {}).items():
                    if id(p) in names and torch.is_tensor(val):
                        tensors[f"optim/{names[id(p)]}/{key}"] = val.detach().clone()
        meta["optimizer_groups"] = json.loads(json.dumps(groups, default=str))
    if extra:
        meta.update(extra)
    return Checkpoint(CHECKPOINT_VERSION, tensors, meta)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    entries, payload, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().contiguous().cpu()
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": _dtype_name(t), "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": ckpt.meta}, sort_keys=True, separators=(",", ":")).encode()
    body = struct.pack("<Q", len(manifest)) + manifest + b"".join(payload)
    blob = CHECKPOINT_MAGIC + struct.pack("<I", ckpt.version) + hashlib.sha256(body).digest() + body
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 52 or blob[:8] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != CHECKPOINT_VERSION:
        raise MigrationError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    digest, body = blob[12:44], blob[44:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (truncated or corrupt)")
    (mlen,) = struct.unpack("<Q", body[:8])
    manifest = json.loads(body[8 : 8 + mlen])
    data = body[8 + mlen :]
    tensors = {}
    for e in manifest["tensors"]:
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        dt = _DTYPES[e["dtype"]]
        np_dt = torch.empty(0, dtype=dt).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(raw, dtype=np_dt).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return Checkpoint(version, tensors, manifest["meta"])


def model_from_checkpoint(ckpt: Checkpoint) -> ViLLE:
    cfg = ModelConfig.from_dict(ckpt.meta["model_config"])
    model = ViLLE(cfg)
    if ckpt.meta.get("adapter"):
        model.backbone.apply_adapters(AdapterConfig(**ckpt.meta["adapter"]))
    model.load_state_dict(ckpt.parameters, strict=True)
    model.eval()
    return model
