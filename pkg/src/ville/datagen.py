"""Synthetic event-structured video corpus.

A video is a 1 fps sequence of frame features. Each timed event paints its
symbol's prototype vector (plus Gaussian noise) onto the frames it covers;
frames outside every event show the background prototype. Captions, QA
pairs, localized annotations and composed-retrieval edits are all derived
from the event list, so ground truth is exact.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import vocab as V
from .vocab import Vocab


class ConfigError(ValueError):
    pass


class MiningError(RuntimeError):
    pass


class BatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class Event:
    symbol: int
    start_s: float
    end_s: float


@dataclass
class TaskFlags:
    cap: bool = True
    qa: bool = False
    ret: bool = True
    loc: bool = False
    match: bool = True

    def __post_init__(self):
        if not (self.cap or self.qa or self.ret or self.loc or self.match):
            raise ValueError("at least one task flag must be set")


@dataclass(eq=False)
class SyntheticVideo:
    id: str
    duration_s: float
    frames: np.ndarray  # [n_frames, d_frame] float32, 1 frame per second
    events: list[Event]
    keywords: list[str] = field(default_factory=list)
    flags: TaskFlags = field(default_factory=TaskFlags)
    split: str = "train"

    def __post_init__(self):
        starts = [e.start_s for e in self.events]
        if starts != sorted(starts):
            raise ValueError("events must be sorted by start")
        for e in self.events:
            if not 0 <= e.start_s < e.end_s <= self.duration_s:
                raise ValueError(f"event {e} outside [0, {self.duration_s}]")

    def caption(self, vocab: Vocab) -> list[int]:
        return [vocab.symbol_token(e.symbol) for e in self.events]

    def detailed_caption(self, vocab: Vocab, stride: int) -> list[int]:
        out = []
        for e in self.events:
            out += [vocab.time_token(int(e.start_s) // stride), vocab.symbol_token(e.symbol)]
        return out

    def annotations(self, vocab: Vocab) -> list["Annotation"]:
        return [Annotation(self.id, [vocab.symbol_token(e.symbol)], (e.start_s, e.end_s)) for e in self.events]

    def qa_pairs(self, vocab: Vocab, stride: int) -> list[tuple[list[int], list[int]]]:
        pairs = []
        for e in self.events:
            t = int((e.start_s + e.end_s) / 2)
            pairs.append(([V.Q_WHAT, vocab.time_token(t // stride)], [vocab.symbol_token(e.symbol)]))
        return pairs

    def input_frames(self, stride: int, span: tuple[float, float] | None = None) -> torch.Tensor:
        """Model input frames (every ``stride``-th second), optionally cut to a span."""
        f = self.frames
        if span is not None:
            a, b = int(math.floor(span[0])), int(math.ceil(span[1]))
            f = f[a:b]
        return torch.from_numpy(np.ascontiguousarray(f[::stride]))

    def clip_caption(self, vocab: Vocab, span: tuple[float, float]) -> list[int]:
        """Symbols of events covering at least half of themselves or half the clip."""
        a, b = span
        out = []
        for e in self.events:
            ov = min(b, e.end_s) - max(a, e.start_s)
            if ov > 0 and (ov >= 0.5 * (e.end_s - e.start_s) or ov >= 0.5 * (b - a)):
                out.append(vocab.symbol_token(e.symbol))
        return out


@dataclass
class Annotation:
    video_id: str
    caption_tokens: list[int]
    span: tuple[float, float] | None = None


@dataclass
class KeywordRecord:
    video_id: str
    keywords: list[str]

    def __post_init__(self):
        if not self.keywords:
            raise ValueError("keyword record needs at least one keyword")


@dataclass
class ComposedTriplet:
    source_id: str
    change_tokens: list[int]  # [sym_from, ARROW, sym_to]
    target_id: str
    edited_event: int


@dataclass
class CorpusConfig:
    n_videos: int = 1000
    n_test: int = 200
    n_symbols: int = 64
    n_time: int = 64
    d_frame: int = 16
    event_range: tuple[int, int] = (1, 5)
    event_len_range: tuple[int, int] = (6, 14)
    duration_range: tuple[int, int] = (40, 100)
    noise_sigma: float = 0.1
    frame_stride: int = 2
    compose: bool = True

    def __post_init__(self):
        self.event_range = tuple(self.event_range)
        self.event_len_range = tuple(self.event_len_range)
        self.duration_range = tuple(self.duration_range)
        if self.n_symbols < 1:
            raise ConfigError("empty symbol vocabulary")
        if self.n_videos < 1:
            raise ConfigError("n_videos must be >= 1")
        if not 0 <= self.n_test < self.n_videos + 1:
            raise ConfigError("n_test must lie in [0, n_videos]")
        if self.event_range[1] > self.n_symbols:
            raise ConfigError("more events per video than symbols")
        longest = max(self.duration_range[1], self.event_range[1] * self.event_len_range[1] + 2)
        if longest // self.frame_stride >= self.n_time:
            raise ConfigError("time vocabulary too small for the longest video")

    @property
    def vocab(self) -> Vocab:
        return Vocab(n_time=self.n_time, n_symbols=self.n_symbols)


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    prototypes: np.ndarray  # [n_symbols + 1, d_frame]; last row is background
    videos: list[SyntheticVideo]
    targets: list[SyntheticVideo] = field(default_factory=list)
    composed: list[ComposedTriplet] = field(default_factory=list)

    @property
    def vocab(self) -> Vocab:
        return self.config.vocab

    def split(self, name: str) -> list[SyntheticVideo]:
        return [v for v in self.videos if v.split == name]

    def by_id(self) -> dict[str, SyntheticVideo]:
        return {v.id: v for v in self.videos + self.targets}


def _render(events: Sequence[Event], duration: int, prototypes: np.ndarray, sigma: float, rng) -> np.ndarray:
    bg = len(prototypes) - 1
    labels = np.full(duration, bg, dtype=np.int64)
    for e in events:
        labels[int(e.start_s) : int(e.end_s)] = e.symbol
    frames = prototypes[labels] + sigma * rng.standard_normal((duration, prototypes.shape[1]))
    return frames.astype(np.float32)


def _keywords(events: Sequence[Event], duration: int) -> list[str]:
    kws = [f"sym{e.symbol}" for e in events]
    kws.append("long" if duration >= 70 else "short")
    kws.append("busy" if len(events) >= 3 else "calm")
    return kws


def generate_corpus(config: CorpusConfig, seed: int) -> Corpus:
    """Deterministic corpus: the last ``n_test`` videos form the held-out split."""
    rng = np.random.default_rng(seed)
    d = config.d_frame
    prototypes = rng.standard_normal((config.n_symbols + 1, d)).astype(np.float32)
    prototypes *= math.sqrt(d) / np.linalg.norm(prototypes, axis=1, keepdims=True)
    vocab = config.vocab
    videos, targets, composed = [], [], []
    lo_len, hi_len = config.event_len_range
    for i in range(config.n_videos):
        k = int(rng.integers(config.event_range[0], config.event_range[1] + 1))
        lengths = rng.integers(lo_len, hi_len + 1, size=k)
        duration = int(rng.integers(config.duration_range[0], config.duration_range[1] + 1))
        duration = max(duration, int(lengths.sum()) + 2)
        free = duration - int(lengths.sum())
        cuts = np.sort(rng.integers(0, free + 1, size=k))
        symbols = rng.choice(config.n_symbols, size=k, replace=False)
        events, cursor = [], 0
        for j in range(k):
            start = int(cuts[j]) + cursor
            events.append(Event(int(symbols[j]), float(start), float(start + lengths[j])))
            cursor += int(lengths[j])
        frames = _render(events, duration, prototypes, config.noise_sigma, rng)
        multi = k >= 2
        split = "test" if i >= config.n_videos - config.n_test else "train"
        vid = SyntheticVideo(
            id=f"v{i:05d}",
            duration_s=float(duration),
            frames=frames,
            events=events,
            keywords=_keywords(events, duration),
            flags=TaskFlags(cap=True, qa=multi, ret=True, loc=multi, match=True),
            split=split,
        )
        videos.append(vid)
        if config.compose and multi:
            j = int(rng.integers(k))
            unused = sorted(set(range(config.n_symbols)) - set(int(s) for s in symbols))
            new_sym = int(rng.choice(unused))
            edited = [Event(new_sym, e.start_s, e.end_s) if n == j else e for n, e in enumerate(events)]
            target = SyntheticVideo(
                id=f"{vid.id}_edit",
                duration_s=float(duration),
                frames=_render(edited, duration, prototypes, config.noise_sigma, rng),
                events=edited,
                keywords=_keywords(edited, duration),
                flags=TaskFlags(cap=True, qa=False, ret=True, loc=False, match=False),
                split=split,
            )
            targets.append(target)
            change = [vocab.symbol_token(events[j].symbol), V.ARROW, vocab.symbol_token(new_sym)]
            composed.append(ComposedTriplet(vid.id, change, target.id, j))
    return Corpus(config, seed, prototypes, videos, targets, composed)


# -- intervals and mining ---------------------------------------------------------


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    if not (a[0] < a[1] and b[0] < b[1]):
        raise ValueError(f"degenerate interval in {a}, {b}")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0]) if inter > 0 else (a[1] - a[0]) + (b[1] - b[0])
    return inter / union


def window_spans(duration: float, window_s: float = 10.0, stride_s: float = 5.0) -> list[tuple[float, float]]:
    """[i*stride, i*stride + window] while the window start is inside the video.

    The last window is clamped to the duration; a video shorter than one window
    yields a single full-length window. Windows that would be entirely covered
    by the previous clamped window are not emitted.
    """
    if not 0 < stride_s <= window_s:
        raise ValueError("need 0 < stride <= window")
    if duration <= window_s:
        return [(0.0, float(duration))]
    spans = []
    i = 0
    while True:
        start = i * stride_s
        end = min(start + window_s, duration)
        spans.append((float(start), float(end)))
        if end >= duration:
            break
        i += 1
    return spans


@dataclass
class WindowConfig:
    window_s: float = 10.0
    stride_s: float = 5.0

    def __post_init__(self):
        if not 0 < self.stride_s <= self.window_s:
            raise ValueError("need 0 < stride_s <= window_s")


def mine_hard_negatives(
    video: SyntheticVideo,
    annotation_span: tuple[float, float],
    window_cfg: WindowConfig | None = None,
    max_iou: float = 0.2,
    count: int = 2,
    seed: int | np.random.Generator = 0,
    scorer=None,
) -> list[tuple[float, float]]:
    """Sliding-window negatives with IoU < ``max_iou`` against the annotation.

    With ``scorer`` (spans -> similarities) the most similar eligible windows are
    returned; otherwise a uniform random subset.
    """
    cfg = window_cfg or WindowConfig()
    spans = window_spans(video.duration_s, cfg.window_s, cfg.stride_s)
    if max_iou >= 1.0:
        eligible = spans
    else:
        eligible = [w for w in spans if interval_iou(w, annotation_span) < max_iou]
    if len(eligible) < count:
        raise MiningError(f"{video.id}: only {len(eligible)} windows with IoU < {max_iou}")
    if scorer is not None:
        scores = np.asarray(scorer(eligible), dtype=np.float64)
        order = sorted(range(len(eligible)), key=lambda i: (-scores[i], i))
        return [eligible[i] for i in order[:count]]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick = rng.choice(len(eligible), size=count, replace=False)
    return [eligible[int(i)] for i in sorted(pick)]


# -- keyword balancing -------------------------------------------------------------


def balance_by_keyword(
    records: Sequence[KeywordRecord], min_occ: int = 30, cap: int = 500, seed: int | None = None
) -> set[str]:
    """Greedy, frequency-descending selection with a per-keyword cap.

    Keywords seen fewer than ``min_occ`` times are dropped. A selected video counts
    toward every keyword it carries; a video is skipped if any of its retained
    keywords has already reached ``cap``.
    """
    counts = Counter(k for r in records for k in set(r.keywords))
    kept = {k for k, c in counts.items() if c >= min_occ}
    order = sorted(kept, key=lambda k: (-counts[k], k))
    rng = np.random.default_rng(seed) if seed is not None else None
    selected: set[str] = set()
    taken: Counter = Counter()
    for kw in order:
        pool = [r for r in records if kw in r.keywords]
        if rng is not None:
            pool = [pool[i] for i in rng.permutation(len(pool))]
        for r in pool:
            if taken[kw] >= cap:
                break
            if r.video_id in selected:
                continue
            mine = set(r.keywords) & kept
            if any(taken[k] >= cap for k in mine):
                continue
            selected.add(r.video_id)
            for k in mine:
                taken[k] += 1
    return selected


# -- multi-task batches -----------------------------------------------------------


TASKS = ("cap", "qa", "ret", "loc", "match")


def make_multitask_batch(
    sampled_videos: Sequence[SyntheticVideo],
    batch_size: int,
    rng: np.random.Generator,
    vocab: Vocab | None = None,
) -> dict[str, list]:
    """Sample one batch of videos and filter it into per-task minibatches.

    The match minibatch holds (video, caption, y) pairs: every video with its own
    caption (y=1) and one foreign caption from the batch (y=0).
    """
    if batch_size < 1:
        raise BatchError("batch_size must be >= 1")
    vocab = vocab or Vocab()
    n = min(batch_size, len(sampled_videos))
    idx = rng.choice(len(sampled_videos), size=n, replace=False)
    batch = [sampled_videos[int(i)] for i in idx]
    out: dict[str, list] = {t: [v for v in batch if getattr(v.flags, t)] for t in TASKS}
    pairs = []
    for v in out["match"]:
        own = v.caption(vocab)
        foreign = [u for u in batch if u.caption(vocab) != own]
        if not foreign:
            foreign = [u for u in sampled_videos if u.caption(vocab) != own]
        if not foreign:
            continue
        other = foreign[int(rng.integers(len(foreign)))]
        pairs += [(v, own, 1), (v, other.caption(vocab), 0)]
    out["match"] = pairs
    if not any(out.values()):
        raise BatchError("all task minibatches are empty")
    return out


# -- persistence --------------------------------------------------------------------


def _video_meta(v: SyntheticVideo) -> dict:
    return {
        "id": v.id,
        "duration_s": v.duration_s,
        "events": [[e.symbol, e.start_s, e.end_s] for e in v.events],
        "keywords": v.keywords,
        "flags": asdict(v.flags),
        "split": v.split,
        "n_frames": int(v.frames.shape[0]),
    }


def write_frames(path: Path, frames: np.ndarray) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.tobytes())


def read_frames(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    n, d = struct.unpack("<II", raw[:8])
    arr = np.frombuffer(raw, dtype="<f4", offset=8)
    if arr.size != n * d:
        raise ValueError(f"{path}: expected {n}x{d} floats, found {arr.size}")
    return arr.reshape(n, d).astype(np.float32)


def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": asdict(corpus.config),
        "seed": corpus.seed,
        "videos": [_video_meta(v) for v in corpus.videos],
        "targets": [_video_meta(v) for v in corpus.targets],
        "composed": [asdict(c) for c in corpus.composed],
    }
    for v in corpus.videos + corpus.targets:
        write_frames(d / "frames" / f"{v.id}.bin", v.frames)
    write_frames(d / "prototypes.bin", corpus.prototypes)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def load_corpus(directory: str | Path) -> Corpus:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    config = CorpusConfig(**manifest["config"])

    def video(meta):
        return SyntheticVideo(
            id=meta["id"],
            duration_s=meta["duration_s"],
            frames=read_frames(d / "frames" / f"{meta['id']}.bin"),
            events=[Event(int(s), float(a), float(b)) for s, a, b in meta["events"]],
            keywords=list(meta["keywords"]),
            flags=TaskFlags(**meta["flags"]),
            split=meta["split"],
        )

    return Corpus(
        config,
        manifest["seed"],
        read_frames(d / "prototypes.bin"),
        [video(m) for m in manifest["videos"]],
        [video(m) for m in manifest["targets"]],
        [ComposedTriplet(**c) for c in manifest["composed"]],
    )


def corpus_checksum(directory: str | Path) -> str:
    d = Path(directory)
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(d)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def keyword_records(videos: Iterable[SyntheticVideo]) -> list[KeywordRecord]:
    return [KeywordRecord(v.id, list(v.keywords)) for v in videos]
