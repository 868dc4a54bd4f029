"""Embedding heads and the EOS-triggered embedding extraction pipeline.

Every head maps a variable number of final-layer LLM states to pooled tokens,
projects each through an MLP, mean-pools and L2-normalises. Only the pooling
step differs between variants:

    ATTN_FREE   mean of inputs                         m = 1
    SELF_ATTN   one extra transformer layer            m = n
    Q_FORMER    P learned queries cross-attend         m = P
    K_FORMER    P learned keys, inputs as q and v      m = n
    KV_FORMER   inputs as queries, P learned k and v   m = n

The attention variants keep a residual path around their attention, as a
transformer layer would.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import vocab as V
from .backbone import Backbone, TokenSequence


class HeadVariant(str, enum.Enum):
    ATTN_FREE = "attn-free"
    SELF_ATTN = "self-attn"
    Q_FORMER = "q-former"
    K_FORMER = "k-former"
    KV_FORMER = "kv-former"


@dataclass
class HeadConfig:
    variant: HeadVariant = HeadVariant.KV_FORMER
    P: int = 32
    d_embed: int = 64
    mlp_hidden: int = 128
    # 0 = adaptive (generate until EOS); F > 0 = F fixed mode-token slots
    fixed_tokens: int = 0
    init_out_scale: float = 0.01
    paper_P: int = 256

    def __post_init__(self):
        self.variant = HeadVariant(self.variant)
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.d_embed < 8:
            raise ValueError("d_embed must be >= 8")
        if self.fixed_tokens < 0:
            raise ValueError("fixed_tokens must be >= 0")


@dataclass
class EmbeddingVector:
    values: torch.Tensor
    token_count: int


def _masked_softmax(scores, mask):
    return torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=-1)


class EmbeddingHead(nn.Module):
    def __init__(self, d_model: int, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.d_model = d_model
        v = cfg.variant
        if v is HeadVariant.SELF_ATTN:
            self.ln = nn.LayerNorm(d_model)
            self.attn = nn.MultiheadAttention(d_model, 1, batch_first=True)
            self.ln2 = nn.LayerNorm(d_model)
            self.ff = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.GELU(), nn.Linear(2 * d_model, d_model))
        elif v is HeadVariant.Q_FORMER:
            self.queries = nn.Parameter(torch.randn(cfg.P, d_model) / math.sqrt(d_model))
            self.k_proj = nn.Linear(d_model, d_model)
            self.v_proj = nn.Linear(d_model, d_model)
        elif v is HeadVariant.K_FORMER:
            self.keys = nn.Parameter(torch.randn(cfg.P, d_model) / math.sqrt(d_model))
        elif v is HeadVariant.KV_FORMER:
            self.keys = nn.Parameter(torch.randn(cfg.P, d_model) / math.sqrt(d_model))
            self.values = nn.Parameter(torch.randn(cfg.P, d_model) / math.sqrt(d_model))
        self.mlp = nn.Sequential(nn.Linear(d_model, cfg.mlp_hidden), nn.GELU(), nn.Linear(cfg.mlp_hidden, cfg.d_embed))
        # near-constant embeddings at init keep untrained contrastive logits uniform
        with torch.no_grad():
            self.mlp[-1].weight.mul_(cfg.init_out_scale)

    def pool(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: [B, n, d], mask: [B, n] valid positions -> pooled [B, m, d], pooled mask."""
        if x.shape[1] == 0 or not bool(mask.any(dim=1).all()):
            raise ValueError("every item needs at least one head-input token")
        v = self.cfg.variant
        scale = 1.0 / math.sqrt(self.d_model)
        if v is HeadVariant.ATTN_FREE:
            w = mask.to(x.dtype).unsqueeze(-1)
            mean = (x * w).sum(1, keepdim=True) / w.sum(1, keepdim=True)
            return mean, torch.ones(x.shape[0], 1, dtype=torch.bool)
        if v is HeadVariant.SELF_ATTN:
            h = self.ln(x)
            a, _ = self.attn(h, h, h, key_padding_mask=~mask, need_weights=False)
            y = x + a
            y = y + self.ff(self.ln2(y))
            return y, mask
        if v is HeadVariant.Q_FORMER:
            scores = self.queries @ self.k_proj(x).transpose(1, 2) * scale  # [B, P, n]
            attn = _masked_softmax(scores, mask.unsqueeze(1))
            return self.queries + attn @ self.v_proj(x), torch.ones(x.shape[0], self.cfg.P, dtype=torch.bool)
        if v is HeadVariant.K_FORMER:
            scores = x @ self.keys.T * scale  # [B, n, P]
            # each key gathers a value from the inputs, then inputs read the keys back
            gather = _masked_softmax(scores.transpose(1, 2), mask.unsqueeze(1))  # [B, P, n]
            slots = gather @ x
            return x + torch.softmax(scores, dim=-1) @ slots, mask
        scores = x @ self.keys.T * scale
        return x + torch.softmax(scores, dim=-1) @ self.values, mask

    def project_and_pool(self, pooled: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        z = self.mlp(pooled)
        w = mask.to(z.dtype).unsqueeze(-1)
        mean = (z * w).sum(1) / w.sum(1)
        return F.normalize(mean, dim=-1)

    def forward(self, x, mask):
        pooled, pmask = self.pool(x, mask)
        return self.project_and_pool(pooled, pmask)


def pool(hidden_tokens: torch.Tensor, head: EmbeddingHead) -> torch.Tensor:
    """Single-item pooling of [n, d_model] states."""
    if hidden_tokens.dim() != 2 or hidden_tokens.shape[0] == 0:
        raise ValueError("pool needs a nonempty [n, d_model] input")
    mask = torch.ones(1, hidden_tokens.shape[0], dtype=torch.bool)
    return head.pool(hidden_tokens.unsqueeze(0), mask)[0][0]


def project_and_pool(pooled: torch.Tensor, head: EmbeddingHead) -> EmbeddingVector:
    mask = torch.ones(1, pooled.shape[0], dtype=torch.bool)
    return EmbeddingVector(head.project_and_pool(pooled.unsqueeze(0), mask)[0], int(pooled.shape[0]))


# -- prompt layouts -------------------------------------------------------------


def video_prefix(frames: torch.Tensor, fixed_tokens: int = 0) -> TokenSequence:
    return TokenSequence(frames, [V.VID_EMBED] * max(1, fixed_tokens))


def text_prefix(text: Sequence[int], frames: torch.Tensor | None = None) -> TokenSequence:
    return TokenSequence(frames, [V.TXT_EMBED] + [int(t) for t in text])


def gather_positions(h: torch.Tensor, starts: Sequence[int], counts: Sequence[int]):
    """Slice [start, start+count) from each row of h -> padded [B, max_count, d] + mask."""
    m = max(counts)
    idx = torch.tensor(starts).unsqueeze(1) + torch.arange(m).unsqueeze(0)
    mask = torch.arange(m).unsqueeze(0) < torch.tensor(counts).unsqueeze(1)
    idx = torch.where(mask, idx, torch.tensor(starts).unsqueeze(1))
    out = h[torch.arange(h.shape[0]).unsqueeze(1), idx]
    return out, mask


# -- extraction -------------------------------------------------------------------


def embed_video_batch(
    frames_list: Sequence[torch.Tensor],
    backbone: Backbone,
    head: EmbeddingHead,
    max_steps: int = 12,
) -> tuple[torch.Tensor, list[int]]:
    """Video embeddings [B, d_embed] and head-input token counts.

    Adaptive mode: after ``<|vid_embed|>`` the model generates until EOS and the
    final-layer states of every generated position (EOS included) feed the head.
    Fixed mode: the head reads the F mode-token slots directly.
    """
    if any(f.shape[0] < 1 for f in frames_list):
        raise ValueError("video needs at least one frame")
    fixed = head.cfg.fixed_tokens
    prefixes = [video_prefix(f, fixed) for f in frames_list]
    if fixed:
        h, _ = backbone.encode_batch(prefixes)
        starts = [p.n_frames for p in prefixes]
        counts = [fixed] * len(prefixes)
    else:
        generated = backbone.generate_batch(prefixes, max_steps)
        h, _ = backbone.encode_batch([p.extend(g) for p, g in zip(prefixes, generated)])
        starts = [p.prefix_len for p in prefixes]
        counts = [len(g) for g in generated]
    x, mask = gather_positions(h, starts, counts)
    return head(x, mask), counts


def embed_text_batch(
    texts: Sequence[Sequence[int]],
    backbone: Backbone,
    head: EmbeddingHead,
    frames_list: Sequence[torch.Tensor | None] | None = None,
) -> torch.Tensor:
    """One forward pass per text; head reads every text-token position.

    With ``frames_list`` the frames are placed before ``<|txt_embed|>`` (contextual
    and composed queries).
    """
    if any(len(t) == 0 for t in texts):
        raise ValueError("text must be nonempty")
    frames_list = frames_list or [None] * len(texts)
    seqs = [text_prefix(t, f) for t, f in zip(texts, frames_list)]
    h, _ = backbone.encode_batch(seqs)
    x, mask = gather_positions(h, [s.n_frames + 1 for s in seqs], [len(t) for t in texts])
    return head(x, mask)


def embed_video(frames, backbone, head, max_steps: int = 12) -> EmbeddingVector:
    e, counts = embed_video_batch([frames], backbone, head, max_steps)
    return EmbeddingVector(e[0], counts[0])


def embed_text(text_tokens, backbone, head) -> EmbeddingVector:
    return EmbeddingVector(embed_text_batch([text_tokens], backbone, head)[0], len(text_tokens))


def sparse_frames(frames: torch.Tensor, count: int = 8) -> torch.Tensor:
    """Uniformly sample ``count`` frames (all of them if the video is shorter)."""
    n = frames.shape[0]
    if n <= count:
        return frames
    idx = torch.linspace(0, n - 1, count).round().long()
    return frames[idx]


def embed_contextual_text(sparse, text_tokens, backbone, head) -> EmbeddingVector:
    e = embed_text_batch([text_tokens], backbone, head, [sparse])
    return EmbeddingVector(e[0], len(text_tokens))


def embed_composed(source_frames, change_text, backbone, head) -> EmbeddingVector:
    if len(change_text) == 0:
        raise ValueError("change text must be nonempty")
    if source_frames.shape[0] < 1:
        raise ValueError("source video needs at least one frame")
    return embed_contextual_text(source_frames, change_text, backbone, head)
