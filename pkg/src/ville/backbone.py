"""Toy prefix-LM transformer standing in for the multimodal LLM.

Frame features are projected into the token-embedding space and placed at the
front of the sequence. Positions inside the prefix attend bidirectionally;
positions after it attend causally. Linear layers inside the transformer can
carry low-rank adapters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import vocab as V
from .numcore import ShapeError


class CapacityError(ValueError):
    pass


class AdapterStateError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 512
    d_frame: int = 16
    max_seq: int = 512
    mlp_ratio: int = 4
    positional: bool = True
    # learned table initialised from sinusoids ("sinusoidal") or N(0, 0.02) ("normal")
    pos_init: str = "sinusoidal"
    pos_init_scale: float = 0.2
    train_norms: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must hold EOS, PAD and both mode tokens")
        if self.pos_init not in ("sinusoidal", "normal"):
            raise ValueError("pos_init must be 'sinusoidal' or 'normal'")


@dataclass
class AdapterConfig:
    rank: int = 8
    scale: float = 1.0
    target: str = "all"  # "all" | "attn" | "mlp"

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be positive")
        if self.target not in ("all", "attn", "mlp"):
            raise ValueError(f"unknown adapter target {self.target!r}")


@dataclass
class TokenSequence:
    """Frames (if any) followed by token ids; the first ``prefix_len`` items are the prefix.

    Frame vectors always precede tokens, so they can only live in the prefix.
    """

    frames: torch.Tensor | None
    tokens: list[int] = field(default_factory=list)
    prefix_len: int | None = None

    def __post_init__(self):
        if self.prefix_len is None:
            self.prefix_len = len(self)
        if not 0 <= self.prefix_len <= len(self):
            raise ValueError(f"prefix_len {self.prefix_len} outside [0, {len(self)}]")
        if self.frames is not None and self.prefix_len < self.n_frames:
            raise ValueError("frame vectors must lie inside the prefix")

    @property
    def n_frames(self) -> int:
        return 0 if self.frames is None else int(self.frames.shape[0])

    def __len__(self) -> int:
        return self.n_frames + len(self.tokens)

    def extend(self, tokens: Sequence[int]) -> "TokenSequence":
        """Same prefix, with ``tokens`` appended to the suffix."""
        return TokenSequence(self.frames, list(self.tokens) + [int(t) for t in tokens], self.prefix_len)


def build_prefix_mask(prefix_len: int, total_len: int) -> torch.Tensor:
    """Boolean [total, total] mask; True where query i may attend to key j."""
    if prefix_len < 0 or total_len < 0 or prefix_len > total_len:
        raise ValueError(f"bad lengths prefix={prefix_len} total={total_len}")
    i = torch.arange(total_len).unsqueeze(1)
    j = torch.arange(total_len).unsqueeze(0)
    return ((i < prefix_len) & (j < prefix_len)) | ((i >= prefix_len) & (j <= i))


def batch_prefix_mask(prefix_lens: torch.Tensor, lengths: torch.Tensor, total: int) -> torch.Tensor:
    """[B, total, total] masks for right-padded rows; pad rows attend only to themselves."""
    i = torch.arange(total).view(1, -1, 1)
    j = torch.arange(total).view(1, 1, -1)
    p = prefix_lens.view(-1, 1, 1)
    n = lengths.view(-1, 1, 1)
    allowed = ((i < p) & (j < p)) | ((i >= p) & (j <= i))
    return (allowed & (j < n)) | (i == j)


class LoRALinear(nn.Module):
    """y = base(x) + scale * x A^T B^T with B zero-initialised."""

    def __init__(self, base: nn.Linear, rank: int, scale: float):
        super().__init__()
        self.base = base
        self.scale = scale
        self.lora_A = nn.Parameter(torch.randn(rank, base.in_features) / math.sqrt(base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged(self) -> nn.Linear:
        with torch.no_grad():
            self.base.weight += self.scale * (self.lora_B @ self.lora_A)
        return self.base


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x, mask):
        b, n, d = x.shape
        h = self.n_heads

        def split(t):
            return t.view(b, n, h, d // h).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(self.q(x)), split(self.k(x)), split(self.v(x)), attn_mask=mask.unsqueeze(1))
        return self.o(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.mlp_ratio * d)
        self.fc2 = nn.Linear(cfg.mlp_ratio * d, d)

    def forward(self, x, mask):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


_ATTN_NAMES = ("q", "k", "v", "o")
_MLP_NAMES = ("fc1", "fc2")


def sinusoid_table(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.float()


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.frame_proj = nn.Linear(cfg.d_frame, d)
        self.pos_emb = nn.Embedding(cfg.max_seq, d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, cfg.vocab_size)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        if cfg.pos_init == "sinusoidal":
            with torch.no_grad():
                self.pos_emb.weight.copy_(cfg.pos_init_scale * sinusoid_table(cfg.max_seq, d))
        else:
            nn.init.normal_(self.pos_emb.weight, std=0.02)
        self.adapter: AdapterConfig | None = None

    # -- inputs -----------------------------------------------------------

    def project_frames(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 2 or frames.shape[0] == 0:
            raise ShapeError("frames must be a nonempty [n, d_frame] tensor")
        if frames.shape[1] != self.cfg.d_frame:
            raise ShapeError(f"frame width {frames.shape[1]} != d_frame {self.cfg.d_frame}")
        return self.frame_proj(frames.to(self.frame_proj.weight.dtype))

    def _embed(self, seqs: Sequence[TokenSequence]):
        lengths = [len(s) for s in seqs]
        total = max(lengths)
        if total > self.cfg.max_seq:
            raise CapacityError(f"sequence length {total} exceeds max_seq {self.cfg.max_seq}")
        d = self.cfg.d_model
        dtype = self.tok_emb.weight.dtype
        x = torch.zeros(len(seqs), total, d, dtype=dtype)
        ids = torch.full((len(seqs), total), V.PAD, dtype=torch.long)
        is_tok = torch.zeros(len(seqs), total, dtype=torch.bool)
        for b, s in enumerate(seqs):
            nf = s.n_frames
            if nf:
                x[b, :nf] = self.project_frames(s.frames)
            if s.tokens:
                ids[b, nf : nf + len(s.tokens)] = torch.tensor(s.tokens, dtype=torch.long)
                is_tok[b, nf : nf + len(s.tokens)] = True
        x = torch.where(is_tok.unsqueeze(-1), self.tok_emb(ids), x)
        if self.cfg.positional:
            x = x + self.pos_emb.weight[:total].unsqueeze(0)
        return x, torch.tensor(lengths), torch.tensor([s.prefix_len for s in seqs])

    # -- forward ------------------------------------------------------------

    def encode_batch(self, seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
        """Final-layer hidden states [B, L, d] (right-padded) and true lengths."""
        x, lengths, prefix = self._embed(seqs)
        mask = batch_prefix_mask(prefix, lengths, x.shape[1])
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_f(x), lengths

    def encode(self, seq: TokenSequence) -> torch.Tensor:
        h, _ = self.encode_batch([seq])
        return h[0]

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(hidden)

    @torch.no_grad()
    def generate_batch(self, prefixes: Sequence[TokenSequence], max_steps: int) -> list[list[int]]:
        """Greedy decoding for several prefixes at once; each stops at EOS or ``max_steps``."""
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        out: list[list[int]] = [[] for _ in prefixes]
        live = list(range(len(prefixes)))
        for _ in range(max_steps):
            if not live:
                break
            seqs = [prefixes[b].extend(out[b]) for b in live]
            h, lengths = self.encode_batch(seqs)
            last = h[torch.arange(len(live)), lengths - 1]
            nxt = self.logits(last).argmax(dim=-1).tolist()
            still = []
            for b, tok in zip(live, nxt):
                out[b].append(int(tok))
                if tok != V.EOS:
                    still.append(b)
            live = still
        return out

    def generate(self, prefix: TokenSequence, max_steps: int, seed: int = 0) -> list[int]:
        # greedy decoding is deterministic; seed kept for interface stability
        return self.generate_batch([prefix], max_steps)[0]

    # -- adapters -------------------------------------------------------------

    def _targets(self, target: str):
        names = {"all": _ATTN_NAMES + _MLP_NAMES, "attn": _ATTN_NAMES, "mlp": _MLP_NAMES}[target]
        for blk in self.blocks:
            for name in names:
                owner = blk.attn if name in _ATTN_NAMES else blk
                yield owner, name

    def apply_adapters(self, cfg: AdapterConfig) -> None:
        if self.adapter is not None:
            raise AdapterStateError("adapters already applied")
        if cfg.rank >= self.cfg.d_model:
            raise ValueError("adapter rank must be < d_model")
        for owner, name in self._targets(cfg.target):
            base = getattr(owner, name)
            lora = LoRALinear(base, cfg.rank, cfg.scale).to(base.weight.dtype)
            setattr(owner, name, lora)
        self.adapter = cfg

    def merge_adapters(self) -> None:
        if self.adapter is None:
            raise AdapterStateError("no adapters to merge")
        for owner, name in self._targets(self.adapter.target):
            setattr(owner, name, getattr(owner, name).merged())
        self.adapter = None

    def freeze_base(self, frozen: bool = True) -> None:
        """Freeze everything except frame projection, adapters and (optionally) norms."""
        for pname, p in self.named_parameters():
            keep = pname.startswith("frame_proj") or "lora_" in pname
            if self.cfg.train_norms and (".ln" in pname or pname.startswith("ln_f")):
                keep = True
            p.requires_grad_(keep or not frozen)
