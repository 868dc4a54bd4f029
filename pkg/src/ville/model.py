"""ViLLE model container: shared backbone, embedding head and temperature."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from . import vocab as V
from .backbone import Backbone, BackboneConfig, TokenSequence
from .embedhead import (
    EmbeddingHead,
    HeadConfig,
    embed_text_batch,
    embed_video_batch,
    gather_positions,
    video_prefix,
)
from .objectives import Temperature, match_logits_batch, sequence_nll


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    tau: float = 0.07
    learnable_tau: bool = False
    max_gen_steps: int = 12
    context_frames: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(
            backbone=BackboneConfig(**d.pop("backbone", {})),
            head=HeadConfig(**d.pop("head", {})),
            **d,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["head"]["variant"] = self.head.variant.value
        return out


class ViLLE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        self.head = EmbeddingHead(cfg.backbone.d_model, cfg.head)
        self.temperature = Temperature(cfg.tau, cfg.learnable_tau)

    def head_parameter_names(self) -> set[str]:
        names = {f"head.{n}" for n, _ in self.head.named_parameters()}
        if self.cfg.learnable_tau:
            names.add("temperature.log_tau")
        return names

    # -- training-time passes ----------------------------------------------------

    def video_caption_pass(self, frames_list: Sequence[torch.Tensor], captions: Sequence[Sequence[int]]):
        """One teacher-forced pass over <frames> <|vid_embed|> caption EOS.

        Returns per-sample caption NLL sums, token counts and the video embeddings
        read from the caption positions (stand-ins for generated positions).
        """
        fixed = self.cfg.head.fixed_tokens
        prefixes = [video_prefix(f, fixed) for f in frames_list]
        targets = [list(c) + [V.EOS] for c in captions]
        sums, counts, h, _ = sequence_nll(self.backbone, prefixes, targets)
        if fixed:
            starts, n = [p.n_frames for p in prefixes], [fixed] * len(prefixes)
        else:
            starts, n = [p.prefix_len for p in prefixes], [len(t) for t in targets]
        x, mask = gather_positions(h, starts, n)
        return sums, counts, self.head(x, mask)

    def text_embeddings(self, texts, frames_list=None) -> torch.Tensor:
        return embed_text_batch(texts, self.backbone, self.head, frames_list)

    def match_logits(self, frames_list, captions):
        return match_logits_batch(self.backbone, frames_list, captions)

    def nll(self, prefixes: Sequence[TokenSequence], targets):
        sums, counts, _, _ = sequence_nll(self.backbone, prefixes, targets)
        return sums, counts

    # -- inference ----------------------------------------------------------------

    @torch.no_grad()
    def embed_videos(self, frames_list, batch_size: int = 64) -> tuple[torch.Tensor, list[int]]:
        embs, counts = [], []
        for i in range(0, len(frames_list), batch_size):
            e, c = embed_video_batch(frames_list[i : i + batch_size], self.backbone, self.head, self.cfg.max_gen_steps)
            embs.append(e)
            counts += c
        return torch.cat(embs), counts

    @torch.no_grad()
    def embed_texts(self, texts, frames_list=None, batch_size: int = 128) -> torch.Tensor:
        out = []
        for i in range(0, len(texts), batch_size):
            fl = None if frames_list is None else frames_list[i : i + batch_size]
            out.append(embed_text_batch(texts[i : i + batch_size], self.backbone, self.head, fl))
        return torch.cat(out)
