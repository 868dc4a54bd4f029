"""Training losses: in-batch InfoNCE retrieval, caption/QA NLL, Yes/No matching,
and hard-negative localization contrast."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import vocab as V
from .backbone import Backbone, TokenSequence
from .numcore import cosine_matrix, log_softmax

TAU_MIN, TAU_MAX = 1e-3, 10.0


class Temperature(nn.Module):
    """Fixed or learnable (log-parameterised, clamped) softmax temperature."""

    def __init__(self, tau: float = 0.07, learnable: bool = False):
        super().__init__()
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.learnable = learnable
        if learnable:
            self.log_tau = nn.Parameter(torch.tensor(math.log(tau)))
        else:
            self.register_buffer("log_tau", torch.tensor(math.log(tau)))

    def forward(self) -> torch.Tensor:
        return torch.exp(self.log_tau).clamp(TAU_MIN, TAU_MAX)


def _tau(tau) -> torch.Tensor | float:
    return tau() if isinstance(tau, Temperature) else tau


@dataclass
class LocalizationTriplet:
    text_embedding: torch.Tensor
    positive_clip: torch.Tensor
    negatives: list[torch.Tensor]

    def __post_init__(self):
        if not self.negatives:
            raise ValueError("a localization triplet needs at least one negative")
        d = self.text_embedding.shape[-1]
        if self.positive_clip.shape[-1] != d or any(n.shape[-1] != d for n in self.negatives):
            raise ValueError("triplet embeddings must share d_embed")


class RetrievalLoss:
    """Counts how often non-unit rows had to be renormalised."""

    renormalised = 0


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x.detach(), dim=1)
    if bool((torch.abs(norms - 1) > 1e-6).any()):
        RetrievalLoss.renormalised += 1
    return x


def retrieval_loss(video_embs: torch.Tensor, text_embs: torch.Tensor, tau=0.07, symmetric: bool = False) -> torch.Tensor:
    """Mean over videos i of -log softmax_j(sim(v_i, t_j)/tau)[i].

    ``symmetric`` adds the text-anchored direction and averages the two.
    """
    n = video_embs.shape[0]
    if n == 0:
        raise ValueError("retrieval loss needs N >= 1")
    sims = cosine_matrix(_unit_rows(video_embs), _unit_rows(text_embs)) / _tau(tau)
    idx = torch.arange(n)
    loss = -log_softmax(sims, dim=1)[idx, idx].mean()
    if symmetric:
        loss = 0.5 * (loss - log_softmax(sims.T, dim=1)[idx, idx].mean())
    return loss


def localization_from_similarities(s_pos: torch.Tensor, s_neg: torch.Tensor, tau=0.07) -> torch.Tensor:
    """s_pos [N], s_neg [N, J] -> mean -log(e^{s+/tau} / (e^{s+/tau} + sum_j e^{s-_j/tau}))."""
    if s_pos.numel() == 0:
        raise ValueError("localization loss needs at least one triplet")
    t = _tau(tau)
    logits = torch.cat([s_pos.unsqueeze(1), s_neg], dim=1) / t
    return -log_softmax(logits, dim=1)[:, 0].mean()


def localization_loss(triplets: Sequence[LocalizationTriplet], tau=0.07) -> torch.Tensor:
    if not triplets:
        raise ValueError("localization loss needs at least one triplet")
    pos, negs = [], []
    for tr in triplets:
        e_t = tr.text_embedding.unsqueeze(0)
        pos.append(cosine_matrix(e_t, tr.positive_clip.unsqueeze(0))[0, 0])
        negs.append(cosine_matrix(e_t, torch.stack(tr.negatives))[0])
    width = max(n.numel() for n in negs)
    if any(n.numel() != width for n in negs):
        # ragged negative sets: evaluate per triplet
        return torch.stack(
            [localization_from_similarities(p.view(1), n.view(1, -1), tau) for p, n in zip(pos, negs)]
        ).mean()
    return localization_from_similarities(torch.stack(pos), torch.stack(negs), tau)


def matching_from_logits(yes_logit: torch.Tensor, no_logit: torch.Tensor, y) -> torch.Tensor:
    """-(y log p(Yes) + (1-y) log p(No)) with p the two-way softmax; mean over a batch."""
    two = torch.stack([torch.as_tensor(yes_logit), torch.as_tensor(no_logit)], dim=-1)
    logp = log_softmax(two, dim=-1)
    y = torch.as_tensor(y, dtype=logp.dtype)
    if bool(((y != 0) & (y != 1)).any()):
        raise ValueError("match label must be 0 or 1")
    return -(y * logp[..., 0] + (1 - y) * logp[..., 1]).mean()


# -- model-level wrappers ----------------------------------------------------


def match_prompt(frames: torch.Tensor, caption: Sequence[int]) -> TokenSequence:
    """<frames> Caption: <caption> Does the above video match the caption?"""
    return TokenSequence(frames, [V.CAPTION] + [int(t) for t in caption] + [V.Q_MATCH])


def match_logits_batch(backbone: Backbone, frames_list, captions, yes_id: int | None = V.YES, no_id: int | None = V.NO):
    """Yes/No logits read at the first answer position (right after the prompt)."""
    if yes_id is None or no_id is None:
        raise ValueError("Yes/No token ids are not configured")
    seqs = [match_prompt(f, c) for f, c in zip(frames_list, captions)]
    h, lengths = backbone.encode_batch(seqs)
    logits = backbone.logits(h[torch.arange(len(seqs)), lengths - 1])
    return logits[:, yes_id], logits[:, no_id]


def matching_loss(backbone: Backbone, video_frames, caption_tokens, label: int) -> torch.Tensor:
    yes, no = match_logits_batch(backbone, [video_frames], [caption_tokens])
    return matching_from_logits(yes[0], no[0], label)


def sequence_nll(backbone: Backbone, prefixes: Sequence[TokenSequence], targets: Sequence[Sequence[int]]):
    """Teacher-forced per-sample summed NLL of ``targets`` after each prefix.

    Returns (sums [B], token counts [B], final hidden states, lengths) so callers can
    reuse the same forward pass for embedding extraction.
    """
    for t in targets:
        if len(t) == 0:
            raise ValueError("target must be nonempty")
        if V.PAD in t:
            raise ValueError("target contains PAD")
    seqs = [p.extend(t) for p, t in zip(prefixes, targets)]
    h, lengths = backbone.encode_batch(seqs)
    rows, cols, ids, owner = [], [], [], []
    for b, (p, t) in enumerate(zip(prefixes, targets)):
        start = len(p) - 1
        rows += [b] * len(t)
        cols += range(start, start + len(t))
        ids += [int(x) for x in t]
        owner += [b] * len(t)
    # logits only where a target token is predicted
    logp = log_softmax(backbone.logits(h[torch.tensor(rows), torch.tensor(cols)]), dim=-1)
    picked = -logp[torch.arange(len(ids)), torch.tensor(ids)]
    sums = torch.zeros(len(seqs), dtype=picked.dtype).index_add(0, torch.tensor(owner), picked)
    return sums, torch.tensor([len(t) for t in targets]), h, lengths


def captioning_loss(backbone: Backbone, prefix: TokenSequence, target_tokens: Sequence[int]) -> tuple[torch.Tensor, float]:
    """Summed next-token NLL of the target under teacher forcing, plus per-token mean."""
    sums, counts, _, _ = sequence_nll(backbone, [prefix], [target_tokens])
    return sums[0], float(sums[0].detach()) / int(counts[0])


def info_nce(anchors: torch.Tensor, candidates: torch.Tensor, positive_index: torch.Tensor, tau=0.07) -> torch.Tensor:
    """Anchor-side InfoNCE with an arbitrary candidate set (e.g. extra hard negatives)."""
    sims = cosine_matrix(anchors, candidates) / _tau(tau)
    return -log_softmax(sims, dim=1)[torch.arange(anchors.shape[0]), positive_index].mean()
