"""Prompting mask queries with sounding-object semantics.

Decoder mask queries attend over the audio-enriched cue features through
single-head scaled dot-product attention; the cue mask is broadcast-added to
the attention logits so masked cues receive exactly zero weight. The result
is added residually onto the queries. The output projection starts at zero,
so prompting is a no-op at step 0 and the pre-trained decoder behavior is
preserved until training opts in.

When every cue is masked the softmax would be degenerate; that case
short-circuits to the identity, which is also the semantically right answer:
no sounding-object evidence, leave the queries alone.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import PmqsConfig
from .errors import NumericError
from .sedam import NEG_INF, SoundingObjectFeature


class QueryPrompter(nn.Module):
    def __init__(self, cfg: PmqsConfig, d_query: int, d_cue: int):
        super().__init__()
        if cfg.d_attn % cfg.heads != 0:
            raise ValueError("d_attn must be divisible by heads")
        self.heads = cfg.heads
        self.d_head = cfg.d_attn // cfg.heads
        self.q_proj = nn.Linear(d_query, cfg.d_attn, bias=False)
        self.k_proj = nn.Linear(d_cue, cfg.d_attn, bias=False)
        self.v_proj = nn.Linear(d_cue, cfg.d_attn)
        self.out_proj = nn.Linear(cfg.d_attn, d_query)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def _logits(self, queries: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        b, nq, _ = queries.shape
        nk = values.shape[1]
        q = self.q_proj(queries).view(b, nq, self.heads, self.d_head).transpose(1, 2)
        k = self.k_proj(values).view(b, nk, self.heads, self.d_head).transpose(1, 2)
        return q @ k.transpose(-1, -2) / math.sqrt(self.heads * self.d_head)

    def attention_weights(
        self, queries: torch.Tensor, sof: SoundingObjectFeature
    ) -> torch.Tensor:
        """Softmax matrix [..., N_Q, N_T]; masked columns are exactly zero and
        fully-masked samples get an all-zero matrix."""
        queries, values, mask, squeeze = _as_batched(queries, sof)
        logits = self._logits(queries, values) + mask[:, None, None, :]
        weights = torch.softmax(logits, dim=-1).mean(dim=1)
        blocked = (mask == NEG_INF).all(dim=-1)
        weights = torch.where(blocked[:, None, None], torch.zeros_like(weights), weights)
        return weights[0] if squeeze else weights

    def forward(
        self, queries: torch.Tensor, sof: SoundingObjectFeature
    ) -> torch.Tensor:
        queries_b, values, mask, squeeze = _as_batched(queries, sof)
        if torch.isnan(queries_b).any() or torch.isnan(values).any():
            raise NumericError("NaN input to query prompting")
        b, nq, _ = queries_b.shape
        logits = self._logits(queries_b, values) + mask[:, None, None, :]
        attn = torch.softmax(logits, dim=-1)
        v = self.v_proj(values).view(b, -1, self.heads, self.d_head).transpose(1, 2)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, -1)
        prompted = queries_b + self.out_proj(out)
        # degenerate-mask guard: no unmasked cue means no update at all
        blocked = (mask == NEG_INF).all(dim=-1)
        prompted = torch.where(blocked[:, None, None], queries_b, prompted)
        return prompted[0] if squeeze else prompted


def _as_batched(queries: torch.Tensor, sof: SoundingObjectFeature):
    values, mask = sof.values, sof.mask
    squeeze = queries.dim() == 2
    if squeeze:
        queries = queries.unsqueeze(0)
    if values.dim() == 2:
        values = values.unsqueeze(0)
        mask = mask.unsqueeze(0)
    if values.shape[0] != queries.shape[0]:
        raise ValueError("batch size mismatch between queries and cue features")
    return queries, values, mask, squeeze
