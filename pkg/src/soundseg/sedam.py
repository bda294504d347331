"""Semantics-driven audio modeling.

One frame's audio vector is projected into a bank of latent audio features.
Text cues (queries) attend over the bank (keys/values) through a stack of
crossmodal layers; each layer adds the attended audio to the cue state and
renormalizes.

Each cue also gets an agreement score: the scaled dot product of its raw
text feature with the latent bank, averaged over latents. The raw text side
is frozen, which anchors the score's sign against training drift; latents of
categories present in the audio push it positive, silence and absent
categories land negative. Cues with non-positive scores get masked out
downstream.

The mask sentinel is a large negative finite constant rather than true -inf
so softmax stays NaN-free even when every position is masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import SedamConfig
from .errors import NumericError

NEG_INF = -1.0e9


@dataclass
class SoundingObjectFeature:
    values: torch.Tensor  # [..., N_T, d_A] cue features enriched with audio
    mask: torch.Tensor  # [..., N_T] entries exactly 0 or NEG_INF
    scores: torch.Tensor  # [..., N_T] pooled pre-softmax attention logits

    @property
    def fully_masked(self) -> torch.Tensor:
        return (self.mask == NEG_INF).all(dim=-1)


def dynamic_mask(scores: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Keep (mask value 0) exactly the positions with score > 0; padding
    positions are always masked regardless of score."""
    if torch.isnan(scores).any():
        raise NumericError("NaN in attention scores")
    keep = (scores > 0) & valid.to(torch.bool)
    return torch.where(
        keep,
        torch.zeros((), dtype=scores.dtype),
        torch.full((), NEG_INF, dtype=scores.dtype),
    ).to(scores.dtype)


def agreement_scores(text_values: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Scaled text-latent agreement, averaged over the key dimension.

    text_values [..., N_T, d], bank [..., N_L, d] -> [..., N_T]. Both sides
    must share the feature width. Zero (padding) text rows score exactly 0;
    permuting the latents leaves the score unchanged.
    """
    if text_values.shape[-1] != bank.shape[-1]:
        raise ValueError(
            "text and latent widths differ "
            f"({text_values.shape[-1]} vs {bank.shape[-1]}); the agreement "
            "score needs d_T == d_AL"
        )
    d = bank.shape[-1]
    return (text_values @ bank.transpose(-1, -2) / math.sqrt(d)).mean(dim=-1)


def info_nce_loss(bank: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Distinctness pressure on the latent bank.

    Each latent is its own positive; the denominator runs over cosine
    similarities to every latent in the bank. Minimized when the latents
    are mutually anti-aligned, so the projection cannot collapse.
    """
    if bank.shape[-2] < 2:
        raise ValueError("need at least two latents")
    normed = bank / bank.norm(dim=-1, keepdim=True).clamp_min(eps)
    sim = normed @ normed.transpose(-1, -2)
    pos = torch.diagonal(sim, dim1=-2, dim2=-1)
    return (torch.logsumexp(sim, dim=-1) - pos).mean()


class CrossmodalAttention(nn.Module):
    """Multi-head attention that also returns its pre-softmax scaled logits.

    Query/key projections carry no bias so a zero query row yields exactly
    zero logits.
    """

    def __init__(self, d_query: int, d_key: int, d_model: int, d_out: int, heads: int):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.q_proj = nn.Linear(d_query, d_model, bias=False)
        self.k_proj = nn.Linear(d_key, d_model, bias=False)
        self.v_proj = nn.Linear(d_key, d_model)
        self.out_proj = nn.Linear(d_model, d_out)
        nn.init.normal_(self.out_proj.weight, std=0.02)
        nn.init.zeros_(self.out_proj.bias)

    def forward(
        self, query: torch.Tensor, keys: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """query [B, Nq, d_query], keys [B, Nk, d_key] ->
        (output [B, Nq, d_out], logits [B, H, Nq, Nk])."""
        b, nq, _ = query.shape
        nk = keys.shape[1]
        q = self.q_proj(query).view(b, nq, self.heads, self.d_head).transpose(1, 2)
        k = self.k_proj(keys).view(b, nk, self.heads, self.d_head).transpose(1, 2)
        v = self.v_proj(keys).view(b, nk, self.heads, self.d_head).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, -1)
        return self.out_proj(out), logits


class CrossmodalLayer(nn.Module):
    def __init__(self, d_model: int, d_key: int, heads: int):
        super().__init__()
        self.attn = CrossmodalAttention(d_model, d_key, d_model, d_model, heads)
        self.norm = nn.LayerNorm(d_model)
        self.fc = nn.Linear(d_model, d_model)

    def combine(self, x: torch.Tensor, attended: torch.Tensor) -> torch.Tensor:
        return self.fc(self.norm(x + attended))

    def forward(
        self, x: torch.Tensor, bank: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        attended, logits = self.attn(x, bank)
        return self.combine(x, attended), logits


class SedamModule(nn.Module):
    """Full block: latent projection + N crossmodal layers + dynamic mask."""

    def __init__(self, cfg: SedamConfig, d_A: int, d_T: int):
        super().__init__()
        self.cfg = cfg
        self.d_A = d_A
        self.d_T = d_T
        self.latent_proj = nn.Linear(d_A, cfg.N_L * cfg.d_AL)
        self.text_in = nn.Linear(d_T, d_A, bias=False)
        self.layers = nn.ModuleList(
            CrossmodalLayer(d_A, cfg.d_AL, cfg.heads) for _ in range(cfg.N)
        )

    def project_latents(self, audio_row: torch.Tensor) -> torch.Tensor:
        """[..., d_A] -> [..., N_L, d_AL]."""
        if audio_row.shape[-1] != self.d_A:
            raise ValueError(
                f"expected audio width {self.d_A}, got {audio_row.shape[-1]}"
            )
        flat = self.latent_proj(audio_row)
        return flat.view(*audio_row.shape[:-1], self.cfg.N_L, self.cfg.d_AL)

    def forward(
        self,
        text_values: torch.Tensor,
        valid: torch.Tensor,
        audio_row: torch.Tensor,
    ) -> tuple[SoundingObjectFeature, torch.Tensor]:
        """text_values [B, N_T, d_T], valid [B, N_T], audio_row [B, d_A]."""
        squeeze = text_values.dim() == 2
        if squeeze:
            text_values = text_values.unsqueeze(0)
            valid = valid.unsqueeze(0)
            audio_row = audio_row.unsqueeze(0)
        bank = self.project_latents(audio_row)
        x = self.text_in(text_values)
        for layer in self.layers:
            x, _ = layer(x, bank)
        scores = agreement_scores(text_values, bank)
        mask = dynamic_mask(scores, valid)
        if squeeze:
            x, mask, scores, bank = x[0], mask[0], scores[0], bank[0]
        return SoundingObjectFeature(values=x, mask=mask, scores=scores), bank


def apply_alignment_init(
    module: SedamModule,
    text_to_audio: np.ndarray,
    seed: int,
    collapse_eps: float = 0.02,
) -> None:
    """Initialize the block so cross-modal category agreement is visible
    before any training.

    ``text_to_audio`` is the frozen lift the audio stand-in shares with the
    text embedder. The latent projection starts as near-identical copies of
    the inverse lift, so each latent is roughly the audio mixture expressed
    in the text basis and the agreement score separates present from absent
    categories immediately; the distinctness loss is what drives the copies
    apart during training. The text input projection starts as the lift
    itself and the per-layer linear starts near identity. Swapping in
    encoders without such a lift should skip this and keep default init.
    """
    d_A, d_T = text_to_audio.shape
    cfg = module.cfg
    if cfg.d_AL != d_T:
        raise ValueError("alignment init needs d_AL == d_T")
    rng = np.random.default_rng(seed + 303)
    copies = [
        np.eye(cfg.d_AL) + collapse_eps * rng.normal(size=(cfg.d_AL, d_T))
        for _ in range(cfg.N_L)
    ]
    with torch.no_grad():
        w_lat = np.vstack([h @ text_to_audio.T for h in copies])
        module.latent_proj.weight.copy_(torch.from_numpy(w_lat).float())
        module.latent_proj.bias.zero_()
        module.text_in.weight.copy_(torch.from_numpy(text_to_audio).float())
        for layer in module.layers:
            eye = torch.eye(module.d_A)
            noise = torch.from_numpy(
                rng.normal(scale=0.02, size=(module.d_A, module.d_A))
            ).float()
            layer.fc.weight.copy_(eye + noise)
            layer.fc.bias.zero_()
