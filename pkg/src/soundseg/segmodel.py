"""Toy audio-prompted segmentation decoder and its training losses.

The pixel decoder is a small FPN-style fusion (lateral 1x1 projections,
top-down upsampling, sum) rather than multi-scale deformable attention, but
it keeps the same adapter insertion point on its output. A 3-layer
transformer decoder with masked cross-attention refines the prompted queries;
a mask head dots query embeddings against per-pixel embeddings, a class head
maps query states to class logits (index 0 is the no-object slot), and the
final prediction contracts class probabilities with sigmoid mask logits over
the query axis.

Losses follow the mask-classification recipe: per-pair binary cross-entropy
plus dice for matched masks, cross-entropy over all queries for classes, and
the latent-distinctness term on the audio bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from .adapters import AdapterSet
from .config import LossConfig, ModelConfig
from .encoders import VisualFeatureMap
from .sedam import NEG_INF, info_nce_loss


@dataclass
class SegmentationOutput:
    M_Q: torch.Tensor  # [B, N_Q, H, W] per-query mask logits
    C_Q: torch.Tensor  # [B, N_Q, N_C] class logits, index 0 = no-object
    M_pred: torch.Tensor  # [B, N_C, H, W] assembled prediction


class PixelDecoder(nn.Module):
    """Fuse the feature pyramid into a per-pixel embedding at the finest
    scale (stride 4)."""

    def __init__(self, d_V: int, n_levels: int = 3):
        super().__init__()
        self.laterals = nn.ModuleList(
            nn.Conv2d(d_V, d_V, kernel_size=1) for _ in range(n_levels)
        )
        self.out_conv = nn.Conv2d(d_V, d_V, kernel_size=3, padding=1)

    def forward(self, levels: list[torch.Tensor], adapters: AdapterSet) -> torch.Tensor:
        laterals = [proj(lvl) for proj, lvl in zip(self.laterals, levels)]
        x = laterals[-1]
        for lat in reversed(laterals[:-1]):
            x = F.interpolate(x, size=lat.shape[-2:], mode="nearest") + lat
        x = self.out_conv(x)
        x = adapters.apply("pixel_decoder_out", 0, x.permute(0, 2, 3, 1))
        return x.permute(0, 3, 1, 2)  # [B, d_V, H/4, W/4]


class MaskedCrossAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(
        self, queries: torch.Tensor, tokens: torch.Tensor, attn_mask: torch.Tensor
    ) -> torch.Tensor:
        """attn_mask [B, N_Q, N_tok] additive (0 or NEG_INF)."""
        b, nq, _ = queries.shape
        q = self.q_proj(queries).view(b, nq, self.heads, self.d_head).transpose(1, 2)
        k = self.k_proj(tokens).view(b, -1, self.heads, self.d_head).transpose(1, 2)
        v = self.v_proj(tokens).view(b, -1, self.heads, self.d_head).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / self.d_head**0.5
        logits = logits + attn_mask[:, None]
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, -1)
        return self.out_proj(out)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.cross = MaskedCrossAttention(d_model, heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiheadAttention(d_model, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, queries, tokens, attn_mask, adapters, layer_idx):
        attended = self.cross(queries, tokens, attn_mask)
        attended = adapters.apply("masked_attention_out", layer_idx, attended)
        queries = self.norm1(queries + attended)
        sa, _ = self.self_attn(queries, queries, queries, need_weights=False)
        queries = self.norm2(queries + sa)
        queries = self.norm3(queries + self.ffn(queries))
        return queries


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, depth: int = 3):
        super().__init__()
        dims = [d_in] + [d_hidden] * (depth - 1) + [d_out]
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = torch.relu(x)
        return x


class SegmentationDecoder(nn.Module):
    """Transformer decoder over the fused pixel embedding; per-layer mask
    predictions restrict where each query may attend."""

    def __init__(self, cfg: ModelConfig, d_V: int, token_hw: tuple[int, int]):
        super().__init__()
        self.cfg = cfg
        self.d_V = d_V
        self.token_hw = token_hw
        n_tokens = token_hw[0] * token_hw[1]
        self.token_pos = nn.Parameter(torch.randn(n_tokens, d_V) * 0.02)
        self.layers = nn.ModuleList(
            DecoderLayer(d_V, cfg.decoder_heads) for _ in range(cfg.decoder_depth)
        )
        self.query_norm = nn.LayerNorm(d_V)
        self.mask_embed = MLP(d_V, d_V, d_V)
        self.class_head = nn.Linear(d_V, cfg.N_C)

    def _mask_logits(self, queries: torch.Tensor, pixel_embed: torch.Tensor):
        emb = self.mask_embed(self.query_norm(queries))
        return torch.einsum("bqd,bdhw->bqhw", emb, pixel_embed)

    def _attn_mask(self, mask_logits: torch.Tensor) -> torch.Tensor:
        b, nq = mask_logits.shape[:2]
        keep = (mask_logits.flatten(2).sigmoid() > 0.5)
        # a query whose predicted mask is empty attends everywhere instead
        empty = ~keep.any(dim=-1, keepdim=True)
        keep = keep | empty
        return torch.where(keep, 0.0, NEG_INF)

    def forward(
        self,
        prompted_queries: torch.Tensor,
        pixel_embed: torch.Tensor,
        adapters: AdapterSet,
        out_size: tuple[int, int],
    ) -> SegmentationOutput:
        b = pixel_embed.shape[0]
        tokens = pixel_embed.flatten(2).transpose(1, 2) + self.token_pos
        queries = prompted_queries
        mask_logits = self._mask_logits(queries, pixel_embed)
        for i, layer in enumerate(self.layers):
            attn_mask = self._attn_mask(mask_logits).detach()
            queries = layer(queries, tokens, attn_mask, adapters, i)
            mask_logits = self._mask_logits(queries, pixel_embed)
        m_q = F.interpolate(
            mask_logits, size=out_size, mode="bilinear", align_corners=False
        )
        c_q = self.class_head(queries)
        return SegmentationOutput(M_Q=m_q, C_Q=c_q, M_pred=assemble_prediction(c_q, m_q))


def assemble_prediction(C_Q: torch.Tensor, M_Q: torch.Tensor) -> torch.Tensor:
    """Contract class probabilities (no-object excluded) with sigmoid mask
    logits over the query axis; row 0 of the result stays zero."""
    probs = torch.softmax(C_Q, dim=-1)
    masks = torch.sigmoid(M_Q)
    real = torch.einsum("bqc,bqhw->bchw", probs[..., 1:], masks)
    zero = torch.zeros_like(real[:, :1])
    return torch.cat([zero, real], dim=1)


def binary_foreground(M_pred: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Union of per-class masks thresholded after contraction."""
    return (M_pred[:, 1:] > threshold).any(dim=1)


def semantic_labels(M_pred: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Per-pixel argmax over classes; background wins when no class clears
    the threshold (row 0 acts as a constant-threshold background score)."""
    scored = M_pred.clone()
    scored[:, 0] = threshold
    return scored.argmax(dim=1)


def bce_dice_loss(
    pred_logits: torch.Tensor, gt_mask: torch.Tensor, smooth: float = 1.0
) -> tuple[torch.Tensor, torch.Tensor]:
    if pred_logits.shape != gt_mask.shape:
        raise ValueError("prediction and ground truth shapes differ")
    gt = gt_mask.to(pred_logits.dtype)
    if not torch.logical_or(gt == 0, gt == 1).all():
        raise ValueError("ground-truth mask must be binary")
    bce = F.binary_cross_entropy_with_logits(pred_logits, gt)
    p = torch.sigmoid(pred_logits)
    inter = (p * gt).sum()
    dice = 1.0 - (2.0 * inter + smooth) / (p.sum() + gt.sum() + smooth)
    return bce, dice


def _pairwise_mask_costs(
    mask_logits: torch.Tensor, gt_masks: torch.Tensor, smooth: float = 1.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """BCE and dice between every (query, target) pair.

    mask_logits [N_Q, H, W], gt_masks [T, H, W] -> two [N_Q, T] tensors.
    """
    nq = mask_logits.shape[0]
    m = mask_logits.flatten(1)
    g = gt_masks.flatten(1).to(mask_logits.dtype)
    npix = m.shape[1]
    # mean BCE decomposes as softplus(x) - x*g averaged over pixels
    bce = (F.softplus(m).sum(dim=1)[:, None] - m @ g.T) / npix
    p = torch.sigmoid(m)
    inter = p @ g.T
    dice = 1.0 - (2.0 * inter + smooth) / (
        p.sum(dim=1)[:, None] + g.sum(dim=1)[None, :] + smooth
    )
    return bce, dice


def match_queries(
    mask_logits: torch.Tensor,
    class_logits: torch.Tensor,
    targets: list[tuple[int, torch.Tensor]],
    weights: LossConfig,
) -> list[tuple[int, int]]:
    """Minimum-cost assignment of queries to targets for one sample.

    Cost per pair: lambda_cls * (-p(class)) + lambda_bce * BCE + lambda_dice
    * dice. Queries left unmatched are trained toward no-object.
    """
    if not targets:
        return []
    if len(targets) > mask_logits.shape[0]:
        raise ValueError("more targets than queries")
    gt = torch.stack([m for _, m in targets])
    with torch.no_grad():
        bce, dice = _pairwise_mask_costs(mask_logits, gt)
        probs = torch.softmax(class_logits, dim=-1)
        cls_cost = -probs[:, [c for c, _ in targets]]
        cost = (
            weights.lambda_cls * cls_cost
            + weights.lambda_bce * bce
            + weights.lambda_dice * dice
        )
    rows, cols = linear_sum_assignment(cost.double().numpy())
    return sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])


def total_loss(
    outputs: SegmentationOutput,
    targets_per_sample: list[list[tuple[int, torch.Tensor]]],
    bank: torch.Tensor,
    weights: LossConfig,
    nce_eps: float = 1e-8,
) -> dict[str, torch.Tensor]:
    """Batch loss with per-component breakdown.

    L_mask averages lambda_bce*BCE + lambda_dice*dice over matched pairs,
    L_cls is cross-entropy over all queries (no-object for unmatched), and
    the latent-distinctness term is added with its own weight.
    """
    b, nq = outputs.C_Q.shape[:2]
    device = outputs.C_Q.device
    dtype = outputs.C_Q.dtype
    mask_terms = []
    bce_terms = []
    dice_terms = []
    cls_terms = []
    for i in range(b):
        targets = targets_per_sample[i]
        assignment = match_queries(
            outputs.M_Q[i], outputs.C_Q[i], targets, weights
        )
        labels = torch.zeros(nq, dtype=torch.long, device=device)
        for q, t in assignment:
            cls_idx, gt_mask = targets[t]
            labels[q] = cls_idx
            bce, dice = bce_dice_loss(outputs.M_Q[i, q], gt_mask)
            bce_terms.append(bce)
            dice_terms.append(dice)
            mask_terms.append(weights.lambda_bce * bce + weights.lambda_dice * dice)
        cls_terms.append(F.cross_entropy(outputs.C_Q[i], labels))
    zero = torch.zeros((), dtype=dtype, device=device)
    l_mask = torch.stack(mask_terms).mean() if mask_terms else zero
    l_bce = torch.stack(bce_terms).mean() if bce_terms else zero
    l_dice = torch.stack(dice_terms).mean() if dice_terms else zero
    l_cls = torch.stack(cls_terms).mean()
    l_nce = info_nce_loss(bank, eps=nce_eps) if weights.lambda_infonce != 0 else zero
    total = l_mask + weights.lambda_cls * l_cls + weights.lambda_infonce * l_nce
    return {
        "total": total,
        "mask": l_mask,
        "bce": l_bce,
        "dice": l_dice,
        "cls": l_cls,
        "infonce": l_nce,
    }


def targets_from_mask(gt_mask: np.ndarray | torch.Tensor) -> list[tuple[int, torch.Tensor]]:
    """Per-class binary targets from an index mask (0 = background)."""
    if isinstance(gt_mask, np.ndarray):
        gt_mask = torch.from_numpy(gt_mask.astype(np.int64))
    targets = []
    for cls in sorted(int(c) for c in torch.unique(gt_mask) if c != 0):
        targets.append((cls, (gt_mask == cls).float()))
    return targets
