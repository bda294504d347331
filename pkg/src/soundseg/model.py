"""End-to-end model: frozen encoders, crossmodal audio-text block, query
prompting, and the adapter-tuned segmentation decoder.

Ablation switches mirror the CLI variants: each toggles exactly one
mechanism so comparisons isolate a single cause.
"""

from __future__ import annotations

import torch
from torch import nn

from .adapters import AdapterSet
from .config import ExperimentConfig
from .encoders import EncoderBundle, TextFeature, build_encoders
from .pmqs import QueryPrompter
from .sedam import NEG_INF, SedamModule, SoundingObjectFeature, apply_alignment_init
from .segmodel import PixelDecoder, SegmentationDecoder, SegmentationOutput


class SoundSegModel(nn.Module):
    def __init__(self, cfg: ExperimentConfig, encoders: EncoderBundle):
        super().__init__()
        self.cfg = cfg
        self.encoders = encoders
        d_V = cfg.encoders.d_V
        d_A = cfg.encoders.d_A
        self.adapters = AdapterSet(
            d_V,
            cfg.model.adapter_ratio,
            counts={
                "visual_attention_out": 3,
                "pixel_decoder_out": 1,
                "masked_attention_out": cfg.model.decoder_depth,
            },
        )
        self.sedam = SedamModule(cfg.sedam, d_A=d_A, d_T=cfg.encoders.d_T)
        apply_alignment_init(
            self.sedam, encoders.audio.text_to_audio, seed=cfg.encoders.encoder_seed
        )
        self.prompter = QueryPrompter(cfg.pmqs, d_query=d_V, d_cue=d_A)
        # used only by the "skip the crossmodal block" ablation
        self.bypass_proj = nn.Linear(cfg.sedam.d_AL, d_A)
        self.query_embed = nn.Embedding(cfg.pmqs.N_Q, d_V)
        nn.init.normal_(self.query_embed.weight, std=0.5)
        size = cfg.data.image_size
        self.pixel_decoder = PixelDecoder(d_V)
        self.decoder = SegmentationDecoder(
            cfg.model, d_V, token_hw=(size // 4, size // 4)
        )
        self.register_buffer(
            "silence_row",
            torch.from_numpy(encoders.audio.silence_embedding).float(),
        )
        self.visual = encoders.visual  # frozen; registered for state_dict only

        # ablation switches
        self.zero_text = False
        self.disable_mask = False
        self.mute_audio = False
        self.no_prompting = False
        self.bypass_sedam = False

    def set_variant(self, variant: str) -> None:
        flags = {
            "full": {},
            "no_text": {"zero_text": True, "disable_mask": True},
            "no_audio": {"mute_audio": True},
            "no_text_audio": {
                "zero_text": True,
                "disable_mask": True,
                "mute_audio": True,
            },
            "no_dynamic_mask": {"disable_mask": True},
            "no_pmqs": {"no_prompting": True},
            "no_sedam": {"bypass_sedam": True},
            # loss- and cue-level variants leave the forward path intact
            "no_infonce": {},
            "noun_parser": {},
            "one_shot": {},
        }
        if variant not in flags:
            raise ValueError(f"unknown variant {variant!r}")
        for name in ("zero_text", "disable_mask", "mute_audio", "no_prompting", "bypass_sedam"):
            setattr(self, name, False)
        for name, value in flags[variant].items():
            setattr(self, name, value)

    def forward(
        self, batch: dict[str, torch.Tensor]
    ) -> tuple[SegmentationOutput, SoundingObjectFeature, torch.Tensor]:
        images = batch["image"]
        audio = batch["audio"]
        text = batch["text"]
        valid = batch["valid"]
        b = images.shape[0]
        if self.mute_audio:
            audio = self.silence_row.unsqueeze(0).expand(b, -1).to(audio.dtype)
        if self.zero_text:
            text = torch.zeros_like(text)
        sof, bank = self.sedam(text, valid, audio)
        if self.zero_text:
            mask = torch.zeros_like(sof.mask)
        elif self.disable_mask:
            mask = torch.where(valid, 0.0, NEG_INF).to(sof.mask.dtype)
        else:
            mask = sof.mask
        sof = SoundingObjectFeature(values=sof.values, mask=mask, scores=sof.scores)

        queries = self.query_embed.weight.unsqueeze(0).expand(b, -1, -1)
        if self.no_prompting:
            prompted = queries
        elif self.bypass_sedam:
            raw = SoundingObjectFeature(
                values=self.bypass_proj(bank),
                mask=torch.zeros(bank.shape[:2], dtype=bank.dtype),
                scores=torch.zeros(bank.shape[:2], dtype=bank.dtype),
            )
            prompted = self.prompter(queries, raw)
        else:
            prompted = self.prompter(queries, sof)

        fmap = self.encoders.visual.encode_visual(images, self.adapters)
        pixel_embed = self.pixel_decoder(fmap.levels, self.adapters)
        out = self.decoder(
            prompted, pixel_embed, self.adapters, out_size=images.shape[-2:]
        )
        return out, sof, bank

    def parameter_groups(self) -> list[dict]:
        """Two groups: visual-encoder adapters at the smaller rate, every
        other trainable parameter at the base rate."""
        visual_adapters = set(
            id(p) for p in self.adapters.site_parameters("visual_attention_out")
        )
        group_a, group_b = [], []
        for p in self.parameters():
            if not p.requires_grad:
                continue
            (group_a if id(p) in visual_adapters else group_b).append(p)
        return [
            {"params": group_a, "lr": self.cfg.optimizer.lr_adapters},
            {"params": group_b, "lr": self.cfg.optimizer.lr_other},
        ]


def build_model(cfg: ExperimentConfig) -> tuple[SoundSegModel, EncoderBundle]:
    encoders = build_encoders(cfg.encoders, cfg.data.vocabulary, cfg.data.image_size)
    return SoundSegModel(cfg, encoders), encoders


def prepare_sample(
    sample,
    cues: list[str],
    encoders: EncoderBundle,
    n_t: int,
) -> dict:
    from .segmodel import targets_from_mask

    audio = encoders.audio.encode_audio(sample.audio_signature, T=1).values[0]
    tf: TextFeature = encoders.text.encode_text_cues(cues, n_t)
    return {
        "sample_id": sample.sample_id,
        "image": torch.from_numpy(sample.image.copy()),
        "audio": audio,
        "text": tf.values,
        "valid": tf.valid,
        "targets": targets_from_mask(sample.gt_mask),
        "gt_foreground": torch.from_numpy((sample.gt_mask > 0).copy()),
        "cues": list(cues),
    }


def collate(packs: list[dict]) -> dict:
    return {
        "sample_id": [p["sample_id"] for p in packs],
        "image": torch.stack([p["image"] for p in packs]),
        "audio": torch.stack([p["audio"] for p in packs]),
        "text": torch.stack([p["text"] for p in packs]),
        "valid": torch.stack([p["valid"] for p in packs]),
        "targets": [p["targets"] for p in packs],
        "gt_foreground": torch.stack([p["gt_foreground"] for p in packs]),
        "cues": [p["cues"] for p in packs],
    }
