"""Frozen stand-in encoders behind the audio/visual/text interfaces.

The stand-ins are seeded random projections over structured inputs. They keep
the properties downstream math consumes — output shapes, determinism,
frozenness — while staying cheap enough for CPU tests. Real backbones can be
dropped in through the registry as long as they honor the same contracts.

The audio and text stand-ins share one latent category basis: the audio
embedding of a category is a fixed orthonormal projection of its text
embedding. Cross-modal agreement is therefore a linear relation the model can
exploit from initialization, standing in for the semantic alignment that
pretrained encoders bring.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .adapters import AdapterSet
from .config import EncoderConfig
from .synthdata import AudioSignature

CUE_TEMPLATE = "This is a {}."


@dataclass
class AudioFeature:
    values: torch.Tensor  # [T, d_A]
    T: int


@dataclass
class VisualFeatureMap:
    levels: list[torch.Tensor]  # each [B, d_V, H_l, W_l], strictly decreasing scale
    source_size: tuple[int, int]


@dataclass
class TextFeature:
    values: torch.Tensor  # [N_T, d_T]; padding rows are exactly zero
    valid: torch.Tensor  # bool [N_T]


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    m = rng.normal(size=(rows, max(rows, cols)))
    q, _ = np.linalg.qr(m)
    return q[:, :cols]


class ToyTextEmbedder:
    """Deterministic sentence embedder standing in for a text encoder.

    Vocabulary categories map to fixed orthonormal directions; any other
    sentence maps to a hashed unit vector. Cues are wrapped in
    ``CUE_TEMPLATE`` before embedding.
    """

    def __init__(self, vocabulary: list[str], d_T: int, seed: int):
        if len(vocabulary) > d_T:
            raise ValueError("d_T must be at least the vocabulary size")
        self.vocabulary = list(vocabulary)
        self.d_T = d_T
        rng = np.random.default_rng(seed)
        basis = _orthonormal_columns(rng, d_T, len(vocabulary))  # [d_T, K]
        self._table = {
            CUE_TEMPLATE.format(cat): basis[:, i].astype(np.float64)
            for i, cat in enumerate(vocabulary)
        }
        self.category_basis = basis  # [d_T, K]

    def sentence_for(self, cue: str) -> str:
        return CUE_TEMPLATE.format(cue)

    def embed_sentence(self, sentence: str) -> np.ndarray:
        if sentence in self._table:
            return self._table[sentence]
        digest = hashlib.sha256(sentence.encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        v = rng.normal(size=self.d_T)
        return v / np.linalg.norm(v)

    def encode_text_cues(self, cues: list[str], N_T: int) -> TextFeature:
        values = torch.zeros(N_T, self.d_T, dtype=torch.float32)
        valid = torch.zeros(N_T, dtype=torch.bool)
        for i, cue in enumerate(cues[:N_T]):
            vec = self.embed_sentence(self.sentence_for(cue))
            values[i] = torch.from_numpy(vec).float()
            valid[i] = True
        return TextFeature(values=values, valid=valid)


class ToyAudioEncoder:
    """Frozen audio feature stand-in.

    A signature's feature is the sum of its categories' embeddings (scaled by
    1/sqrt(multiplicity)) minus a small "gate" component, plus per-clip
    Gaussian noise. Silence maps to a reserved embedding that anti-aligns
    with every category direction, so it is distinct from any mixture and
    sits on the negative side of category-agreement scores.
    """

    def __init__(
        self,
        vocabulary: list[str],
        d_A: int,
        seed: int,
        text: ToyTextEmbedder,
        clip_noise: float = 0.05,
        gate: float = 0.5,
        silence_strength: float = 2.0,
    ):
        if d_A < text.d_T:
            raise ValueError("d_A must be at least d_T")
        self.vocabulary = list(vocabulary)
        self.d_A = d_A
        self.clip_noise = float(clip_noise)
        self.gate = float(gate)
        rng = np.random.default_rng(seed + 101)
        # column-orthonormal lift from text space into audio space
        self.text_to_audio = _orthonormal_columns(rng, d_A, text.d_T)  # [d_A, d_T]
        k = len(vocabulary)
        self._cat_vecs = {
            cat: self.text_to_audio @ text.category_basis[:, i]
            for i, cat in enumerate(vocabulary)
        }
        mean_dir = text.category_basis.sum(axis=1) / np.sqrt(k)
        self._gate_vec = self.text_to_audio @ mean_dir
        self.silence_embedding = (
            -float(silence_strength) * self._gate_vec
        ).astype(np.float64)

    def category_embedding(self, category: str) -> np.ndarray:
        return self._cat_vecs[category]

    def mean_category_power(self) -> float:
        return float(np.mean([np.sum(v**2) for v in self._cat_vecs.values()]))

    def _base_vector(self, signature: AudioSignature) -> np.ndarray:
        if signature.kind == "mute":
            return self.silence_embedding
        if signature.kind == "wgn":
            return self.silence_embedding
        counts = {c: n for c, n in signature.counts.items() if n > 0}
        if not counts:
            return self.silence_embedding
        total = sum(counts.values())
        mix = np.zeros(self.d_A)
        for cat, n in counts.items():
            if cat not in self._cat_vecs:
                raise ValueError(f"category {cat!r} unknown to audio encoder")
            mix += n * self._cat_vecs[cat]
        return mix / np.sqrt(total) - self.gate * self._gate_vec

    def encode_audio(self, signature: AudioSignature, T: int) -> AudioFeature:
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        base = self._base_vector(signature)
        rows = np.tile(base, (T, 1))
        if signature.kind == "wgn":
            if signature.snr_db is None:
                raise ValueError("wgn signature requires snr_db")
            snr_lin = 10.0 ** (signature.snr_db / 10.0)
            var = self.mean_category_power() / snr_lin / self.d_A
            rng = np.random.default_rng(signature.seed)
            rows = rows + np.sqrt(var) * rng.normal(size=rows.shape)
        elif signature.kind == "normal":
            if self.clip_noise > 0 and signature.seed is not None:
                rng = np.random.default_rng(signature.seed)
                rows = rows + self.clip_noise * rng.normal(size=rows.shape)
        # "mute" stays exactly the silence embedding
        return AudioFeature(values=torch.from_numpy(rows).float(), T=T)


class ToyVisualBackbone(nn.Module):
    """Frozen convolutional stand-in producing a three-scale feature pyramid.

    Weights come from a seeded generator and never receive gradients; the
    only trainable pieces near the backbone are the per-level bottleneck
    adapters applied to its outputs.
    """

    def __init__(self, d_V: int, seed: int, image_size: int = 64):
        super().__init__()
        self.d_V = d_V
        self.image_size = image_size
        g = torch.Generator().manual_seed(seed + 202)
        widths = [3, 32, d_V, d_V, d_V]
        convs = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            conv = nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                std = (2.0 / (cin * 9)) ** 0.5
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=g) * std
                )
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = (images - 0.5) * 2.0
        feats = []
        for conv in self.convs:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats[-3:]  # strides 4, 8, 16

    def encode_visual(
        self, images: torch.Tensor, adapters: AdapterSet | None = None
    ) -> VisualFeatureMap:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} images, "
                f"got {tuple(images.shape[-2:])}"
            )
        with torch.no_grad():
            levels = self.forward(images)
        levels = [lvl.clone() for lvl in levels]
        if adapters is not None:
            adapted = []
            for i, lvl in enumerate(levels):
                x = lvl.permute(0, 2, 3, 1)  # channels last for the adapter MLP
                x = adapters.apply("visual_attention_out", i, x)
                adapted.append(x.permute(0, 3, 1, 2))
            levels = adapted
        return VisualFeatureMap(
            levels=levels, source_size=tuple(images.shape[-2:])
        )


@dataclass
class EncoderBundle:
    audio: ToyAudioEncoder
    visual: ToyVisualBackbone
    text: ToyTextEmbedder


ENCODER_REGISTRY = {}


def register_encoder(name: str):
    def wrap(fn):
        ENCODER_REGISTRY[name] = fn
        return fn

    return wrap


@register_encoder("toy")
def _build_toy(cfg: EncoderConfig, vocabulary: list[str], image_size: int) -> EncoderBundle:
    text = ToyTextEmbedder(vocabulary, cfg.d_T, cfg.encoder_seed)
    audio = ToyAudioEncoder(
        vocabulary,
        cfg.d_A,
        cfg.encoder_seed,
        text,
        clip_noise=cfg.audio_clip_noise,
        gate=cfg.audio_gate,
        silence_strength=cfg.silence_strength,
    )
    visual = ToyVisualBackbone(cfg.d_V, cfg.encoder_seed, image_size)
    return EncoderBundle(audio=audio, visual=visual, text=text)


def build_encoders(
    cfg: EncoderConfig, vocabulary: list[str], image_size: int
) -> EncoderBundle:
    names = {cfg.audio, cfg.visual, cfg.text}
    if names != {"toy"}:
        for n in names:
            if n not in ENCODER_REGISTRY:
                raise ValueError(f"unknown encoder {n!r}")
        raise ValueError("mixed encoder families are not supported")
    return ENCODER_REGISTRY["toy"](cfg, vocabulary, image_size)
