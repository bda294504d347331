"""Experiment configuration: one flat JSON file, dataclasses per block.

Every command resolves its config through :func:`load_config`, which fills
defaults, validates, and returns an :class:`ExperimentConfig`. The resolved
config is logged verbatim at the start of each run so results are
reproducible from the log alone.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

DEFAULT_VOCABULARY = [
    "guitar",
    "dog",
    "car",
    "piano",
    "bird",
    "phone",
    "bench",
    "plant",
]

# Environment variable naming the root directory for datasets, checkpoints,
# caches and reports. Relative paths in the config resolve against it.
ROOT_ENV_VAR = "SOUNDSEG_ROOT"


@dataclass
class DataConfig:
    root: str = "data/synth"
    image_size: int = 64
    vocabulary: list[str] = field(default_factory=lambda: list(DEFAULT_VOCABULARY))
    train_samples: int = 200
    val_samples: int = 40
    test_samples: int = 60
    min_objects: int = 1
    max_objects: int = 3
    # Probability that an audible object is currently silent.
    fraction_silent: float = 0.4
    # Probability that a whole scene is forced fully silent (blank mask).
    fully_silent_rate: float = 0.08
    # Probability that a silent object's caption phrase reads as if it were
    # sounding — the noise the attention-score mask is there to filter.
    overeager_caption_rate: float = 0.10


@dataclass
class EncoderConfig:
    d_A: int = 128
    d_V: int = 64
    d_T: int = 64
    encoder_seed: int = 1234
    audio: str = "toy"
    visual: str = "toy"
    text: str = "toy"
    # Std of the per-clip feature noise added by the audio stand-in.
    audio_clip_noise: float = 0.05
    # Weight of the negative "gate" direction mixed into every non-silent
    # audio embedding; absent-category cue scores land below zero.
    audio_gate: float = 0.5
    # Magnitude of the reserved silence embedding along the negative gate.
    silence_strength: float = 2.0


@dataclass
class SedamConfig:
    N_L: int = 8
    d_AL: int = 64
    N: int = 4
    heads: int = 8
    epsilon: float = 1e-8


@dataclass
class PmqsConfig:
    N_Q: int = 16
    heads: int = 1
    d_attn: int = 128


@dataclass
class ModelConfig:
    # Number of class logits, including the no-object slot at index 0.
    N_C: int = 9
    decoder_depth: int = 3
    decoder_heads: int = 4
    adapter_ratio: float = 0.25


@dataclass
class LossConfig:
    lambda_bce: float = 5.0
    lambda_dice: float = 5.0
    lambda_cls: float = 2.0
    lambda_infonce: float = 1.0


@dataclass
class OptimizerConfig:
    lr_adapters: float = 1e-4
    lr_other: float = 1e-3
    epochs: int = 60
    batch_size: int = 16
    weight_decay: float = 1e-4
    # Early stopping on val mIoU; <= 0 disables and runs all epochs.
    early_stop_patience: int = 5
    eval_every: int = 2


@dataclass
class TextCuesConfig:
    template_id: int = 1
    client: str = "mock"
    N_T: int = 4
    endpoint: str | None = None
    model_name: str | None = None
    timeout: float = 30.0
    max_in_flight: int = 4
    cache_path: str | None = None


@dataclass
class EvalConfig:
    beta_sq: float = 0.3
    conditions: list[str] = field(default_factory=lambda: ["mute", "wgn10", "wgn40"])
    mask_threshold: float = 0.5


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    sedam: SedamConfig = field(default_factory=SedamConfig)
    pmqs: PmqsConfig = field(default_factory=PmqsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    textcues: TextCuesConfig = field(default_factory=TextCuesConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def resolve_path(self, p: str | Path) -> Path:
        p = Path(p)
        if p.is_absolute():
            return p
        return artifact_root() / p

    def validate(self) -> None:
        d = self.data
        if not d.vocabulary:
            raise ConfigurationError("vocabulary must not be empty")
        if len(set(d.vocabulary)) != len(d.vocabulary):
            raise ConfigurationError("vocabulary entries must be unique")
        if not 0.0 <= d.fraction_silent <= 1.0:
            raise ConfigurationError(
                f"fraction_silent must be in [0, 1], got {d.fraction_silent}"
            )
        if not 0.0 <= d.fully_silent_rate <= 1.0:
            raise ConfigurationError("fully_silent_rate must be in [0, 1]")
        if d.image_size < 16:
            raise ConfigurationError("image_size must be >= 16")
        if d.min_objects < 0 or d.max_objects < d.min_objects:
            raise ConfigurationError("invalid object count range")
        for n in (d.train_samples, d.val_samples, d.test_samples):
            if n < 2:
                raise ConfigurationError("each split needs at least 2 samples")
        if self.sedam.N_L < 1 or self.sedam.N < 1:
            raise ConfigurationError("sedam N_L and N must be >= 1")
        if self.sedam.d_AL != self.encoders.d_T:
            raise ConfigurationError(
                "sedam.d_AL must equal encoders.d_T (the cue agreement score "
                "is a raw text-latent product)"
            )
        if self.model.N_C != len(d.vocabulary) + 1:
            raise ConfigurationError(
                f"model.N_C must equal len(vocabulary) + 1 = {len(d.vocabulary) + 1}, "
                f"got {self.model.N_C}"
            )
        if self.textcues.N_T < 1:
            raise ConfigurationError("textcues.N_T must be >= 1")
        if self.textcues.client not in ("mock", "http"):
            raise ConfigurationError(f"unknown client kind {self.textcues.client!r}")
        if self.eval.beta_sq <= 0:
            raise ConfigurationError("eval.beta_sq must be positive")
        for c in self.eval.conditions:
            if c not in ("mute", "wgn10", "wgn40"):
                raise ConfigurationError(f"unknown eval condition {c!r}")


def artifact_root() -> Path:
    return Path(os.environ.get(ROOT_ENV_VAR, "runs"))


def _from_dict(cls, values: dict[str, Any]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigurationError(
            f"unknown keys in {cls.__name__}: {sorted(unknown)}"
        )
    kwargs = {}
    for name in known:
        if name not in values:
            continue
        v = values[name]
        if name in _BLOCKS:
            kwargs[name] = _from_dict(_BLOCKS[name], v)
        else:
            kwargs[name] = v
    return cls(**kwargs)


_BLOCKS = {
    "data": DataConfig,
    "encoders": EncoderConfig,
    "sedam": SedamConfig,
    "pmqs": PmqsConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "textcues": TextCuesConfig,
    "eval": EvalConfig,
}


def config_from_dict(values: dict[str, Any]) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, values)
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a JSON config file, apply ``key.path=value`` overrides, validate."""
    try:
        values = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file is not valid JSON: {e}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key.path=value: {item!r}")
        key, raw = item.split("=", 1)
        node = values
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot override through scalar key {p!r}")
        try:
            node[parts[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[parts[-1]] = raw
    return config_from_dict(values)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
