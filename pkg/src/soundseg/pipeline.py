"""Dataset/cue plumbing shared by the CLI commands and the experiment
suites: generate-or-load datasets, read captions, run a cue source."""

from __future__ import annotations

from pathlib import Path

from .config import ExperimentConfig
from .errors import ConfigurationError
from .synthdata import SceneSample, generate_dataset, load_caption, load_split
from .textcues import (
    CueExtraction,
    HttpLLMClient,
    LLMClient,
    MockLLMClient,
    NounParser,
    extract_cues,
    load_template,
)

SPLITS = ("train", "val", "test")


def dataset_dir(cfg: ExperimentConfig) -> Path:
    return cfg.resolve_path(cfg.data.root)


def ensure_dataset(cfg: ExperimentConfig) -> dict[str, list[SceneSample]]:
    """Load the dataset, generating it first if any split is missing."""
    root = dataset_dir(cfg)
    if not all((root / s / "manifest.json").exists() for s in SPLITS):
        generate_dataset(cfg.data, cfg.seed, root)
    splits = {}
    for split in SPLITS:
        _, samples = load_split(root, split)
        splits[split] = samples
    return splits


def captions_for(
    cfg: ExperimentConfig, samples: list[SceneSample]
) -> dict[str, str]:
    root = dataset_dir(cfg)
    return {s.sample_id: load_caption(root, s.split, s.sample_id) for s in samples}


def build_client(cfg: ExperimentConfig, template) -> LLMClient:
    kind = cfg.textcues.client
    if kind == "mock":
        return MockLLMClient(template, cfg.data.vocabulary)
    if kind == "http":
        if not cfg.textcues.endpoint or not cfg.textcues.model_name:
            raise ConfigurationError("http client needs endpoint and model_name")
        return HttpLLMClient(
            cfg.textcues.endpoint, cfg.textcues.model_name, cfg.textcues.timeout
        )
    raise ConfigurationError(f"unknown client kind {kind!r}")


def cue_extractions(
    cfg: ExperimentConfig,
    captions: dict[str, str],
    template_id: int | None = None,
    source: str = "template",
) -> dict[str, CueExtraction]:
    """Run the configured cue source over captions.

    ``source`` is "template" (prompted reasoner) or "noun_parser".
    """
    if source == "noun_parser":
        parser = NounParser(cfg.data.vocabulary)
        return {sid: parser.parse_nouns(c) for sid, c in captions.items()}
    if source != "template":
        raise ConfigurationError(f"unknown cue source {source!r}")
    template = load_template(template_id or cfg.textcues.template_id)
    client = build_client(cfg, template)
    return extract_cues(
        captions, template, client, max_in_flight=cfg.textcues.max_in_flight
    )


def cue_lists(extractions: dict[str, CueExtraction]) -> dict[str, list[str]]:
    return {sid: list(e.cues) for sid, e in extractions.items()}


def cues_for_variant(
    cfg: ExperimentConfig,
    captions: dict[str, str],
    variant: str,
    template_id: int | None = None,
) -> dict[str, CueExtraction]:
    """Cue source for an ablation variant: the noun-parser baseline swaps the
    reasoner out, one_shot swaps in the single-demonstration template, and
    prompt-row runs pin an explicit template number."""
    if variant == "noun_parser":
        return cue_extractions(cfg, captions, source="noun_parser")
    if variant == "one_shot":
        return cue_extractions(cfg, captions, template_id=2)
    return cue_extractions(cfg, captions, template_id=template_id)
