"""Two-stage text-cue generation.

Stage one turns a dense scene caption into candidate sounding-object names
through a text-completion client behind a small interface; CI uses a
deterministic mock whose rulebook reads the interaction verbs in the caption.
Stage two (downstream) filters the candidates with the attention-score mask.
A noun-parser baseline captures every known noun regardless of interaction.

Prompt templates live as JSON files shipped with the package, one per
template number; they differ in shots, chain-of-thought usage, and in what
the final question asks for.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

from .errors import ConfigurationError, RetriableClientError
from .synthdata import SOUNDING_VERBS, _stable_hash

TEMPLATE_CATEGORIES = ("instructive", "misleading", "irrelevant")
ANSWER_MODES = (
    "sounding_group",
    "most_possible",
    "all_objects",
    "background_objects",
    "random_object",
)

# Deliberately out-of-vocabulary answers for the "random object" template.
OOV_OBJECTS = ("rainbow", "ladder", "spoon", "kettle", "bucket")

# Non-category nouns the rulebook may be asked to recognize in hand-written
# captions ("a man strums a guitar ...").
HUMAN_NOUNS = ("man", "woman", "person", "boy", "girl")


@dataclass
class PromptTemplate:
    number: int
    category: str
    shots: int
    uses_cot: bool
    system_text: str
    demonstrations: list[tuple[str, str, list[str]]] = field(default_factory=list)
    answer_mode: str = "sounding_group"

    def __post_init__(self):
        if self.category not in TEMPLATE_CATEGORIES:
            raise ConfigurationError(f"unknown template category {self.category!r}")
        if self.answer_mode not in ANSWER_MODES:
            raise ConfigurationError(f"unknown answer mode {self.answer_mode!r}")
        if self.shots != len(self.demonstrations):
            raise ConfigurationError("shots must equal the demonstration count")
        if self.uses_cot and any(not d[1].strip() for d in self.demonstrations):
            raise ConfigurationError("chain-of-thought demos need reasoning text")


@dataclass
class CueExtraction:
    cues: list[str]
    raw_response: str
    stage: str = "collected"  # or "filtered"
    warning: bool = False


def format_answer(cues: list[str]) -> str:
    return "[" + ", ".join(cues) + "]"


def build_prompt(template: PromptTemplate, caption: str) -> str:
    parts = [template.system_text]
    for demo_caption, reasoning, answer in template.demonstrations:
        block = [f"Caption: {demo_caption}"]
        if template.uses_cot:
            block.append(f"Reasoning: {reasoning}")
        block.append(f"Answer: {format_answer(answer)}")
        parts.append("\n".join(block))
    parts.append(f"Caption: {caption}\nAnswer:")
    return "\n\n".join(parts)


class LLMClient(Protocol):
    def complete(self, prompt: str) -> str: ...


_BRACKET_RE = re.compile(r"\[([^\[\]]*)\]")


def reason_cues(client: LLMClient, prompt: str) -> CueExtraction:
    """Run the client and parse the last bracketed list in its response.

    A response without any bracketed list yields an empty extraction with
    the warning flag set instead of raising.
    """
    response = client.complete(prompt)
    matches = _BRACKET_RE.findall(response)
    if not matches:
        return CueExtraction(cues=[], raw_response=response, warning=True)
    items = [s.strip() for s in matches[-1].split(",")]
    cues = []
    for item in items:
        if item and item not in cues:
            cues.append(item)
    return CueExtraction(cues=cues, raw_response=response)


def _clauses(caption: str) -> list[str]:
    parts = re.split(r"(?<=[.!?])\s+", caption.lower())
    out = []
    for p in parts:
        out.extend(re.split(r"\s+while\s+", p))
    return [p for p in out if p.strip()]


def caption_groups(caption: str, lexicon: list[str]) -> tuple[list[str], list[str]]:
    """(all nouns, sounding-group nouns), both in first-occurrence order.

    A clause containing an active-sound verb marks every known noun in that
    clause as part of the sounding group.
    """
    lex = set(lexicon)
    nouns: list[str] = []
    sounding: list[str] = []
    for clause in _clauses(caption):
        tokens = re.findall(r"[a-z]+", clause)
        clause_nouns = [t for t in tokens if t in lex]
        is_sounding = any(t in SOUNDING_VERBS for t in tokens)
        for n in clause_nouns:
            if n not in nouns:
                nouns.append(n)
            if is_sounding and n not in sounding:
                sounding.append(n)
    return nouns, sounding


def mock_reasoner(
    caption: str, template: PromptTemplate, lexicon: list[str]
) -> str:
    """Deterministic stand-in response for a frozen text reasoner.

    The instructive rulebook returns the interacting (sounding) group; the
    misleading modes deliberately degrade the answer; the irrelevant mode
    names an object that is not in the scene at all.
    """
    nouns, sounding = caption_groups(caption, lexicon)
    mode = template.answer_mode
    if mode == "sounding_group":
        cues = sounding
        why = "Objects described with an active sound interaction are sounding."
    elif mode == "most_possible":
        pick = sounding[:1] or nouns[:1]
        cues = pick
        why = "Choosing the single most likely sounding object."
    elif mode == "all_objects":
        cues = nouns
        why = "Listing every object mentioned."
    elif mode == "background_objects":
        cues = [n for n in nouns if n not in sounding]
        why = "Listing objects that are not interacting."
    elif mode == "random_object":
        cues = [OOV_OBJECTS[_stable_hash(caption) % len(OOV_OBJECTS)]]
        why = "Naming an arbitrary object."
    else:  # pragma: no cover - guarded by PromptTemplate validation
        raise ConfigurationError(f"unknown answer mode {mode!r}")
    if template.uses_cot:
        return f"Reasoning: {why}\nAnswer: {format_answer(cues)}"
    return f"Answer: {format_answer(cues)}"


class MockLLMClient:
    """Pure-function client: parses the query caption back out of the prompt
    and answers from the rulebook. Safe to call concurrently."""

    def __init__(self, template: PromptTemplate, lexicon: list[str]):
        self.template = template
        self.lexicon = list(lexicon)

    def complete(self, prompt: str) -> str:
        tail = prompt.rsplit("Caption:", 1)[-1]
        caption = tail.split("\nAnswer", 1)[0].strip()
        return mock_reasoner(caption, self.template, self.lexicon)


class HttpLLMClient:
    """Minimal JSON-over-HTTP client: POST {"model", "prompt"}, expect
    {"text": ...}. Transport problems surface as RetriableClientError."""

    def __init__(self, endpoint: str, model_name: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.model_name = model_name
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        import requests

        try:
            resp = requests.post(
                self.endpoint,
                json={"model": self.model_name, "prompt": prompt},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return resp.json()["text"]
        except (requests.RequestException, KeyError, ValueError) as e:
            raise RetriableClientError(f"completion request failed: {e}") from e


class NounParser:
    """Baseline cue source: every known noun in the caption, interactions
    ignored."""

    def __init__(self, vocabulary: list[str]):
        self.vocabulary = list(vocabulary)

    def parse_nouns(self, caption: str) -> CueExtraction:
        nouns, _ = caption_groups(caption, self.vocabulary)
        return CueExtraction(cues=nouns, raw_response=caption)


def score_recognition(
    extractions: list[CueExtraction], gt: list[set[str]]
) -> float:
    """Micro-averaged average precision of ranked cues.

    Predictions pool across samples ordered by cue rank (ties broken by
    sample order); precision is accumulated at each correct prediction and
    normalized by the total number of ground-truth entries.
    """
    if len(extractions) != len(gt):
        raise ValueError("extractions and ground truth differ in length")
    total_relevant = sum(len(s) for s in gt)
    pooled = []
    for i, ext in enumerate(extractions):
        for rank, cue in enumerate(ext.cues):
            pooled.append((rank, i, cue))
    if total_relevant == 0:
        return 1.0 if not pooled else 0.0
    pooled.sort(key=lambda t: (t[0], t[1]))
    credited: list[set[str]] = [set() for _ in gt]
    tp = 0
    ap_sum = 0.0
    for k, (_, i, cue) in enumerate(pooled, start=1):
        if cue in gt[i] and cue not in credited[i]:
            credited[i].add(cue)
            tp += 1
            ap_sum += tp / k
    return ap_sum / total_relevant


def filter_extraction(ext: CueExtraction, keep: list[bool]) -> CueExtraction:
    """Stage-two result: the cues surviving the attention-score mask."""
    if len(keep) < len(ext.cues):
        raise ValueError("keep flags shorter than cue list")
    survivors = [c for c, k in zip(ext.cues, keep) if k]
    return CueExtraction(
        cues=survivors, raw_response=ext.raw_response, stage="filtered",
        warning=ext.warning,
    )


def load_template(number: int, directory: str | Path | None = None) -> PromptTemplate:
    """Load template file ``row{number:02d}.json`` from a directory or from
    the packaged defaults."""
    name = f"row{number:02d}.json"
    if directory is not None:
        text = (Path(directory) / name).read_text()
    else:
        ref = resources.files("soundseg").joinpath("templates").joinpath(name)
        try:
            text = ref.read_text()
        except FileNotFoundError:
            raise ConfigurationError(f"no packaged template number {number}")
    d = json.loads(text)
    return PromptTemplate(
        number=d["number"],
        category=d["category"],
        shots=d["shots"],
        uses_cot=d["uses_cot"],
        system_text=d["system_text"],
        demonstrations=[
            (demo["caption"], demo.get("reasoning", ""), list(demo["answer"]))
            for demo in d.get("demonstrations", [])
        ],
        answer_mode=d["answer_mode"],
    )


def extract_cues(
    captions: dict[str, str],
    template: PromptTemplate,
    client: LLMClient,
    max_in_flight: int = 1,
) -> dict[str, CueExtraction]:
    ids = sorted(captions)

    def one(sample_id: str) -> tuple[str, CueExtraction]:
        prompt = build_prompt(template, captions[sample_id])
        return sample_id, reason_cues(client, prompt)

    if max_in_flight <= 1:
        return dict(one(i) for i in ids)
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return dict(pool.map(one, ids))


def save_cue_cache(path: str | Path, cues: dict[str, CueExtraction]) -> None:
    payload = {
        sid: {
            "cues": e.cues,
            "raw_response": e.raw_response,
            "stage": e.stage,
            "warning": e.warning,
        }
        for sid, e in cues.items()
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_cue_cache(path: str | Path) -> dict[str, CueExtraction]:
    payload = json.loads(Path(path).read_text())
    return {
        sid: CueExtraction(
            cues=list(d["cues"]),
            raw_response=d["raw_response"],
            stage=d.get("stage", "collected"),
            warning=d.get("warning", False),
        )
        for sid, d in payload.items()
    }
