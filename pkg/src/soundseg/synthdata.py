"""Procedural miniature audio-visual benchmark.

Scenes are flat 2D arrangements of colored shapes. Each category has a fixed
shape and color so a small frozen visual backbone can tell them apart. Some
categories can produce sound ("audible"); an audible object may or may not be
sounding in a given frame. Ground-truth masks cover *sounding* objects only,
which is what makes segmentation preference measurable: a model that merely
segments audible-looking objects cannot fit the labels.

Everything is a pure function of (config, seed); regenerating a dataset is
byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DataConfig
from .errors import ConfigurationError, GenerationError

SHAPES = ("circle", "rectangle", "triangle")

# Category styling: (shape, RGB color). Order-independent of the vocabulary;
# unknown categories fall back to a hashed palette entry.
CATEGORY_STYLE = {
    "guitar": ("triangle", (178, 102, 25)),
    "dog": ("circle", (220, 50, 40)),
    "car": ("rectangle", (50, 90, 220)),
    "piano": ("rectangle", (40, 40, 40)),
    "bird": ("circle", (230, 200, 40)),
    "phone": ("rectangle", (200, 60, 200)),
    "bench": ("rectangle", (110, 80, 50)),
    "plant": ("triangle", (60, 170, 70)),
}
_FALLBACK_PALETTE = [
    (240, 130, 30),
    (60, 200, 210),
    (130, 60, 190),
    (20, 130, 90),
]

BACKGROUND_RGB = (200, 200, 200)

# Categories capable of producing sound. "bench" and "plant" are visual-only.
AUDIBLE_CATEGORIES = frozenset(
    {"guitar", "dog", "car", "piano", "bird", "phone"}
)

# Verbs that mark a caption clause as describing active sound production.
# The mock reasoner and the caption phrase pools below share this lexicon.
SOUNDING_VERBS = frozenset(
    {
        "strums", "strumming", "plays", "playing", "played", "rings",
        "ringing", "barks", "barking", "howls", "howling", "revs",
        "revving", "honks", "honking", "rumbles", "rumbling", "roaring",
        "chirps", "chirping", "sings", "singing", "calls", "calling",
        "buzzes", "buzzing", "chimes", "chiming", "blares", "blaring",
        "hammers", "hammering", "whistles", "whistling", "hums", "humming",
    }
)

SOUNDING_PHRASES = {
    "guitar": (
        "someone is strumming the guitar with energy",
        "the guitar rings out a bright chord",
        "a street musician plays the guitar",
    ),
    "dog": (
        "a dog is barking at the window",
        "the dog barks loudly at a passerby",
        "a dog howls near the door",
    ),
    "car": (
        "a car revs its engine impatiently",
        "the car honks twice in the driveway",
        "a car rumbles past with a roaring motor",
    ),
    "piano": (
        "someone plays a rolling melody on the piano",
        "the piano rings with a loud arpeggio",
        "a pianist hammers the piano keys",
    ),
    "bird": (
        "a bird chirps from its perch",
        "the bird sings a long bright phrase",
        "a bird calls out from the cage",
    ),
    "phone": (
        "a phone rings insistently on the desk",
        "the phone buzzes and chimes with alerts",
        "a phone blares its ringtone",
    ),
}

# Phrases for objects that are present but not producing sound. At least half
# of each pool avoids words like "silent"/"quiet" so silence must be inferred
# from the absence of an interaction, not read off a keyword.
SILENT_PHRASES = {
    "guitar": (
        "a guitar leans against the wall, untouched",
        "a guitar rests on its stand in the corner",
        "a guitar lies flat on the table",
        "a guitar hangs silent on the wall",
    ),
    "dog": (
        "a dog sleeps curled up on the rug",
        "a dog rests its head on its paws",
        "a dog lies motionless in its bed",
        "a dog stays quiet beside the couch",
    ),
    "car": (
        "a car is parked by the curb",
        "a car sits in the driveway with the engine off",
        "a car waits under a cover of dust",
        "a car stands silent in the garage",
    ),
    "piano": (
        "a piano stands against the far wall",
        "a piano waits with its lid closed",
        "a piano gathers dust in the corner",
        "a piano sits silent under a cloth",
    ),
    "bird": (
        "a bird preens its feathers on the perch",
        "a bird hops along its perch",
        "a bird dozes in the cage",
        "a bird sits still on the swing",
    ),
    "phone": (
        "a phone lies face down on the table",
        "a phone charges on the nightstand",
        "a phone rests untouched on the shelf",
        "a phone sits dark on the desk",
    ),
    "bench": (
        "a bench stands along the wall",
        "a wooden bench faces the window",
        "a bench holds a folded blanket",
    ),
    "plant": (
        "a plant fills the corner with green",
        "a potted plant stands by the door",
        "a plant spreads its leaves near the shelf",
    ),
}

EMPTY_SCENE_CAPTION = "an empty room."

MANIFEST_VERSION = 1


@dataclass
class ObjectSpec:
    category: str
    shape: str
    position: tuple[int, int]  # (cx, cy) pixel center
    size: int
    is_audible: bool
    is_sounding: bool
    # Caption phrase reads as sounding although the object is silent; this is
    # the caption noise the attention-score mask has to filter downstream.
    caption_overeager: bool = False

    def __post_init__(self):
        if self.is_sounding and not self.is_audible:
            raise GenerationError(
                f"{self.category}: is_sounding requires is_audible"
            )
        if self.shape not in SHAPES:
            raise GenerationError(f"unknown shape {self.shape!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSpec":
        d = dict(d)
        d["position"] = tuple(d["position"])
        return cls(**d)


@dataclass
class AudioSignature:
    """Multiset of sounding categories plus a per-clip noise seed.

    ``kind`` distinguishes the evaluation substitutions: "normal" encodes the
    category mixture, "mute" maps to the reserved silence embedding exactly,
    "wgn" is silence plus white Gaussian feature noise at ``snr_db``.
    """

    counts: dict[str, int]
    seed: int
    kind: str = "normal"
    snr_db: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AudioSignature":
        return cls(**d)


@dataclass
class SceneSample:
    sample_id: str
    split: str
    frame_index: int
    objects: list[ObjectSpec]
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    gt_mask: np.ndarray  # uint8 [H, W], 0 = background, else category index + 1
    audio_signature: AudioSignature


@dataclass
class DatasetManifest:
    split: str
    samples: list[str]
    vocabulary: list[str]
    generation_seed: int
    records: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "split": self.split,
            "generation_seed": self.generation_seed,
            "vocabulary": self.vocabulary,
            "samples": self.samples,
            "records": self.records,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            split=d["split"],
            samples=list(d["samples"]),
            vocabulary=list(d["vocabulary"]),
            generation_seed=d["generation_seed"],
            records=list(d.get("records", [])),
        )


def category_style(category: str) -> tuple[str, tuple[int, int, int]]:
    if category in CATEGORY_STYLE:
        return CATEGORY_STYLE[category]
    h = _stable_hash(category)
    return SHAPES[h % 3], _FALLBACK_PALETTE[h % len(_FALLBACK_PALETTE)]


def _stable_hash(*parts) -> int:
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def object_footprint(obj: ObjectSpec, size: tuple[int, int]) -> np.ndarray:
    """Boolean [H, W] mask of the pixels the object occupies."""
    h, w = size
    cx, cy = obj.position
    half = obj.size // 2
    ys, xs = np.mgrid[0:h, 0:w]
    if obj.shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half**2
    if obj.shape == "rectangle":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    # upward isoceles triangle: width grows linearly from apex to base
    dy = ys - cy
    frac = np.clip((dy + half) / max(2 * half, 1), 0.0, 1.0)
    inside_rows = np.abs(dy) <= half
    return inside_rows & (np.abs(xs - cx) <= frac * half)


def _check_bounds(obj: ObjectSpec, size: tuple[int, int]) -> None:
    h, w = size
    cx, cy = obj.position
    half = obj.size // 2
    if cx - half < 0 or cx + half >= w or cy - half < 0 or cy + half >= h:
        raise GenerationError(
            f"object {obj.category} at {obj.position} size {obj.size} "
            f"exceeds image bounds {size}"
        )


def render_scene(objects: list[ObjectSpec], size: tuple[int, int]) -> np.ndarray:
    """Rasterize objects (painter's order) onto a uniform background."""
    h, w = size
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = np.asarray(BACKGROUND_RGB, dtype=np.float32) / 255.0
    for obj in objects:
        _check_bounds(obj, size)
        _, color = category_style(obj.category)
        fp = object_footprint(obj, size)
        img[fp] = np.asarray(color, dtype=np.float32) / 255.0
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def ground_truth_mask(
    objects: list[ObjectSpec], size: tuple[int, int], vocabulary: list[str]
) -> np.ndarray:
    """Index mask of sounding objects only; 0 is background.

    The nonzero set is the union of sounding footprints (occlusion by a
    silent object does not erase label pixels); where two sounding objects
    overlap, the later one wins, matching painter's order.
    """
    mask = np.zeros(size, dtype=np.uint8)
    index = {c: i + 1 for i, c in enumerate(vocabulary)}
    for obj in objects:
        if not obj.is_sounding:
            continue
        if obj.category not in index:
            raise GenerationError(f"category {obj.category!r} not in vocabulary")
        mask[object_footprint(obj, size)] = index[obj.category]
    return mask


def _phrase_for(obj: ObjectSpec, sample_id: str, position: int) -> str:
    describe_sounding = obj.is_sounding or obj.caption_overeager
    pool = SOUNDING_PHRASES[obj.category] if describe_sounding else SILENT_PHRASES[obj.category]
    idx = _stable_hash(sample_id, position, obj.category, describe_sounding) % len(pool)
    return pool[idx]


def scene_description(sample: SceneSample) -> str:
    """Deterministic dense caption naming every object with an interaction
    phrase that reflects whether it is currently producing sound."""
    if not sample.objects:
        return EMPTY_SCENE_CAPTION
    phrases = [
        _phrase_for(obj, sample.sample_id, i) for i, obj in enumerate(sample.objects)
    ]
    sentences = [p[0].upper() + p[1:] + "." for p in phrases]
    return " ".join(sentences)


def _validate_data_config(cfg: DataConfig) -> None:
    if not cfg.vocabulary:
        raise ConfigurationError("vocabulary must not be empty")
    if not 0.0 <= cfg.fraction_silent <= 1.0:
        raise ConfigurationError("fraction_silent must lie in [0, 1]")
    if not 0.0 <= cfg.fully_silent_rate <= 1.0:
        raise ConfigurationError("fully_silent_rate must lie in [0, 1]")
    if not 0.0 <= cfg.overeager_caption_rate <= 1.0:
        raise ConfigurationError("overeager_caption_rate must lie in [0, 1]")
    for cat in cfg.vocabulary:
        if cat in AUDIBLE_CATEGORIES and cat not in SOUNDING_PHRASES:
            raise ConfigurationError(f"no sounding phrases for category {cat!r}")
        if cat not in SILENT_PHRASES:
            raise ConfigurationError(f"no silent phrases for category {cat!r}")


def _sample_objects(
    rng: np.random.Generator, cfg: DataConfig, fully_silent: bool
) -> list[ObjectSpec]:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cats = list(rng.choice(cfg.vocabulary, size=min(n, len(cfg.vocabulary)), replace=False))
    audible_vocab = sorted(AUDIBLE_CATEGORIES & set(cfg.vocabulary))
    # blank-label scenes are controlled by fully_silent_rate alone: a scene
    # that is not forced silent keeps at least one audible, sounding object
    if not fully_silent and audible_vocab and not any(
        c in AUDIBLE_CATEGORIES for c in cats
    ):
        cats[int(rng.integers(len(cats)))] = audible_vocab[
            int(rng.integers(len(audible_vocab)))
        ]
        cats = list(dict.fromkeys(cats))
    h = w = cfg.image_size
    objects: list[ObjectSpec] = []
    occupied = np.zeros((h, w), dtype=bool)
    for cat in cats:
        shape, _ = category_style(cat)
        size = int(rng.integers(12, 23))
        half = size // 2
        # a few placement attempts to keep scenes mostly non-overlapping;
        # overlap stays legal, later objects simply draw on top
        best = None
        for _ in range(8):
            cx = int(rng.integers(half, w - half))
            cy = int(rng.integers(half, h - half))
            probe = ObjectSpec(cat, shape, (cx, cy), size, True, False)
            fp = object_footprint(probe, (h, w))
            overlap = (fp & occupied).sum() / max(fp.sum(), 1)
            if best is None or overlap < best[0]:
                best = (overlap, (cx, cy), fp)
            if overlap == 0.0:
                break
        _, pos, fp = best
        occupied |= fp
        audible = cat in AUDIBLE_CATEGORIES
        sounding = (
            audible and not fully_silent and rng.random() >= cfg.fraction_silent
        )
        overeager = (
            audible
            and not sounding
            and rng.random() < cfg.overeager_caption_rate
        )
        objects.append(
            ObjectSpec(
                category=cat,
                shape=shape,
                position=pos,
                size=size,
                is_audible=audible,
                is_sounding=sounding,
                caption_overeager=overeager,
            )
        )
    if not fully_silent and not any(o.is_sounding for o in objects):
        audible_objs = [o for o in objects if o.is_audible]
        if audible_objs:
            pick = audible_objs[int(rng.integers(len(audible_objs)))]
            pick.is_sounding = True
            pick.caption_overeager = False
    return objects


def _apply_split_guarantees(
    samples: list[SceneSample], cfg: DataConfig, split: str, seed: int
) -> None:
    """Force sample 0 fully silent and sample 1 to hold an audible-but-silent
    object, so every split exercises both regimes regardless of the rates."""
    vocab = cfg.vocabulary
    size = (cfg.image_size, cfg.image_size)

    s0 = samples[0]
    for obj in s0.objects:
        obj.is_sounding = False
    s0.gt_mask = ground_truth_mask(s0.objects, size, vocab)
    s0.audio_signature = _signature_for(s0.objects, seed, split, 0)

    s1 = samples[1]
    audible = [o for o in s1.objects if o.is_audible]
    if not audible:
        target = s1.objects[0]
        cat = sorted(AUDIBLE_CATEGORIES & set(vocab))[0]
        target.category = cat
        target.shape = category_style(cat)[0]
        target.is_audible = True
        target.is_sounding = False
        s1.image = render_scene(s1.objects, size)
        audible = [target]
    if all(o.is_sounding for o in audible):
        audible[0].is_sounding = False
    s1.gt_mask = ground_truth_mask(s1.objects, size, vocab)
    s1.audio_signature = _signature_for(s1.objects, seed, split, 1)


def _signature_for(
    objects: list[ObjectSpec], seed: int, split: str, idx: int
) -> AudioSignature:
    counts: dict[str, int] = {}
    for obj in objects:
        if obj.is_sounding:
            counts[obj.category] = counts.get(obj.category, 0) + 1
    clip_seed = _stable_hash(seed, split, idx, "audio") % (2**31)
    return AudioSignature(counts=dict(sorted(counts.items())), seed=clip_seed)


def generate_split(
    cfg: DataConfig, seed: int, split: str, count: int
) -> tuple[DatasetManifest, list[SceneSample]]:
    _validate_data_config(cfg)
    if count < 2:
        raise ConfigurationError("split needs at least 2 samples")
    size = (cfg.image_size, cfg.image_size)
    samples = []
    for idx in range(count):
        rng = np.random.default_rng(_stable_hash(seed, split, idx) % (2**63))
        fully_silent = bool(rng.random() < cfg.fully_silent_rate)
        objects = _sample_objects(rng, cfg, fully_silent)
        sample = SceneSample(
            sample_id=f"{split}-{idx:04d}",
            split=split,
            frame_index=idx,
            objects=objects,
            image=render_scene(objects, size),
            gt_mask=ground_truth_mask(objects, size, cfg.vocabulary),
            audio_signature=_signature_for(objects, seed, split, idx),
        )
        samples.append(sample)
    _apply_split_guarantees(samples, cfg, split, seed)
    manifest = DatasetManifest(
        split=split,
        samples=[s.sample_id for s in samples],
        vocabulary=list(cfg.vocabulary),
        generation_seed=seed,
        records=[
            {
                "sample_id": s.sample_id,
                "frame_index": s.frame_index,
                "objects": [o.to_dict() for o in s.objects],
                "audio": s.audio_signature.to_dict(),
            }
            for s in samples
        ],
    )
    return manifest, samples


def write_split(
    out_dir: Path, manifest: DatasetManifest, samples: list[SceneSample]
) -> None:
    split_dir = out_dir / manifest.split
    for sub in ("images", "masks", "audio", "captions"):
        (split_dir / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        img8 = (s.image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(split_dir / "images" / f"{s.sample_id}.png")
        Image.fromarray(s.gt_mask, mode="L").save(split_dir / "masks" / f"{s.sample_id}.png")
        (split_dir / "audio" / f"{s.sample_id}.json").write_text(
            json.dumps(s.audio_signature.to_dict(), sort_keys=True) + "\n"
        )
        (split_dir / "captions" / f"{s.sample_id}.txt").write_text(
            scene_description(s) + "\n"
        )
    (split_dir / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    )


def generate_dataset(
    cfg: DataConfig, seed: int, out_dir: str | Path | None = None
) -> dict[str, DatasetManifest]:
    """Generate train/val/test splits; optionally write them to disk.

    Same (cfg, seed) always produces byte-identical artifacts.
    """
    _validate_data_config(cfg)
    counts = {
        "train": cfg.train_samples,
        "val": cfg.val_samples,
        "test": cfg.test_samples,
    }
    manifests = {}
    for split, count in counts.items():
        manifest, samples = generate_split(cfg, seed, split, count)
        manifests[split] = manifest
        if out_dir is not None:
            write_split(Path(out_dir), manifest, samples)
    return manifests


def load_split(root: str | Path, split: str) -> tuple[DatasetManifest, list[SceneSample]]:
    split_dir = Path(root) / split
    manifest_path = split_dir / "manifest.json"
    if not manifest_path.exists():
        raise GenerationError(f"no manifest at {manifest_path}")
    manifest = DatasetManifest.from_dict(json.loads(manifest_path.read_text()))
    samples = []
    for rec in manifest.records:
        sid = rec["sample_id"]
        img = np.asarray(
            Image.open(split_dir / "images" / f"{sid}.png"), dtype=np.float32
        )
        mask = np.asarray(Image.open(split_dir / "masks" / f"{sid}.png"), dtype=np.uint8)
        samples.append(
            SceneSample(
                sample_id=sid,
                split=split,
                frame_index=rec["frame_index"],
                objects=[ObjectSpec.from_dict(o) for o in rec["objects"]],
                image=np.ascontiguousarray(img.transpose(2, 0, 1)) / 255.0,
                gt_mask=mask,
                audio_signature=AudioSignature.from_dict(rec["audio"]),
            )
        )
    return manifest, samples


def load_caption(root: str | Path, split: str, sample_id: str) -> str:
    path = Path(root) / split / "captions" / f"{sample_id}.txt"
    return path.read_text().rstrip("\n")
