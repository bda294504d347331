"""Command-line entry point.

Subcommands: gen-data, extract-cues, train, eval, audio-control, ablate.
Every command takes one JSON config file; ``--set key.path=value`` overrides
individual keys. Exit codes: 0 success, 2 configuration error, 3 data
generation error, 4 numeric failure, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .config import ExperimentConfig, load_config, save_config
from .errors import ConfigurationError, GenerationError, NumericError
from .evaluation import (
    emit_mask_grid,
    emit_sensitivity_bars,
    evaluate_model,
    sensitivity_sweep,
)
from .pipeline import (
    captions_for,
    cue_extractions,
    cue_lists,
    cues_for_variant,
    dataset_dir,
    ensure_dataset,
)
from .synthdata import generate_dataset
from .textcues import save_cue_cache
from .training import load_checkpoint, train

ABLATION_VARIANTS = (
    "no_text",
    "no_audio",
    "no_text_audio",
    "no_infonce",
    "no_dynamic_mask",
    "no_pmqs",
    "no_sedam",
    "noun_parser",
    "one_shot",
    "prompt_rows_1_to_10",
)


class _Logger:
    """Structured JSONL log to a file plus a short human line on stdout."""

    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = path.open("a")
        else:
            self._fh = None

    def __call__(self, event: str, **fields):
        record = {"ts": round(time.time(), 3), "event": event, **fields}
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()
        pretty = " ".join(f"{k}={v}" for k, v in fields.items())
        print(f"[{event}] {pretty}")

    def close(self):
        if self._fh:
            self._fh.close()


def _out_dir(cfg: ExperimentConfig, name: str) -> Path:
    out = cfg.resolve_path(name)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(cfg: ExperimentConfig, log) -> int:
    root = dataset_dir(cfg)
    manifests = generate_dataset(cfg.data, cfg.seed, root)
    for split, m in manifests.items():
        log("generated", split=split, samples=len(m.samples), root=str(root))
    return 0


def cmd_extract_cues(cfg: ExperimentConfig, log) -> int:
    splits = ensure_dataset(cfg)
    all_samples = [s for split in splits.values() for s in split]
    captions = captions_for(cfg, all_samples)
    extractions = cue_extractions(cfg, captions)
    cache = cfg.textcues.cache_path or str(
        dataset_dir(cfg) / f"cues_template{cfg.textcues.template_id:02d}.json"
    )
    cache_path = cfg.resolve_path(cache)
    save_cue_cache(cache_path, extractions)
    warned = sum(1 for e in extractions.values() if e.warning)
    log("cues", count=len(extractions), warnings=warned, cache=str(cache_path))
    return 0


def _train_one(cfg, splits, variant, out_dir, log, template_id=None):
    all_samples = [s for split in splits.values() for s in split]
    captions = captions_for(cfg, all_samples)
    extractions = cues_for_variant(cfg, captions, variant, template_id)
    cues = cue_lists(extractions)
    result = train(cfg, splits, cues, out_dir, variant=variant, log_fn=log)
    return result, cues


def cmd_train(cfg: ExperimentConfig, log, variant: str = "full", run_name: str | None = None) -> int:
    splits = ensure_dataset(cfg)
    out = _out_dir(cfg, run_name or f"train_{variant}")
    save_config(cfg, out / "config.json")
    result, _ = _train_one(cfg, splits, variant, out, log)
    log(
        "trained",
        variant=variant,
        steps=result.steps,
        final_loss=round(result.final_loss, 4),
        best_val_miou=round(result.best_val_miou, 4),
        checkpoint=str(result.checkpoint_path),
    )
    return 0


def cmd_eval(cfg: ExperimentConfig, log, checkpoint: str, split: str = "test") -> int:
    model, encoders, ckpt_cfg, meta = load_checkpoint(checkpoint)
    splits = ensure_dataset(ckpt_cfg)
    samples = splits[split]
    captions = captions_for(ckpt_cfg, samples)
    extractions = cues_for_variant(ckpt_cfg, captions, meta["variant"])
    report = evaluate_model(
        model, encoders, samples, cue_lists(extractions), ckpt_cfg
    )
    out = _out_dir(cfg, "reports")
    payload = {
        "split": split,
        "condition": report.condition,
        "miou": report.miou,
        "fscore": report.fscore,
        "per_sample": [
            {"id": sid, "iou": i, "f": f} for sid, i, f in report.per_sample
        ],
    }
    path = out / f"eval_{split}.json"
    path.write_text(json.dumps(payload, indent=2) + "\n")
    log("eval", split=split, miou=round(report.miou, 4), fscore=round(report.fscore, 4), report=str(path))
    return 0


def cmd_audio_control(cfg: ExperimentConfig, log, checkpoint: str, split: str = "test") -> int:
    model, encoders, ckpt_cfg, meta = load_checkpoint(checkpoint)
    splits = ensure_dataset(ckpt_cfg)
    samples = splits[split]
    captions = captions_for(ckpt_cfg, samples)
    extractions = cues_for_variant(ckpt_cfg, captions, meta["variant"])
    report = sensitivity_sweep(
        model, encoders, samples, cue_lists(extractions), ckpt_cfg
    )
    out = _out_dir(cfg, "reports")
    (out / "audio_control.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n"
    )
    emit_sensitivity_bars(report, out / "audio_control_bars.png")
    predictions = {"normal": report.baseline.extra["predictions"]}
    for cond, rep in report.condition_reports.items():
        predictions[cond] = rep.extra["predictions"]
    emit_mask_grid(samples, predictions, out / "audio_control_masks.png")
    for cond, (dm, df) in report.deltas.items():
        log("audio_control", condition=cond, dm=round(dm, 1), df=round(df, 1))
    log("audio_control_report", path=str(out / "audio_control.json"))
    return 0


def _format_table(rows: list[dict]) -> str:
    cols = ["variant", "val_miou", "val_fscore", "test_miou", "test_fscore"]
    widths = {c: max(len(c), max(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return "\n".join(lines)


def cmd_ablate(
    cfg: ExperimentConfig, log, variant: str, baseline_checkpoint: str | None = None
) -> int:
    if variant not in ABLATION_VARIANTS:
        raise ConfigurationError(
            f"unknown variant {variant!r}; choose from {ABLATION_VARIANTS}"
        )
    splits = ensure_dataset(cfg)
    runs: list[tuple[str, int | None]] = []
    if variant == "prompt_rows_1_to_10":
        runs = [(f"prompt_row_{n:02d}", n) for n in range(1, 11)]
    else:
        runs = [(variant, None)]

    rows = []

    def eval_run(name, model, encoders, run_cfg, cues):
        row = {"variant": name}
        for split_name in ("val", "test"):
            rep = evaluate_model(model, encoders, splits[split_name], cues, run_cfg)
            row[f"{split_name}_miou"] = round(rep.miou, 4)
            row[f"{split_name}_fscore"] = round(rep.fscore, 4)
        rows.append(row)

    # reference row: the unablated model
    all_samples = [s for split in splits.values() for s in split]
    captions = captions_for(cfg, all_samples)
    if baseline_checkpoint:
        model, encoders, ckpt_cfg, _ = load_checkpoint(baseline_checkpoint)
        cues = cue_lists(cues_for_variant(ckpt_cfg, captions, "full"))
        eval_run("full", model, encoders, ckpt_cfg, cues)
    else:
        out = _out_dir(cfg, "ablate_full")
        result, cues = _train_one(cfg, splits, "full", out, log)
        model, encoders, ckpt_cfg, _ = load_checkpoint(result.checkpoint_path)
        eval_run("full", model, encoders, ckpt_cfg, cues)

    for name, template_id in runs:
        run_variant = "full" if template_id is not None else variant
        out = _out_dir(cfg, f"ablate_{name}")
        result, cues = _train_one(
            cfg, splits, run_variant, out, log, template_id=template_id
        )
        model, encoders, run_cfg, _ = load_checkpoint(result.checkpoint_path)
        eval_run(name, model, encoders, run_cfg, cues)
        log("ablation_run", variant=name, val_miou=rows[-1]["val_miou"])

    out = _out_dir(cfg, "reports")
    (out / f"ablate_{variant}.json").write_text(json.dumps(rows, indent=2) + "\n")
    table = _format_table(rows)
    (out / f"ablate_{variant}.txt").write_text(table + "\n")
    print(table)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="soundseg",
        description="Text-guided sounding-object segmentation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key, e.g. --set optimizer.epochs=10",
        )

    add_common(sub.add_parser("gen-data", help="generate the synthetic benchmark"))
    add_common(sub.add_parser("extract-cues", help="run the cue source and cache results"))

    p_train = sub.add_parser("train", help="train a model")
    add_common(p_train)
    p_train.add_argument("--variant", default="full")
    p_train.add_argument("--run-name", default=None)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])

    p_ac = sub.add_parser("audio-control", help="mute/noise sensitivity sweep")
    add_common(p_ac)
    p_ac.add_argument("--checkpoint", required=True)
    p_ac.add_argument("--split", default="test", choices=["train", "val", "test"])

    p_ab = sub.add_parser("ablate", help="train and score an ablation variant")
    add_common(p_ab)
    p_ab.add_argument("--variant", required=True, choices=ABLATION_VARIANTS)
    p_ab.add_argument("--baseline", default=None, help="reuse this checkpoint as the full-model row")

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        log = _Logger(cfg.resolve_path("logs") / f"{args.command}.jsonl")
        log("config", command=args.command, path=str(args.config))
        try:
            if args.command == "gen-data":
                return cmd_gen_data(cfg, log)
            if args.command == "extract-cues":
                return cmd_extract_cues(cfg, log)
            if args.command == "train":
                return cmd_train(cfg, log, args.variant, args.run_name)
            if args.command == "eval":
                return cmd_eval(cfg, log, args.checkpoint, args.split)
            if args.command == "audio-control":
                return cmd_audio_control(cfg, log, args.checkpoint, args.split)
            if args.command == "ablate":
                return cmd_ablate(cfg, log, args.variant, args.baseline)
            raise RuntimeError("unreachable")
        finally:
            log.close()
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except GenerationError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
