"""Training loop: two-group AdamW, frozen encoders excluded, deterministic
under a fixed seed, atomic checkpointing, line-delimited history log."""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_from_dict
from .encoders import EncoderBundle
from .errors import NumericError
from .evaluation import evaluate_model
from .model import SoundSegModel, build_model, collate, prepare_sample
from .segmodel import total_loss
from .synthdata import SceneSample


@dataclass
class TrainResult:
    checkpoint_path: Path
    steps: int
    final_loss: float
    best_val_miou: float
    history_path: Path


def save_checkpoint(
    path: str | Path,
    model: SoundSegModel,
    cfg: ExperimentConfig,
    variant: str,
    step: int,
    best_val_miou: float,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(
        {
            "config": cfg.to_dict(),
            "variant": variant,
            "model_state": model.state_dict(),
            "step": step,
            "best_val_miou": best_val_miou,
        },
        tmp,
    )
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[SoundSegModel, EncoderBundle, ExperimentConfig, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = config_from_dict(payload["config"])
    model, encoders = build_model(cfg)
    model.load_state_dict(payload["model_state"])
    model.set_variant(payload.get("variant", "full"))
    meta = {k: payload[k] for k in ("variant", "step", "best_val_miou")}
    return model, encoders, cfg, meta


def train(
    cfg: ExperimentConfig,
    splits: dict[str, list[SceneSample]],
    cues: dict[str, list[str]],
    out_dir: str | Path,
    variant: str = "full",
    log_fn=None,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model, encoders = build_model(cfg)
    model.set_variant(variant)

    weights = copy.deepcopy(cfg.loss)
    if variant == "no_infonce":
        weights.lambda_infonce = 0.0

    opt_cfg = cfg.optimizer
    optimizer = torch.optim.AdamW(
        model.parameter_groups(), weight_decay=opt_cfg.weight_decay
    )

    train_samples = splits["train"]
    val_samples = splits.get("val", [])
    packs = [
        prepare_sample(s, cues.get(s.sample_id, []), encoders, cfg.textcues.N_T)
        for s in train_samples
    ]

    history_path = out_dir / "history.jsonl"
    checkpoint_path = out_dir / "checkpoint.pt"
    rng = np.random.default_rng(cfg.seed + 17)
    step = 0
    final_loss = float("nan")
    best_val = -1.0
    best_state = None
    evals_since_best = 0
    start = time.time()
    stop = False

    with history_path.open("w") as history:
        for epoch in range(opt_cfg.epochs):
            model.train()
            order = rng.permutation(len(packs))
            for lo in range(0, len(order), opt_cfg.batch_size):
                idx = order[lo : lo + opt_cfg.batch_size]
                batch = collate([packs[i] for i in idx])
                out, _, bank = model(batch)
                losses = total_loss(
                    out, batch["targets"], bank, weights, nce_eps=cfg.sedam.epsilon
                )
                loss = losses["total"]
                if not torch.isfinite(loss):
                    snapshot = out_dir / "nan_diagnostic.json"
                    snapshot.write_text(
                        json.dumps(
                            {
                                "step": step,
                                "epoch": epoch,
                                "components": {
                                    k: float(v) for k, v in losses.items()
                                },
                                "sample_ids": batch["sample_id"],
                            },
                            indent=2,
                        )
                    )
                    raise NumericError(f"non-finite loss at step {step}; see {snapshot}")
                optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(
                    [p for g in optimizer.param_groups for p in g["params"]], 5.0
                )
                optimizer.step()
                final_loss = float(loss.detach())
                step += 1
                record = {
                    "step": step,
                    "epoch": epoch,
                    **{k: round(float(v.detach()), 6) for k, v in losses.items()},
                }
                history.write(json.dumps(record) + "\n")
            if val_samples and (epoch + 1) % opt_cfg.eval_every == 0:
                rep = evaluate_model(model, encoders, val_samples, cues, cfg)
                record = {
                    "step": step,
                    "epoch": epoch,
                    "val_miou": round(rep.miou, 4),
                    "val_fscore": round(rep.fscore, 4),
                }
                history.write(json.dumps(record) + "\n")
                if log_fn:
                    log_fn("val", **record)
                if rep.miou > best_val:
                    best_val = rep.miou
                    best_state = copy.deepcopy(model.state_dict())
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                    if 0 < opt_cfg.early_stop_patience <= evals_since_best:
                        stop = True
            if log_fn and (epoch % 5 == 0 or stop):
                log_fn(
                    "epoch",
                    epoch=epoch,
                    loss=round(final_loss, 4),
                    elapsed=round(time.time() - start, 1),
                )
            if stop:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    save_checkpoint(checkpoint_path, model, cfg, variant, step, best_val)
    return TrainResult(
        checkpoint_path=checkpoint_path,
        steps=step,
        final_loss=final_loss,
        best_val_miou=best_val,
        history_path=history_path,
    )
