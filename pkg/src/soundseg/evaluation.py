"""Metrics and the audio-control sensitivity protocol.

Scores are per-sample and averaged. A prediction and ground truth that are
both empty count as perfect: the whole point of the mute/noise protocol is
that blank predictions against blank targets must score well.

``sensitivity_sweep`` re-runs inference with the audio replaced by silence
or by white feature noise at a fixed SNR while the visual inputs stay
untouched, and reports the relative attenuation of mIoU / F-score against
the normal-condition scores.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig
from .encoders import EncoderBundle
from .model import SoundSegModel, collate, prepare_sample
from .sedam import NEG_INF
from .segmodel import binary_foreground
from .synthdata import SceneSample
from .textcues import CueExtraction, filter_extraction, score_recognition

CONDITIONS = ("normal", "mute", "wgn10", "wgn40")


@dataclass
class EvalReport:
    miou: float
    fscore: float
    per_sample: list[tuple[str, float, float]]
    condition: str = "normal"
    extra: dict = field(default_factory=dict)


@dataclass
class SensitivityReport:
    baseline: EvalReport
    condition_reports: dict[str, EvalReport]
    deltas: dict[str, tuple[float, float]]  # condition -> (dm %, df %)
    blank_gt_scores: dict[str, tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "baseline": {"miou": self.baseline.miou, "fscore": self.baseline.fscore},
            "conditions": {
                c: {"miou": r.miou, "fscore": r.fscore}
                for c, r in self.condition_reports.items()
            },
            "deltas": {c: {"dm": d[0], "df": d[1]} for c, d in self.deltas.items()},
            "blank_gt": {
                c: {"miou": v[0], "fscore": v[1]}
                for c, v in self.blank_gt_scores.items()
            },
        }


def _binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)


def miou(
    pred_masks: list[np.ndarray], gt_masks: list[np.ndarray], semantic: bool = False
) -> float:
    """Mean per-sample IoU. Binary inputs compare foregrounds directly; index
    inputs (semantic=True) average per-class IoU over the classes present in
    either mask of a sample."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("prediction and ground truth counts differ")
    scores = []
    for pred, gt in zip(pred_masks, gt_masks):
        if pred.shape != gt.shape:
            raise ValueError("mask shapes differ")
        if not semantic:
            scores.append(_binary_iou(pred.astype(bool), gt.astype(bool)))
            continue
        classes = sorted(set(np.unique(pred)) | set(np.unique(gt)))
        classes = [c for c in classes if c != 0]
        if not classes:
            scores.append(1.0)
            continue
        per_class = [_binary_iou(pred == c, gt == c) for c in classes]
        scores.append(float(np.mean(per_class)))
    return float(np.mean(scores))


def fscore(
    pred_masks: list[np.ndarray], gt_masks: list[np.ndarray], beta_sq: float = 0.3
) -> float:
    """Weighted F-measure over binary masks; both-empty scores 1, otherwise a
    zero denominator scores 0."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("prediction and ground truth counts differ")
    scores = []
    for pred, gt in zip(pred_masks, gt_masks):
        if pred.shape != gt.shape:
            raise ValueError("mask shapes differ")
        pred = pred.astype(bool)
        gt = gt.astype(bool)
        tp = np.logical_and(pred, gt).sum()
        if pred.sum() == 0 and gt.sum() == 0:
            scores.append(1.0)
            continue
        precision = tp / pred.sum() if pred.sum() else 0.0
        recall = tp / gt.sum() if gt.sum() else 0.0
        denom = beta_sq * precision + recall
        f = (1 + beta_sq) * precision * recall / denom if denom > 0 else 0.0
        scores.append(float(f))
    return float(np.mean(scores))


def substitute_audio(sample: SceneSample, condition: str) -> SceneSample:
    """Swap the audio signature for an evaluation condition; image and
    ground truth stay byte-identical."""
    if condition not in ("mute", "wgn10", "wgn40"):
        raise ValueError(f"unknown condition {condition!r}")
    sig = copy.deepcopy(sample.audio_signature)
    if condition == "mute":
        sig.kind = "mute"
        sig.snr_db = None
    else:
        sig.kind = "wgn"
        sig.snr_db = 10.0 if condition == "wgn10" else 40.0
    return SceneSample(
        sample_id=sample.sample_id,
        split=sample.split,
        frame_index=sample.frame_index,
        objects=sample.objects,
        image=sample.image,
        gt_mask=sample.gt_mask,
        audio_signature=sig,
    )


def _predict_foregrounds(
    model: SoundSegModel,
    encoders: EncoderBundle,
    samples: list[SceneSample],
    cues: dict[str, list[str]],
    cfg: ExperimentConfig,
    batch_size: int = 16,
) -> list[np.ndarray]:
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            packs = [
                prepare_sample(s, cues.get(s.sample_id, []), encoders, cfg.textcues.N_T)
                for s in chunk
            ]
            batch = collate(packs)
            out, _, _ = model(batch)
            fg = binary_foreground(out.M_pred, cfg.eval.mask_threshold)
            preds.extend(fg[i].numpy() for i in range(fg.shape[0]))
    return preds


def evaluate_model(
    model: SoundSegModel,
    encoders: EncoderBundle,
    samples: list[SceneSample],
    cues: dict[str, list[str]],
    cfg: ExperimentConfig,
    condition: str = "normal",
) -> EvalReport:
    eval_samples = (
        samples
        if condition == "normal"
        else [substitute_audio(s, condition) for s in samples]
    )
    preds = _predict_foregrounds(model, encoders, eval_samples, cues, cfg)
    gts = [s.gt_mask > 0 for s in samples]
    per_sample = [
        (
            s.sample_id,
            miou([p], [g]),
            fscore([p], [g], cfg.eval.beta_sq),
        )
        for s, p, g in zip(samples, preds, gts)
    ]
    return EvalReport(
        miou=miou(preds, gts),
        fscore=fscore(preds, gts, cfg.eval.beta_sq),
        per_sample=per_sample,
        condition=condition,
        extra={"predictions": preds},
    )


def _parameter_digest(model: SoundSegModel) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.numpy().tobytes())
    return h.hexdigest()


def sensitivity_sweep(
    model: SoundSegModel,
    encoders: EncoderBundle,
    samples: list[SceneSample],
    cues: dict[str, list[str]],
    cfg: ExperimentConfig,
    conditions: list[str] | None = None,
) -> SensitivityReport:
    """Evaluate normal vs substituted audio. Attenuations compare against the
    original ground truth; blank-ground-truth scores are also reported for
    the diagnostic reading where a wrong audio input makes the correct
    target an empty mask."""
    conditions = conditions or list(cfg.eval.conditions)
    digest_before = _parameter_digest(model)
    baseline = evaluate_model(model, encoders, samples, cues, cfg, "normal")
    reports = {}
    deltas = {}
    blank_scores = {}
    blank_gt = [np.zeros_like(s.gt_mask, dtype=bool) for s in samples]
    for cond in conditions:
        rep = evaluate_model(model, encoders, samples, cues, cfg, cond)
        reports[cond] = rep
        dm = 100.0 * (baseline.miou - rep.miou) / baseline.miou if baseline.miou else 0.0
        df = (
            100.0 * (baseline.fscore - rep.fscore) / baseline.fscore
            if baseline.fscore
            else 0.0
        )
        deltas[cond] = (dm, df)
        preds = rep.extra["predictions"]
        blank_scores[cond] = (
            miou(preds, blank_gt),
            fscore(preds, blank_gt, cfg.eval.beta_sq),
        )
    if _parameter_digest(model) != digest_before:
        raise RuntimeError("sensitivity sweep mutated model parameters")
    return SensitivityReport(
        baseline=baseline,
        condition_reports=reports,
        deltas=deltas,
        blank_gt_scores=blank_scores,
    )


def rec_stage_scores(
    model: SoundSegModel,
    encoders: EncoderBundle,
    samples: list[SceneSample],
    extractions: dict[str, CueExtraction],
    cfg: ExperimentConfig,
) -> dict:
    """Recognition AP before and after the attention-score mask.

    Stage one scores the collected cues against the sounding-category sets;
    stage two keeps only cues whose mask entry is zero under the sample's
    real audio.
    """
    model.eval()
    stage1, stage2, gt_sets = [], [], []
    n_t = cfg.textcues.N_T
    with torch.no_grad():
        for s in samples:
            ext = extractions[s.sample_id]
            pack = prepare_sample(s, ext.cues, encoders, n_t)
            batch = collate([pack])
            _, sof, _ = model(batch)
            keep = (sof.mask[0] != NEG_INF).tolist()[: len(ext.cues)]
            keep += [False] * (len(ext.cues) - len(keep))
            stage1.append(ext)
            stage2.append(filter_extraction(ext, keep))
            gt_sets.append({o.category for o in s.objects if o.is_sounding})
    return {
        "stage1_ap": score_recognition(stage1, gt_sets),
        "stage2_ap": score_recognition(stage2, gt_sets),
        "stage1_cues": sum(len(e.cues) for e in stage1),
        "stage2_cues": sum(len(e.cues) for e in stage2),
    }


def emit_sensitivity_bars(report: SensitivityReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    conds = list(report.deltas)
    dm = [report.deltas[c][0] for c in conds]
    df = [report.deltas[c][1] for c in conds]
    x = np.arange(len(conds))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(x - 0.18, dm, width=0.36, label="mIoU attenuation %")
    ax.bar(x + 0.18, df, width=0.36, label="F-score attenuation %")
    ax.set_xticks(x, conds)
    ax.set_ylabel("attenuation vs normal audio (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_mask_grid(
    samples: list[SceneSample],
    predictions: dict[str, list[np.ndarray]],
    path,
    max_rows: int = 6,
) -> None:
    """One row per sample: image, ground truth, then one column per
    condition's predicted foreground."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = min(max_rows, len(samples))
    cols = 2 + len(predictions)
    fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.0 * rows))
    axes = np.atleast_2d(axes)
    for r in range(rows):
        s = samples[r]
        axes[r, 0].imshow(s.image.transpose(1, 2, 0))
        axes[r, 0].set_ylabel(s.sample_id, fontsize=7)
        axes[r, 1].imshow(s.gt_mask > 0, cmap="gray", vmin=0, vmax=1)
        for c, (name, preds) in enumerate(predictions.items(), start=2):
            axes[r, c].imshow(preds[r], cmap="gray", vmin=0, vmax=1)
            if r == 0:
                axes[r, c].set_title(name, fontsize=8)
        if r == 0:
            axes[r, 0].set_title("image", fontsize=8)
            axes[r, 1].set_title("ground truth", fontsize=8)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
