"""End-to-end steps shared by the CLI: data loading, training runs, sliding-window
prediction and cross-validation."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from voxelseg import evaluation, unet3d
from voxelseg.config import PipelineConfig, write_resolved
from voxelseg.errors import IoError, ShapeMismatch
from voxelseg.patch_engine import PatchGridConfig, crop_back, pad_to_min, reassemble, slice_grid
from voxelseg.preprocess import preprocess_sample
from voxelseg.training import FitLog, fit
from voxelseg.volume_io import (IntensityKind, LabelVolume, Sample, list_mvf, read_mvf, write_mvf,
                                write_nifti_labels)

log = logging.getLogger(__name__)

INFER_BATCH = 4


def derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def load_dir(directory) -> list[Sample]:
    paths = list_mvf(directory)
    if not paths:
        raise IoError(f"no MVF samples found in {directory}")
    return [read_mvf(p) for p in paths]


def ensure_preprocessed(samples: Sequence[Sample], cfg: PipelineConfig) -> list[Sample]:
    """Preprocess samples that are not z-scored yet; cached ones pass through."""
    return [s if s.image.intensity_kind is IntensityKind.ZSCORED else preprocess_sample(s, cfg.preprocess)
            for s in samples]


def train_model(train: Sequence[Sample], val: Sequence[Sample], cfg: PipelineConfig, seed: int,
                out_dir) -> tuple[unet3d.Model, FitLog]:
    model = unet3d.build(cfg.model, seed=derived_seed(seed, 0))
    return fit(model, train, val, cfg.train, derived_seed(seed, 1), cfg.patch, cfg.augment, out_dir)


def predict_probabilities(model: unet3d.Model, sample: Sample, patch_cfg: PatchGridConfig) -> np.ndarray:
    """Pad, run the model on every grid patch, average overlaps, crop back."""
    unet3d.check_input_shape(model.config, patch_cfg.patch_shape)
    padded, record = pad_to_min(sample, patch_cfg.patch_shape)
    patches = slice_grid(padded.image.voxels, patch_cfg.patch_shape, patch_cfg.overlap)
    outputs = []
    for i in range(0, len(patches), INFER_BATCH):
        chunk = patches[i:i + INFER_BATCH]
        batch = np.stack([p for _, p in chunk])[..., None].astype(model.dtype)
        probs = unet3d.forward(model, batch, mode="infer").data
        outputs += [(origin, probs[j]) for j, (origin, _) in enumerate(chunk)]
    full = reassemble(outputs, padded.image.shape, model.config.num_classes)
    return crop_back(full, record)


def labels_from_probs(probs: np.ndarray) -> LabelVolume:
    return LabelVolume(np.argmax(probs, axis=-1).astype(np.uint8), probs.shape[-1])


def predict_labels(model: unet3d.Model, sample: Sample, patch_cfg: PatchGridConfig) -> LabelVolume:
    pred = labels_from_probs(predict_probabilities(model, sample, patch_cfg))
    if pred.shape != sample.image.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs input {sample.image.shape}")
    return pred


def write_prediction(sample: Sample, pred: LabelVolume, out_dir, probs: np.ndarray | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_mvf(Sample(sample.id, sample.image, pred), out_dir / sample.id)
    write_nifti_labels(pred, sample.image.spacing, out_dir / f"{sample.id}.pred.nii")
    if probs is not None:
        np.save(out_dir / f"{sample.id}.probs.npy", probs)


def evaluate_pairs(preds: Sequence[Sample], gts: Sequence[Sample], cfg: PipelineConfig,
                   overlay_dir=None) -> list[dict]:
    """Per-sample metric rows (with ``id``); overlays of the predictions if requested."""
    rows = []
    for pred, gt in zip(preds, gts):
        if pred.labels is None or gt.labels is None:
            raise ShapeMismatch(f"sample {gt.id}: prediction and ground truth both need labels")
        m = evaluation.evaluate_sample(pred.labels, gt.labels)
        rows.append({"id": gt.id, **m.row()})
        if overlay_dir is not None and cfg.eval.overlay_slices:
            Path(overlay_dir).mkdir(parents=True, exist_ok=True)
            axis = cfg.eval.overlay_axis
            n = gt.image.shape[axis]
            for idx in np.linspace(0, n - 1, cfg.eval.overlay_slices + 2)[1:-1].round().astype(int):
                evaluation.render_overlay(gt.image, pred.labels, axis, int(idx),
                                          Path(overlay_dir) / evaluation.overlay_name(gt.id, axis, int(idx)))
    return rows


def run_cv(samples: Sequence[Sample], k: int, cfg: PipelineConfig, out_dir) -> evaluation.CvReport:
    """k-fold cross-validation; every fold's model, log, predictions and metrics
    are kept under ``out_dir/fold_<i>``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out_dir)
    samples = ensure_preprocessed(samples, cfg)
    folds = evaluation.cv_split(len(samples), k, cfg.seed)
    (out_dir / "folds.json").write_text(json.dumps(
        {"k": k, "seed": cfg.seed, "folds": folds,
         "ids": [[samples[i].id for i in fold] for fold in folds]}, indent=2) + "\n")
    fold_rows = []
    for f, held_out in enumerate(folds):
        fold_dir = out_dir / f"fold_{f}"
        train = [samples[i] for i in range(len(samples)) if i not in held_out]
        test = [samples[i] for i in held_out]
        log.info("fold %d/%d: %d train, %d held out", f + 1, k, len(train), len(test))
        model, _ = train_model(train, test, cfg, derived_seed(cfg.seed, f), fold_dir)
        preds = []
        for s in test:
            pred = predict_labels(model, s, cfg.patch)
            write_prediction(s, pred, fold_dir / "predictions")
            preds.append(Sample(s.id, s.image, pred))
        rows = evaluate_pairs(preds, test, cfg, fold_dir / "overlays")
        evaluation.aggregate([rows]).write_csv(fold_dir / "metrics.csv")
        fold_rows.append(rows)
    report = evaluation.aggregate(fold_rows)
    report.write_csv(out_dir / "report.csv")
    report.write_json(out_dir / "report.json")
    return report


def manifest_entry(raw: Sample, done: Sample) -> dict:
    return {"id": raw.id, "original_shape": list(raw.image.shape), "original_spacing": list(raw.image.spacing),
            "resampled_shape": list(done.image.shape), "resampled_spacing": list(done.image.spacing),
            "intensity_kind": raw.image.intensity_kind.value}

