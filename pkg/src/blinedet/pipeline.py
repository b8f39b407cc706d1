"""Glue between trained checkpoints, datasets and reports."""

from __future__ import annotations

import logging
from typing import Sequence

from .data import SplitManifest
from .errors import ValidationError
from .inference import PredictionRecord, ensemble_outputs, predict_video, raw_unit_outputs, record_from_outputs
from .metrics import DetectionReport, LocalizationCounts, evaluate_detection, localization_f1, localize_video
from .models import ModelCheckpoint
from .store import LusDataset

logger = logging.getLogger(__name__)


def predict_dataset(checkpoints: Sequence[ModelCheckpoint], dataset: LusDataset, split: SplitManifest,
                    aggregation: str = "max", window: int = 5, keep_heatmaps: bool = False,
                    model_id: str | None = None) -> list[PredictionRecord]:
    """Validation and test records for one model or a cross-validation ensemble.

    Test videos get the unit-wise average over all instances. Validation
    records are out-of-fold: each instance scores only the fold it was
    validated on, so the threshold is calibrated on unseen videos.
    """
    if not checkpoints:
        raise ValidationError("no checkpoints given")
    levels = {c.level for c in checkpoints}
    if len(levels) != 1:
        raise ValidationError(f"checkpoints mix levels {sorted(levels)}")
    level = levels.pop()
    models = [c.build() for c in checkpoints]
    if model_id is None:
        model_id = checkpoints[0].model_id if len(checkpoints) == 1 else \
            f"{checkpoints[0].model_id.split('/')[0]}/ensemble"

    records = []
    seen = set()
    for c, m in zip(checkpoints, models):
        if c.fold_index is None:
            continue
        for vid in dataset.videos_of(split.val_patients(c.fold_index)):
            if vid in seen:
                continue
            seen.add(vid)
            rec = predict_video(m, dataset.video(vid), model_id, aggregation, window)
            rec.partition = "val"
            rec.detections = None
            records.append(rec)

    for vid in dataset.videos_of(split.test_patients):
        video = dataset.video(vid)
        outs = [raw_unit_outputs(m, video) for m in models]
        mean = ensemble_outputs(outs)
        rec = record_from_outputs(video, level, model_id, mean, aggregation, window)
        rec.partition = "test"
        if not keep_heatmaps:
            rec.heatmaps = None
        records.append(rec)
    return records


def detection_report(records: Sequence[PredictionRecord]) -> DetectionReport:
    val = [r for r in records if r.partition == "val"]
    test = [r for r in records if r.partition == "test"]
    if not val or not test:
        raise ValidationError("need both validation and test records to evaluate")
    for r in records:
        if r.label is None:
            raise ValidationError(f"record {r.video_id} carries no label")
    return evaluate_detection([r.label for r in val], [r.video_score for r in val],
                              [r.label for r in test], [r.video_score for r in test],
                              [r.video_id for r in test])


def localization_counts(detections: dict[str, dict], dataset: LusDataset,
                        annotator: str | None = None) -> list[LocalizationCounts]:
    """Per-video counts over annotated frames of positive videos with at
    least one annotated origin."""
    counts = []
    for vid, det in sorted(detections.items()):
        m = dataset.meta.get(vid)
        if m is None or not m.label:
            continue
        ann = dataset.annotations(vid, annotator)
        if not any(ann.values()):
            continue
        counts.append(localize_video(vid, ann, det["frames"], m.px_spacing_mm))
    return counts


def localization_report(detections: dict[str, dict], dataset: LusDataset,
                        annotator: str | None = None) -> tuple[float, float, float]:
    return localization_f1(localization_counts(detections, dataset, annotator))


def detections_from_records(records: Sequence[PredictionRecord], partition: str = "test") -> dict[str, dict]:
    out = {}
    for r in records:
        if r.detections is None or r.partition != partition:
            continue
        out[r.video_id] = {
            "px_spacing_mm": r.px_spacing_mm,
            "partition": r.partition,
            "frames": {t: [d.centroid for d in dets] for t, dets in enumerate(r.detections)},
        }
    return out
