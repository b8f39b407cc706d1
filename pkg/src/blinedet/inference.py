"""From per-unit model outputs to video-level scores.

Heatmap post-processing, aggregation rules, ensembling of cross-validation
instances and cross-level decision fusion.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import CLIP_LENGTH
from .data import LusVideo, extract_clips
from .errors import AlignmentError, EmptyAggregationError, ValidationError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
ABSTAIN = None


@dataclass
class OriginDetection:
    frame_index: int
    centroid: tuple[float, float]
    component_size_px: int


@dataclass
class PredictionRecord:
    video_id: str
    level: str
    model_id: str
    unit_scores: list[float]
    video_score: float
    aggregation: str
    window: int | None = None
    threshold_used: float | None = None
    decision: int | None = None
    label: int | None = None
    partition: str | None = None
    px_spacing_mm: float | None = None
    # in-memory only: raw per-frame heatmaps for pixel-level ensembling
    heatmaps: np.ndarray | None = field(default=None, repr=False, compare=False)
    detections: list[list[OriginDetection]] | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("heatmaps")
        d.pop("detections")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PredictionRecord":
        return cls(**d)

    def recompute_score(self) -> float:
        if self.level == "pixel":
            return pixel_video_score(self.unit_scores)
        return aggregate_video(self.unit_scores, self.aggregation, self.window or 5)


# ---------------------------------------------------------------------------
# post-processing and aggregation
# ---------------------------------------------------------------------------

def postprocess_heatmap(heatmap: np.ndarray, threshold: float = 0.5,
                        frame_index: int = 0) -> list[OriginDetection]:
    """Binarise (``>= threshold``), label 8-connected components and return
    one centroid per component, in label order (raster scan)."""
    mask = np.asarray(heatmap) >= threshold
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    centroids = ndimage.center_of_mass(mask, labels, idx)
    sizes = ndimage.sum_labels(mask, labels, idx)
    return [OriginDetection(frame_index, (float(r), float(c)), int(s))
            for (r, c), s in zip(centroids, sizes)]


def aggregate_video(unit_scores: Sequence[float], method: str = "max", window: int = 5) -> float:
    s = np.asarray(unit_scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyAggregationError("cannot aggregate an empty score list")
    if method == "mean":
        return float(s.mean())
    if method == "max":
        return float(s.max())
    if method == "max_moving_avg":
        if window < 1:
            raise ValidationError("moving-average window must be >= 1")
        lo_off, hi_off = (window - 1) // 2, window // 2
        n = s.size
        csum = np.concatenate([[0.0], np.cumsum(s)])
        lo = np.clip(np.arange(n) - lo_off, 0, n)
        hi = np.clip(np.arange(n) + hi_off + 1, 0, n)
        return float(np.max((csum[hi] - csum[lo]) / (hi - lo)))
    raise ValidationError(f"unknown aggregation method {method!r}")


def pixel_video_score(per_frame_counts: Sequence[float]) -> float:
    c = np.asarray(per_frame_counts, dtype=np.float64)
    if c.size == 0:
        raise EmptyAggregationError("no frames to average")
    return float(c.mean())


# ---------------------------------------------------------------------------
# running predictors
# ---------------------------------------------------------------------------

def raw_unit_outputs(model: torch.nn.Module, video: LusVideo, batch_size: int = 16,
                     clip_length: int = CLIP_LENGTH) -> np.ndarray:
    """Model outputs per unit: clip probabilities, frame probabilities, or
    per-frame heatmaps ``(T, H, W)`` for pixel-level models."""
    model.eval()
    outs = []
    with torch.no_grad():
        if model.level == "clip":
            clips = [c for _, c in extract_clips(video, clip_length, "inference", pad_short=True)]
            for i in range(0, len(clips), batch_size):
                x = torch.from_numpy(np.stack(clips[i:i + batch_size])[:, None])
                outs.append(model(x).numpy())
        else:
            for i in range(0, video.n_frames, batch_size):
                x = torch.from_numpy(video.clip(i, batch_size)[:, None])
                outs.append(model(x).numpy())
    return np.concatenate(outs).astype(np.float64)


def record_from_outputs(video: LusVideo, level: str, model_id: str, outputs: np.ndarray,
                        aggregation: str = "max", window: int = 5,
                        threshold: float = 0.5) -> PredictionRecord:
    if level == "pixel":
        dets = [postprocess_heatmap(h, threshold, t) for t, h in enumerate(outputs)]
        counts = [float(len(d)) for d in dets]
        return PredictionRecord(video.video_id, level, model_id, counts, pixel_video_score(counts),
                                "mean_count", None, label=video.label, px_spacing_mm=video.px_spacing_mm,
                                heatmaps=outputs, detections=dets)
    scores = [float(v) for v in outputs]
    return PredictionRecord(video.video_id, level, model_id, scores,
                            aggregate_video(scores, aggregation, window), aggregation,
                            window if aggregation == "max_moving_avg" else None,
                            label=video.label, px_spacing_mm=video.px_spacing_mm)


def predict_video(model: torch.nn.Module, video: LusVideo, model_id: str = "model",
                  aggregation: str = "max", window: int = 5, keep_heatmaps: bool = False) -> PredictionRecord:
    rec = record_from_outputs(video, model.level, model_id, raw_unit_outputs(model, video),
                              aggregation, window)
    if not keep_heatmaps:
        rec.heatmaps = None
    return rec


def ensemble_outputs(outputs: Sequence[np.ndarray]) -> np.ndarray:
    shapes = {o.shape for o in outputs}
    if len(shapes) != 1:
        raise AlignmentError(f"ensemble members disagree on unit layout: {sorted(shapes)}")
    # shifted mean: exact when all members agree
    first = np.asarray(outputs[0], dtype=np.float64)
    return first + np.mean(np.stack([np.asarray(o, dtype=np.float64) - first for o in outputs]), axis=0)


def ensemble_predict(records: Sequence[PredictionRecord], model_id: str | None = None,
                     video: LusVideo | None = None) -> PredictionRecord:
    """Average the instances' raw unit outputs, then aggregate as usual.

    Pixel-level records must carry their heatmaps: the average heatmap is
    thresholded, not the per-instance detections.
    """
    if not records:
        raise EmptyAggregationError("no records to ensemble")
    first = records[0]
    for r in records[1:]:
        if (r.video_id, r.level) != (first.video_id, first.level):
            raise AlignmentError("ensemble members must share video_id and level")
    model_id = model_id or f"{first.model_id.split('/')[0]}/ensemble"
    if first.level == "pixel":
        if any(r.heatmaps is None for r in records):
            raise AlignmentError("pixel-level ensembling needs the raw heatmaps of every instance")
        mean_maps = ensemble_outputs([r.heatmaps for r in records])
        dets = [postprocess_heatmap(h, 0.5, t) for t, h in enumerate(mean_maps)]
        counts = [float(len(d)) for d in dets]
        return PredictionRecord(first.video_id, "pixel", model_id, counts, pixel_video_score(counts),
                                "mean_count", None, label=first.label, partition=first.partition,
                                px_spacing_mm=first.px_spacing_mm, heatmaps=mean_maps, detections=dets)
    mean_scores = ensemble_outputs([np.asarray(r.unit_scores) for r in records])
    window = first.window or 5
    scores = [float(v) for v in mean_scores]
    return PredictionRecord(first.video_id, first.level, model_id, scores,
                            aggregate_video(scores, first.aggregation, window), first.aggregation,
                            first.window, label=first.label, partition=first.partition,
                            px_spacing_mm=first.px_spacing_mm)


def fuse_decisions(decisions: Sequence[int], mode: str = "majority") -> int | None:
    """Combine clip/frame/pixel decisions. ``unanimous`` returns ``None`` (abstain)
    unless all three agree."""
    d = [int(x) for x in decisions]
    if len(d) != 3:
        raise ValidationError(f"expected 3 decisions, got {len(d)}")
    if mode == "majority":
        return int(sum(d) >= 2)
    if mode == "unanimous":
        return d[0] if len(set(d)) == 1 else ABSTAIN
    raise ValidationError(f"unknown fusion mode {mode!r}")


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_predictions(path: str | Path, records: Iterable[PredictionRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(PredictionRecord.from_json(json.loads(line)))
    return out


def write_detections(path: str | Path, records: Iterable[PredictionRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            if r.detections is None:
                continue
            frames = [{"frame_index": t, "detections": [
                {"centroid": list(d.centroid), "component_size_px": d.component_size_px} for d in dets]}
                for t, dets in enumerate(r.detections)]
            fh.write(json.dumps({"video_id": r.video_id, "model_id": r.model_id,
                                 "px_spacing_mm": r.px_spacing_mm, "partition": r.partition,
                                 "frames": frames}, sort_keys=True) + "\n")


def read_detections(path: str | Path) -> dict[str, dict]:
    """``{video_id: {"px_spacing_mm": s, "frames": {t: [(row, col), ...]}}}``"""
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out[d["video_id"]] = {
            "px_spacing_mm": d["px_spacing_mm"],
            "partition": d.get("partition"),
            "frames": {f["frame_index"]: [tuple(x["centroid"]) for x in f["detections"]] for f in d["frames"]},
        }
    return out
