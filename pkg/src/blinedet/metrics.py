"""Detection metrics (ROC-AUC, F1 at a validation-balanced threshold), the
5 mm single-point localization metric and inter-observer agreement."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.stats import rankdata

from .errors import UndefinedMetricError

MATCH_RADIUS_MM = 5.0


@dataclass
class LocalizationCounts:
    video_id: str
    tp: int
    fp: int
    fn: int


@dataclass
class DetectionReport:
    auc: float
    f1: float
    threshold: float
    video_ids: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)


def _binary_inputs(labels, scores):
    y = np.asarray(labels).astype(int)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise UndefinedMetricError("labels and scores differ in length")
    if y.sum() == 0 or y.sum() == y.size:
        raise UndefinedMetricError("metric needs both positive and negative labels")
    return y, s


def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    y, s = _binary_inputs(labels, scores)
    ranks = rankdata(s)  # average ranks for ties
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _precision_recall(y: np.ndarray, s: np.ndarray, threshold: float) -> tuple[float, float]:
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def select_threshold(val_labels: Sequence[int], val_scores: Sequence[float]) -> float:
    """Threshold minimising ``|precision - recall|`` on validation data.

    Candidates are the lowest and highest score plus the midpoints between
    consecutive distinct scores; ties go to the larger threshold.
    """
    y, s = _binary_inputs(val_labels, val_scores)
    u = np.unique(s)
    candidates = np.concatenate([[u[0]], (u[:-1] + u[1:]) / 2.0, [u[-1]]])
    best_t, best_gap = None, np.inf
    for t in candidates:
        p, r = _precision_recall(y, s, t)
        gap = abs(p - r)
        if gap < best_gap or (gap == best_gap and t > best_t):
            best_t, best_gap = float(t), gap
    return best_t


def f1_detection(labels: Sequence[int], scores: Sequence[float], threshold: float) -> float:
    y = np.asarray(labels).astype(int)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def evaluate_detection(val_labels, val_scores, test_labels, test_scores, video_ids=None) -> DetectionReport:
    t = select_threshold(val_labels, val_scores)
    return DetectionReport(roc_auc(test_labels, test_scores), f1_detection(test_labels, test_scores, t), t,
                           list(video_ids or []), [float(v) for v in test_scores],
                           [int(v) for v in test_labels])


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------

def match_points(annotations: Sequence[tuple[float, float]], detections: Sequence[tuple[float, float]],
                 px_spacing_mm: float, radius_mm: float = MATCH_RADIUS_MM) -> tuple[int, int, int]:
    """``(tp, fp, fn)`` from a maximum-cardinality matching on the graph of
    annotation/detection pairs closer than ``radius_mm`` (strict)."""
    a = np.asarray(annotations, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(d) == 0:
        return 0, len(d), len(a)
    dist_mm = np.hypot(a[:, None, 0] - d[None, :, 0], a[:, None, 1] - d[None, :, 1]) * px_spacing_mm
    graph = csr_matrix((dist_mm < radius_mm).astype(np.int8))
    match = maximum_bipartite_matching(graph, perm_type="column")
    tp = int(np.sum(match >= 0))
    return tp, len(d) - tp, len(a) - tp


def localize_video(video_id: str, annotations: Mapping[int, Sequence], detections: Mapping[int, Sequence],
                   px_spacing_mm: float, radius_mm: float = MATCH_RADIUS_MM) -> LocalizationCounts:
    """Sum matches over the annotated frames of one video."""
    tp = fp = fn = 0
    for t, ann in annotations.items():
        a, b, c = match_points(ann, detections.get(t, []), px_spacing_mm, radius_mm)
        tp, fp, fn = tp + a, fp + b, fn + c
    return LocalizationCounts(video_id, tp, fp, fn)


def localization_f1(counts: Sequence[LocalizationCounts]) -> tuple[float, float, float]:
    """Average per-video precision and recall, then take their harmonic mean.

    A video without detections counts as precision 1.
    """
    if not counts:
        raise UndefinedMetricError("no videos to evaluate")
    ps, rs = [], []
    for c in counts:
        if c.tp + c.fn == 0:
            raise UndefinedMetricError(f"{c.video_id} has no annotated origins")
        ps.append(c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0)
        rs.append(c.tp / (c.tp + c.fn))
    p, r = float(np.mean(ps)), float(np.mean(rs))
    return p, r, (2 * p * r / (p + r) if p + r > 0 else 0.0)


def interobserver_agreement(annotations_a: Mapping[str, Mapping[int, Sequence]],
                            annotations_b: Mapping[str, Mapping[int, Sequence]],
                            spacing: float | Mapping[str, float]) -> float:
    """F1 of observer B scored against observer A as the reference.

    Inputs map ``video_id -> {frame_index: [(row, col), ...]}``. Only frames
    annotated by both observers are compared; videos where A marked no
    origins are skipped since their recall is undefined.
    """
    counts = []
    mismatch = False
    for vid in sorted(set(annotations_a) | set(annotations_b)):
        fa, fb = annotations_a.get(vid, {}), annotations_b.get(vid, {})
        common = set(fa) & set(fb)
        if common != set(fa) or common != set(fb):
            mismatch = True
        if not common:
            continue
        s = spacing[vid] if isinstance(spacing, Mapping) else spacing
        c = localize_video(vid, {t: fa[t] for t in common}, {t: fb[t] for t in common}, s)
        if c.tp + c.fn > 0:
            counts.append(c)
    if mismatch:
        warnings.warn("observers cover different frames; comparing the intersection only", stacklevel=2)
    return localization_f1(counts)[2]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_report(out_dir: str | Path, model_id: str, level: str, det: DetectionReport,
                 localization: tuple[float, float, float] | None = None,
                 per_video: list[dict] | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "model_id": model_id,
        "level": level,
        "auc": det.auc,
        "f1": det.f1,
        "threshold": det.threshold,
        "localization": None if localization is None else dict(zip(("precision", "recall", "f1"), localization)),
        "per_video": per_video or [
            {"video_id": v, "score": s, "label": y} for v, s, y in zip(det.video_ids, det.scores, det.labels)
        ],
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["model_id", "level", "f1", "auc", "threshold", "loc_precision", "loc_recall", "loc_f1"])
        loc = localization or ("", "", "")
        wr.writerow([model_id, level, f"{det.f1:.6f}", f"{det.auc:.6f}", f"{det.threshold:.6f}",
                     *[f"{v:.6f}" if v != "" else "" for v in loc]])
    return doc

