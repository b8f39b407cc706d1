"""On-disk dataset layout.

::

    <root>/videos.jsonl                one record per video
    <root>/annotations.csv             one row per origin point
    <root>/frames/<video_id>/00000.png 8-bit grayscale frames
    <root>/split.json                  optional patient split
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .data import FrameAnnotation, LusVideo, SplitManifest
from .errors import InvalidAnnotationError, InvalidInputError

logger = logging.getLogger(__name__)

ANNOTATION_HEADER = ["video_id", "frame_index", "annotator_id", "row_px", "col_px"]


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    patient_id: str
    n_frames: int
    fps: float
    px_spacing_mm: float
    label: int


def to_uint8(frames: np.ndarray) -> np.ndarray:
    if frames.dtype == np.uint8:
        return frames
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def frame_path(root: Path, video_id: str, t: int) -> Path:
    return root / "frames" / video_id / f"{t:05d}.png"


def write_frames(root: Path, video: LusVideo) -> None:
    d = root / "frames" / video.video_id
    d.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(to_uint8(video.frames)):
        Image.fromarray(f).save(d / f"{t:05d}.png")


def read_frames(root: Path, video_id: str, n_frames: int) -> np.ndarray:
    frames = []
    for t in range(n_frames):
        p = frame_path(root, video_id, t)
        if not p.exists():
            raise InvalidInputError(f"missing frame file {p}")
        frames.append(np.asarray(Image.open(p).convert("L")))
    return np.stack(frames)


def write_annotations_csv(path: Path, annotations: Iterable[FrameAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ANNOTATION_HEADER)
        for a in annotations:
            if not a.origins:
                wr.writerow([a.video_id, a.frame_index, a.annotator_id, "", ""])
            for r, c in a.origins:
                wr.writerow([a.video_id, a.frame_index, a.annotator_id, repr(float(r)), repr(float(c))])


def read_annotations_csv(path: Path) -> list[FrameAnnotation]:
    grouped: dict[tuple[str, int, str], FrameAnnotation] = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ANNOTATION_HEADER:
            raise InvalidInputError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}")
        for row in rd:
            key = (row["video_id"], int(row["frame_index"]), row["annotator_id"])
            ann = grouped.setdefault(key, FrameAnnotation(*key))
            if row["row_px"] != "" and row["col_px"] != "":
                ann.origins.append((float(row["row_px"]), float(row["col_px"])))
    return list(grouped.values())


class LusDataset:
    """Video metadata and annotations, with lazily loaded (cached) frames."""

    def __init__(self, meta: dict[str, VideoMeta], annotations: list[FrameAnnotation],
                 root: Path | None = None, frames: dict[str, np.ndarray] | None = None):
        self.meta = meta
        self.root = root
        self._frames: dict[str, np.ndarray] = dict(frames or {})
        self._ann: dict[str, dict[str, dict[int, list]]] = defaultdict(lambda: defaultdict(dict))
        self.annotators: list[str] = []
        for a in annotations:
            if a.video_id not in meta:
                raise InvalidAnnotationError(f"annotation references unknown video {a.video_id}")
            a.validate(meta[a.video_id].n_frames)
            if a.annotator_id not in self.annotators:
                self.annotators.append(a.annotator_id)
            self._ann[a.video_id][a.annotator_id][a.frame_index] = list(a.origins)

    @classmethod
    def open(cls, root: str | Path) -> "LusDataset":
        root = Path(root)
        meta = {}
        path = root / "videos.jsonl"
        if not path.exists():
            raise InvalidInputError(f"{path} not found")
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                m = VideoMeta(str(rec["video_id"]), str(rec["patient_id"]), int(rec["n_frames"]),
                              float(rec["fps"]), float(rec["px_spacing_mm"]), int(rec["label"]))
                meta[m.video_id] = m
        ann_path = root / "annotations.csv"
        annotations = read_annotations_csv(ann_path) if ann_path.exists() else []
        return cls(meta, annotations, root=root)

    @classmethod
    def from_memory(cls, videos: Iterable[LusVideo],
                    annotations: Iterable[FrameAnnotation] = ()) -> "LusDataset":
        videos = list(videos)
        meta = {v.video_id: VideoMeta(v.video_id, v.patient_id, v.n_frames, v.fps,
                                      v.px_spacing_mm, v.label) for v in videos}
        return cls(meta, list(annotations), frames={v.video_id: to_uint8(v.frames) for v in videos})

    def write(self, root: str | Path) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "videos.jsonl", "w") as fh:
            for m in self.meta.values():
                fh.write(json.dumps(asdict(m)) + "\n")
        for vid in self.meta:
            write_frames(root, self.video(vid))
        write_annotations_csv(root / "annotations.csv", self.all_annotations())

    # -- queries ----------------------------------------------------------

    @property
    def video_ids(self) -> list[str]:
        return list(self.meta)

    @property
    def patients(self) -> set[str]:
        return {m.patient_id for m in self.meta.values()}

    @property
    def primary_annotator(self) -> str | None:
        return self.annotators[0] if self.annotators else None

    def videos_of(self, patients: Iterable[str]) -> list[str]:
        ps = set(patients)
        return [v for v, m in self.meta.items() if m.patient_id in ps]

    def video(self, video_id: str) -> LusVideo:
        m = self.meta[video_id]
        if video_id not in self._frames:
            if self.root is None:
                raise InvalidInputError(f"no frames available for {video_id}")
            self._frames[video_id] = read_frames(self.root, video_id, m.n_frames)
        return LusVideo(m.video_id, m.patient_id, self._frames[video_id], m.px_spacing_mm, m.fps, m.label)

    def frames(self, video_id: str) -> np.ndarray:
        """Raw uint8 frames, loading and caching on first access."""
        return self.video(video_id).frames

    def annotations(self, video_id: str, annotator: str | None = None) -> dict[int, list]:
        """``{frame_index: [(row, col), ...]}`` for one annotator (default: primary)."""
        annotator = annotator or self.primary_annotator
        return dict(self._ann.get(video_id, {}).get(annotator, {}))

    def all_annotations(self) -> list[FrameAnnotation]:
        out = []
        for vid, by_annotator in self._ann.items():
            for annotator, frames in by_annotator.items():
                for t in sorted(frames):
                    out.append(FrameAnnotation(vid, t, annotator, list(frames[t])))
        return out

    def load_split(self) -> SplitManifest:
        if self.root is None:
            raise InvalidInputError("in-memory dataset has no split.json")
        return SplitManifest.load(self.root / "split.json")
