"""Data model, frame preprocessing, patient-level splits, clip extraction and
the sample-weighting / batch-scheduling scheme used to build training epochs."""

from __future__ import annotations

import json
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from . import CLIP_LENGTH, H, W
from .errors import (
    ConfigurationError,
    InvalidAnnotationError,
    InvalidCropError,
    InvalidInputError,
    SplitInfeasibleError,
    ValidationError,
    VideoTooShortError,
)

MIN_SPACING_MM, MAX_SPACING_MM = 0.2, 1.0


@dataclass
class LusVideo:
    """A preprocessed grayscale video.

    ``frames`` is a ``(T, H, W)`` array. Float arrays hold intensities in
    [0, 1]; ``uint8`` arrays are interpreted as ``round(i * 255)`` so that a
    whole dataset can be held in memory at one byte per pixel.
    """

    video_id: str
    patient_id: str
    frames: np.ndarray
    px_spacing_mm: float
    fps: float
    label: int

    def __post_init__(self):
        f = self.frames
        if f.ndim != 3 or f.shape[0] < 1:
            raise InvalidInputError(f"{self.video_id}: frames must be (T>=1, H, W), got {f.shape}")
        if not MIN_SPACING_MM <= self.px_spacing_mm <= MAX_SPACING_MM:
            raise InvalidInputError(
                f"{self.video_id}: px_spacing_mm={self.px_spacing_mm} outside "
                f"[{MIN_SPACING_MM}, {MAX_SPACING_MM}]"
            )
        if self.fps <= 0:
            raise InvalidInputError(f"{self.video_id}: fps must be positive")
        if f.dtype != np.uint8 and (f.min() < 0.0 or f.max() > 1.0):
            raise InvalidInputError(f"{self.video_id}: intensities outside [0, 1]")
        self.label = int(self.label)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def frame(self, t: int) -> np.ndarray:
        return as_float(self.frames[t])

    def clip(self, start: int, length: int = CLIP_LENGTH) -> np.ndarray:
        return as_float(self.frames[start:start + length])


def as_float(a: np.ndarray) -> np.ndarray:
    if a.dtype == np.uint8:
        return a.astype(np.float32) / 255.0
    return a.astype(np.float32, copy=False)


@dataclass
class FrameAnnotation:
    video_id: str
    frame_index: int
    annotator_id: str
    origins: list[tuple[float, float]] = field(default_factory=list)

    def validate(self, n_frames: int, shape: tuple[int, int] = (H, W)) -> None:
        if not 0 <= self.frame_index < n_frames:
            raise InvalidAnnotationError(
                f"{self.video_id}: frame_index {self.frame_index} outside [0, {n_frames})"
            )
        h, w = shape
        for r, c in self.origins:
            if not (0 <= r <= h - 1 and 0 <= c <= w - 1):
                raise InvalidAnnotationError(
                    f"{self.video_id}[{self.frame_index}]: origin ({r}, {c}) outside {h}x{w} frame"
                )


@dataclass
class SplitManifest:
    test_patients: set[str]
    folds: list[set[str]]

    def __post_init__(self):
        self.test_patients = set(self.test_patients)
        self.folds = [set(f) for f in self.folds]
        parts = [self.test_patients, *self.folds]
        seen: set[str] = set()
        for p in parts:
            if seen & p:
                raise ValidationError(f"split partitions overlap on {sorted(seen & p)}")
            seen |= p

    @property
    def all_patients(self) -> set[str]:
        return self.test_patients.union(*self.folds)

    def train_patients(self, fold_index: int) -> set[str]:
        self._check_fold(fold_index)
        return set().union(*(f for k, f in enumerate(self.folds) if k != fold_index))

    def val_patients(self, fold_index: int) -> set[str]:
        self._check_fold(fold_index)
        return set(self.folds[fold_index])

    def _check_fold(self, k: int) -> None:
        if not 0 <= k < len(self.folds):
            raise ConfigurationError(f"fold_index {k} outside [0, {len(self.folds)})")

    def to_json(self) -> dict:
        return {"test": sorted(self.test_patients), "folds": [sorted(f) for f in self.folds]}

    @classmethod
    def from_json(cls, doc: dict) -> "SplitManifest":
        return cls(set(doc["test"]), [set(f) for f in doc["folds"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


class Unit(NamedTuple):
    """One training/validation sample: a frame index, or a clip start."""

    video_id: str
    index: int
    positive: bool


@dataclass(frozen=True)
class SampleWeight:
    unit_id: tuple[str, int]
    weight: float
    positive: bool


@dataclass
class Batch:
    positive: list[Unit]
    negative: list[Unit]

    @property
    def units(self) -> list[Unit]:
        return self.positive + self.negative

    def __len__(self) -> int:
        return len(self.positive) + len(self.negative)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment (identity when sizes match)."""
    in_h, in_w = img.shape
    rr = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    cc = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    grid = np.meshgrid(rr, cc, indexing="ij")
    return ndimage.map_coordinates(img.astype(np.float64), grid, order=1, mode="nearest")


def preprocess_frame(raw: np.ndarray, crop: tuple[int, int, int, int] | None = None,
                     out_shape: tuple[int, int] = (H, W)) -> np.ndarray:
    """Crop, pad back to the raw frame's aspect ratio, resample to ``out_shape``
    and min-max normalise to [0, 1].

    ``crop`` is ``(top, left, height, width)`` in raw pixel coordinates; ``None``
    keeps the full frame. Constant frames come out as all zeros.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.size == 0:
        raise InvalidInputError(f"expected a non-empty 2-D grayscale frame, got shape {raw.shape}")
    rh, rw = raw.shape
    top, left, ch, cw = crop if crop is not None else (0, 0, rh, rw)
    if ch <= 0 or cw <= 0:
        raise InvalidCropError(f"degenerate crop {crop}")
    if top < 0 or left < 0 or top + ch > rh or left + cw > rw:
        raise InvalidCropError(f"crop {crop} outside {rh}x{rw} image")
    img = raw[top:top + ch, left:left + cw].astype(np.float64)

    # pad the short axis (equal split, odd remainder at the far side)
    target = rw / rh
    if cw / ch < target:
        pad = int(round(ch * target)) - cw
        img = np.pad(img, ((0, 0), (pad // 2, pad - pad // 2)))
    elif cw / ch > target:
        pad = int(round(cw / target)) - ch
        img = np.pad(img, ((pad // 2, pad - pad // 2), (0, 0)))

    out = resize_bilinear(img, *out_shape)
    lo, hi = out.min(), out.max()
    if hi - lo <= 1e-12 * max(abs(hi), 1.0):  # interpolation round-off on flat input
        return np.zeros(out_shape, dtype=np.float32)
    return ((out - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------

def clip_starts(n_frames: int, length: int = CLIP_LENGTH, mode: str = "inference") -> list[int]:
    if n_frames < length:
        raise VideoTooShortError(f"video has {n_frames} frames, clip length is {length}")
    if mode == "training":
        return list(range(n_frames - length + 1))
    if mode != "inference":
        raise ConfigurationError(f"unknown clip mode {mode!r}")
    starts = list(range(0, n_frames - length + 1, length))
    if n_frames % length:
        starts.append(n_frames - length)
    return starts


def pad_to_length(frames: np.ndarray, length: int = CLIP_LENGTH) -> np.ndarray:
    """Repeat the last frame until the sequence holds ``length`` frames."""
    if len(frames) >= length:
        return frames
    tail = np.repeat(frames[-1:], length - len(frames), axis=0)
    return np.concatenate([frames, tail], axis=0)


def extract_clips(video: LusVideo, length: int = CLIP_LENGTH, mode: str = "inference",
                  pad_short: bool = False) -> list[tuple[int, np.ndarray]]:
    """Return ``(start, clip)`` pairs; clips are float ``(length, H, W)`` arrays.

    With ``pad_short`` a video shorter than ``length`` yields one clip padded
    by repeating its last frame instead of raising.
    """
    if video.n_frames < length and pad_short:
        return [(0, pad_to_length(video.clip(0, video.n_frames), length))]
    return [(s, video.clip(s, length)) for s in clip_starts(video.n_frames, length, mode)]


# ---------------------------------------------------------------------------
# patient split
# ---------------------------------------------------------------------------

def build_patient_split(patient_ids: Iterable[str], seed: int, n_folds: int = 5,
                        test_fraction: float = 0.2) -> SplitManifest:
    ids = sorted(set(patient_ids))
    n = len(ids)
    if n < max(6, n_folds + 1):
        raise SplitInfeasibleError(f"need at least 6 patients for a split, got {n}")
    n_test = int(np.floor(n * test_fraction + 0.5))
    n_test = min(max(n_test, 1), n - n_folds)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    test, dev = shuffled[:n_test], shuffled[n_test:]
    base, extra = divmod(len(dev), n_folds)
    folds, pos = [], 0
    for k in range(n_folds):
        size = base + (1 if k < extra else 0)
        folds.append(set(dev[pos:pos + size]))
        pos += size
    return SplitManifest(set(test), folds)


# ---------------------------------------------------------------------------
# sample weights and epoch schedule
# ---------------------------------------------------------------------------

def compute_sample_weights(units: Sequence[Unit],
                           known_videos: Iterable[str] | None = None) -> list[SampleWeight]:
    """Reciprocal-per-video weights with the negative side rescaled so both
    polarities contribute equal total weight.

    Videos listed in ``known_videos`` that contribute no units are skipped
    with a warning. A unit referencing a video outside ``known_videos`` is an
    error.
    """
    counts = Counter((u.video_id, bool(u.positive)) for u in units)
    if known_videos is not None:
        known = set(known_videos)
        unknown = {u.video_id for u in units} - known
        if unknown:
            raise InvalidAnnotationError(f"units reference unknown videos: {sorted(unknown)}")
        empty = sorted(known - {u.video_id for u in units})
        if empty:
            warnings.warn(f"videos without usable units excluded: {empty}", stacklevel=2)

    raw = [1.0 / counts[(u.video_id, bool(u.positive))] for u in units]
    pos_sum = sum(w for w, u in zip(raw, units) if u.positive)
    neg_sum = sum(w for w, u in zip(raw, units) if not u.positive)
    # with one polarity absent there is nothing to balance against
    factor = pos_sum / neg_sum if pos_sum > 0 and neg_sum > 0 else 1.0
    return [
        SampleWeight((u.video_id, u.index), w if u.positive else w * factor, bool(u.positive))
        for w, u in zip(raw, units)
    ]


def make_epoch_schedule(pos_units: Sequence[Unit], neg_units: Sequence[Unit],
                        batch_size: int, seed: int) -> list[Batch]:
    """One epoch: every positive unit exactly once, each batch half positives
    and half negatives drawn uniformly with replacement. A trailing short
    positive half gets a matching number of negatives."""
    if batch_size < 2 or batch_size % 2:
        raise ConfigurationError(f"batch_size must be even and >= 2, got {batch_size}")
    if not pos_units or not neg_units:
        raise ConfigurationError("need at least one positive and one negative unit")
    rng = np.random.default_rng(seed)
    half = batch_size // 2
    order = rng.permutation(len(pos_units))
    batches = []
    for i in range(0, len(order), half):
        pos = [pos_units[j] for j in order[i:i + half]]
        neg_idx = rng.integers(0, len(neg_units), size=len(pos))
        batches.append(Batch(pos, [neg_units[j] for j in neg_idx]))
    return batches


def group_units_by_video(units: Iterable[Unit]) -> dict[str, list[Unit]]:
    out: dict[str, list[Unit]] = defaultdict(list)
    for u in units:
        out[u.video_id].append(u)
    return dict(out)
