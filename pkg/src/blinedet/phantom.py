"""Synthetic curvilinear lung-ultrasound videos with exact B-line origin ground truth.

The renderer is deliberately simple: a fan-shaped sector, soft tissue above a
bright pleural arc, aerated lung below it with either A-line reverberations
(negative videos) or radial B-lines that start on the pleura (positive
videos). B-lines sway laterally with respiration and every pixel carries
multiplicative log-normal speckle.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import H, W
from .data import FrameAnnotation, LusVideo
from .errors import ConfigurationError
from .store import LusDataset, VideoMeta, write_annotations_csv, write_frames

logger = logging.getLogger(__name__)

ANNOTATION_STRIDE = 4
ANNOTATOR_ID = "phantom"
BLINE_SIGMA_MM = 1.5
PLEURA_SIGMA_MM = 0.6
MIN_SEPARATION_MM = 6.0  # strictly above the 5 mm matching radius
A_LINE_INTENSITY = 0.25


@dataclass(frozen=True)
class PhantomSpec:
    n_blines: int = 0
    pleura_depth_mm: float = 25.0
    sector_angle_deg: float = 65.0
    px_spacing_mm: float = 0.4
    fps: float = 20.0
    duration_s: float = 2.0
    respiration_period_s: float = 4.0
    speckle_sigma: float = 0.25
    seed: int = 0
    sway_mm: float = 2.0
    bline_intensity: float = 0.7

    def __post_init__(self):
        if self.n_blines < 0:
            raise ConfigurationError("n_blines must be >= 0")
        checks = [
            ("pleura_depth_mm", self.pleura_depth_mm, 15.0, 40.0),
            ("sector_angle_deg", self.sector_angle_deg, 50.0, 80.0),
            ("px_spacing_mm", self.px_spacing_mm, 0.235, 0.8),
            ("fps", self.fps, 15.0, 46.0),
        ]
        for name, v, lo, hi in checks:
            if not lo <= v <= hi:
                raise ConfigurationError(f"{name}={v} outside [{lo}, {hi}]")
        if self.duration_s <= 0 or self.respiration_period_s <= 0:
            raise ConfigurationError("duration_s and respiration_period_s must be positive")
        if self.speckle_sigma < 0 or self.sway_mm < 0:
            raise ConfigurationError("speckle_sigma and sway_mm must be >= 0")
        if self.n_frames < 1:
            raise ConfigurationError("fps * duration_s must round to at least one frame")

    @property
    def n_frames(self) -> int:
        return int(round(self.fps * self.duration_s))


@dataclass(frozen=True)
class SectorGeometry:
    """Fan geometry in pixel units; the apex sits above the top image row."""

    apex_row: float
    apex_col: float
    r_min: float
    r_max: float
    half_angle: float  # radians
    pleura_radius: float

    @classmethod
    def from_spec(cls, spec: PhantomSpec, h: int = H, w: int = W) -> "SectorGeometry":
        half = np.deg2rad(spec.sector_angle_deg) / 2.0
        # apex offset chosen so the bottom of the fan still fits the image width
        r0 = float(np.clip(0.95 * (w / 2.0) / np.sin(half) - (h - 1), 20.0, 150.0))
        return cls(-r0, (w - 1) / 2.0, r0, r0 + h - 1, half, r0 + spec.pleura_depth_mm / spec.px_spacing_mm)

    def polar(self, h: int = H, w: int = W) -> tuple[np.ndarray, np.ndarray]:
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        dy, dx = rr - self.apex_row, cc - self.apex_col
        return np.hypot(dy, dx), np.arctan2(dx, dy)

    def point(self, radius: float, angle: float) -> tuple[float, float]:
        return (self.apex_row + radius * np.cos(angle), self.apex_col + radius * np.sin(angle))


def _place_angles(n: int, lo: float, hi: float, radius_px: float, spacing: float,
                  rng: np.random.Generator) -> np.ndarray:
    def chord_mm(a, b):
        return 2.0 * radius_px * np.sin(abs(a - b) / 2.0) * spacing

    for _ in range(2000):
        a = np.sort(rng.uniform(lo, hi, size=n))
        if all(chord_mm(a[i], a[i + 1]) > MIN_SEPARATION_MM for i in range(n - 1)):
            return a
    raise ConfigurationError(
        f"cannot place {n} B-lines {MIN_SEPARATION_MM} mm apart on a "
        f"{(hi - lo) * radius_px * spacing:.1f} mm pleural arc"
    )


def _origin_tracks(spec: PhantomSpec, geo: SectorGeometry, rng: np.random.Generator) -> np.ndarray:
    """Per-frame B-line angles, shape ``(T, n_blines)``."""
    T = spec.n_frames
    if spec.n_blines == 0:
        return np.zeros((T, 0))
    sigma_px = BLINE_SIGMA_MM / spec.px_spacing_mm
    edge = 3.0 * sigma_px / geo.pleura_radius
    sway = spec.sway_mm / (geo.pleura_radius * spec.px_spacing_mm)
    lo, hi = -geo.half_angle + edge + sway, geo.half_angle - edge - sway
    base = _place_angles(spec.n_blines, lo, hi, geo.pleura_radius, spec.px_spacing_mm, rng)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(T) / spec.fps
    wave = np.sin(2 * np.pi * t / spec.respiration_period_s + phase)

    amp = sway
    for _ in range(12):
        tracks = base[None, :] + amp * wave[:, None]
        rows = geo.apex_row + geo.pleura_radius * np.cos(tracks)
        cols = geo.apex_col + geo.pleura_radius * np.sin(tracks)
        ok = (np.all(np.abs(tracks) <= geo.half_angle - edge)
              and rows.min() >= 0 and rows.max() <= H - 1 and cols.min() >= 0 and cols.max() <= W - 1)
        if ok:
            return tracks
        amp *= 0.5
    return np.repeat(base[None, :], T, axis=0)


def render_frame(spec: PhantomSpec, geo: SectorGeometry, r: np.ndarray, theta: np.ndarray,
                 angles: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    s = spec.px_spacing_mm
    depth_px = spec.pleura_depth_mm / s
    inside = (np.abs(theta) <= geo.half_angle) & (r >= geo.r_min) & (r <= geo.r_max)

    rel = r - geo.pleura_radius
    tissue = np.where(rel < 0, 0.3, 0.05 + 0.1 * np.exp(-np.maximum(rel, 0) * s / 30.0))
    pleura_sigma = max(PLEURA_SIGMA_MM / s, 0.8)
    img = tissue + 0.65 * np.exp(-rel ** 2 / (2 * pleura_sigma ** 2))

    if len(angles) == 0:
        for k in range(2, 12):
            rk = geo.r_min + k * depth_px
            if rk > geo.r_max + 3 * pleura_sigma:
                break
            # reverberations: fainter and broader than the pleura itself
            img += A_LINE_INTENSITY * 0.7 ** (k - 2) * np.exp(-(r - rk) ** 2 / (2 * (2.0 * pleura_sigma) ** 2))
    else:
        sigma_b = BLINE_SIGMA_MM / s
        onset = 1.0 / (1.0 + np.exp(-np.clip(rel / 0.5, -50, 50)))
        for a in angles:
            lateral = r * np.sin(theta - a)
            img += spec.bline_intensity * onset * np.exp(-lateral ** 2 / (2 * sigma_b ** 2))

    if spec.speckle_sigma > 0:
        sg = spec.speckle_sigma
        img = img * np.exp(sg * rng.standard_normal(img.shape) - 0.5 * sg ** 2)
    img = np.clip(img, 0.0, 1.0)
    img[~inside] = 0.0
    return img.astype(np.float32)


def generate_phantom_video(spec: PhantomSpec, video_id: str = "phantom",
                           patient_id: str = "phantom") -> tuple[LusVideo, list[FrameAnnotation]]:
    rng = np.random.default_rng(spec.seed)
    geo = SectorGeometry.from_spec(spec)
    r, theta = geo.polar()
    tracks = _origin_tracks(spec, geo, rng)
    frames = np.stack([render_frame(spec, geo, r, theta, tracks[t], rng) for t in range(spec.n_frames)])
    video = LusVideo(video_id, patient_id, frames, spec.px_spacing_mm, spec.fps, int(spec.n_blines > 0))

    annotations = []
    if spec.n_blines > 0:
        for t in range(0, spec.n_frames, ANNOTATION_STRIDE):
            origins = [tuple(float(v) for v in geo.point(geo.pleura_radius, a)) for a in tracks[t]]
            annotations.append(FrameAnnotation(video_id, t, ANNOTATOR_ID, origins))
    return video, annotations


def _dataset_specs(n_patients: int, videos_per_patient: int, positive_fraction: float,
                   seed: int, n_frames: int | None, duration_s: float) -> list[tuple[str, str, PhantomSpec]]:
    master = np.random.default_rng(seed)
    n_videos = n_patients * videos_per_patient
    n_pos = int(np.floor(positive_fraction * n_videos + 0.5))
    positive = np.zeros(n_videos, dtype=bool)
    positive[master.permutation(n_videos)[:n_pos]] = True
    child_seeds = np.random.SeedSequence(seed).spawn(n_videos)

    out = []
    for p in range(n_patients):
        # one exam: acquisition settings shared by all videos of the patient
        spacing = float(master.uniform(0.235, 0.8))
        fps = float(master.uniform(15.0, 46.0))
        sector = float(master.uniform(50.0, 80.0))
        for v in range(videos_per_patient):
            i = p * videos_per_patient + v
            spec = PhantomSpec(
                n_blines=int(master.integers(1, 5)) if positive[i] else 0,
                pleura_depth_mm=float(master.uniform(15.0, 40.0)),
                sector_angle_deg=sector,
                px_spacing_mm=spacing,
                fps=fps,
                duration_s=(n_frames / fps) if n_frames else duration_s,
                respiration_period_s=float(master.uniform(3.0, 5.0)),
                speckle_sigma=float(master.uniform(0.15, 0.35)),
                seed=int(child_seeds[i].generate_state(1)[0]),
                sway_mm=float(master.uniform(1.0, 3.0)),
            )
            out.append((f"p{p:03d}_v{v:02d}", f"p{p:03d}", spec))
    return out


def generate_dataset(out_dir: str | Path, n_patients: int, videos_per_patient: int,
                     positive_fraction: float, seed: int, n_frames: int | None = None,
                     duration_s: float = 6.0, overwrite: bool = False) -> LusDataset:
    """Write a phantom dataset (videos.jsonl, frames/, annotations.csv and a
    phantom.json sidecar with every spec) and return it opened from disk."""
    if n_patients < 6:
        raise ConfigurationError(f"need at least 6 patients, got {n_patients}")
    if not 0.0 <= positive_fraction <= 1.0:
        raise ConfigurationError(f"positive_fraction must lie in [0, 1], got {positive_fraction}")
    if videos_per_patient < 1:
        raise ConfigurationError("videos_per_patient must be >= 1")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise ConfigurationError(f"{out} exists and is not empty (pass overwrite to replace)")
        for name in ("frames",):
            shutil.rmtree(out / name, ignore_errors=True)
        for name in ("videos.jsonl", "annotations.csv", "phantom.json", "split.json"):
            (out / name).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)

    specs = _dataset_specs(n_patients, videos_per_patient, positive_fraction, seed, n_frames, duration_s)
    all_ann: list[FrameAnnotation] = []
    with open(out / "videos.jsonl", "w") as fh:
        for video_id, patient_id, spec in specs:
            video, ann = generate_phantom_video(spec, video_id, patient_id)
            write_frames(out, video)
            meta = VideoMeta(video_id, patient_id, video.n_frames, spec.fps, spec.px_spacing_mm, video.label)
            fh.write(json.dumps(asdict(meta)) + "\n")
            all_ann.extend(ann)
    write_annotations_csv(out / "annotations.csv", all_ann)
    sidecar = {"seed": seed, "videos": [{"video_id": v, "patient_id": p, **asdict(s)} for v, p, s in specs]}
    (out / "phantom.json").write_text(json.dumps(sidecar, indent=1) + "\n")
    logger.info("wrote %d phantom videos to %s", len(specs), out)
    return LusDataset.open(out)
