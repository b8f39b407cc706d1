import json

import numpy as np
import pytest

from blinedet.errors import ConfigurationError
from blinedet.phantom import PhantomSpec, SectorGeometry, generate_dataset, generate_phantom_video
from blinedet.store import LusDataset


def test_negative_video():
    video, ann = generate_phantom_video(PhantomSpec(n_blines=0, duration_s=0.5))
    assert video.label == 0 and ann == []


def test_annotation_cadence():
    spec = PhantomSpec(n_blines=2, fps=20, duration_s=3.2, seed=3)
    video, ann = generate_phantom_video(spec)
    assert video.n_frames == 64 and video.label == 1
    assert [a.frame_index for a in ann] == list(range(0, 61, 4))
    assert all(len(a.origins) == 2 for a in ann)


def test_deterministic():
    spec = PhantomSpec(n_blines=3, duration_s=0.4, seed=9)
    a, _ = generate_phantom_video(spec)
    b, _ = generate_phantom_video(spec)
    assert np.array_equal(a.frames, b.frames)


def test_spec_ranges():
    with pytest.raises(ConfigurationError):
        PhantomSpec(px_spacing_mm=0.9)
    with pytest.raises(ConfigurationError):
        PhantomSpec(fps=50)


@pytest.mark.parametrize("seed", range(4))
def test_origins_on_pleura_and_separated(seed):
    spec = PhantomSpec(n_blines=4, px_spacing_mm=0.3 + 0.1 * seed, duration_s=1.0, seed=seed)
    geo = SectorGeometry.from_spec(spec)
    _, ann = generate_phantom_video(spec)
    for a in ann:
        pts = np.array(a.origins)
        radius = np.hypot(pts[:, 0] - geo.apex_row, pts[:, 1] - geo.apex_col)
        assert np.all(np.abs(radius - geo.pleura_radius) <= 1.0)
        assert np.all((pts[:, 0] >= 0) & (pts[:, 0] <= 255) & (pts[:, 1] >= 0) & (pts[:, 1] <= 383))
        d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1]) * spec.px_spacing_mm
        assert np.all(d[np.triu_indices(len(pts), 1)] > 5.0)


def test_bline_contrast_below_origin():
    spec = PhantomSpec(n_blines=2, duration_s=0.2, speckle_sigma=0.0, seed=1)
    geo = SectorGeometry.from_spec(spec)
    video, ann = generate_phantom_video(spec)
    r, theta = geo.polar()
    frame = video.frames[0]
    for (row, col) in ann[0].origins:
        angle = np.arctan2(col - geo.apex_col, row - geo.apex_row)
        for depth_mm in (5.0, 10.0, 20.0):
            rad = geo.pleura_radius + depth_mm / spec.px_spacing_mm
            pr, pc = geo.point(rad, angle)
            if not (0 <= pr < 255):
                continue
            ring = (np.abs(r - rad) < 1.0) & (np.abs(theta) < geo.half_angle) & (frame > 0)
            background = np.median(frame[ring])
            assert frame[int(round(pr)), int(round(pc))] > background + 0.3


def test_generate_dataset(tmp_path):
    ds = generate_dataset(tmp_path / "d", 6, 2, 0.5, seed=4, n_frames=8)
    assert len(ds.video_ids) == 12
    assert sum(ds.meta[v].label for v in ds.video_ids) == 6
    for p in ds.patients:
        vids = ds.videos_of([p])
        assert len({ds.meta[v].px_spacing_mm for v in vids}) == 1
        assert len({ds.meta[v].fps for v in vids}) == 1
    for v in ds.video_ids:
        if ds.meta[v].label:
            assert sorted(ds.annotations(v)) == [0, 4]
    again = LusDataset.open(tmp_path / "d")
    assert np.array_equal(again.frames(ds.video_ids[0]), ds.frames(ds.video_ids[0]))
    side = json.loads((tmp_path / "d" / "phantom.json").read_text())
    assert len(side["videos"]) == 12
    with pytest.raises(ConfigurationError):
        generate_dataset(tmp_path / "d", 6, 2, 0.5, seed=4, n_frames=8)


def test_dataset_all_negative(tmp_path):
    generate_dataset(tmp_path / "n", 6, 1, 0.0, seed=0, n_frames=4)
    lines = (tmp_path / "n" / "annotations.csv").read_text().splitlines()
    assert lines == ["video_id,frame_index,annotator_id,row_px,col_px"]
