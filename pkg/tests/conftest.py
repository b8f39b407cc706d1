import numpy as np
import pytest

from blinedet.data import FrameAnnotation, LusVideo, build_patient_split
from blinedet.store import LusDataset


def make_tiny_dataset(n_patients=10, videos_per_patient=2, T=8, h=32, w=48, seed=0):
    """Small in-memory dataset: positives carry a bright vertical bar whose
    top is the annotated origin."""
    rng = np.random.default_rng(seed)
    videos, anns = [], []
    for p in range(n_patients):
        for v in range(videos_per_patient):
            vid = f"p{p:02d}_v{v}"
            label = (p + v) % 2
            frames = (rng.random((T, h, w)) * 0.2).astype(np.float32)
            if label:
                col = int(rng.integers(8, w - 8))
                frames[:, h // 4:, col - 1:col + 2] = 0.9
                for t in range(0, T, 4):
                    anns.append(FrameAnnotation(vid, t, "a", [(float(h // 4), float(col))]))
            videos.append(LusVideo(vid, f"p{p:02d}", frames, 0.5, 20.0, label))
    ds = LusDataset.from_memory(videos, anns)
    split = build_patient_split(ds.patients, seed)
    return ds, split


@pytest.fixture
def tiny():
    return make_tiny_dataset()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
