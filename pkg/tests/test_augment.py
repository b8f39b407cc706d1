import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from blinedet.augment import AugmentationPolicy, apply_affine, augment, random_affine
from blinedet.labelmap import render_label_map


def _sample(seed=0):
    img = np.random.default_rng(seed).random((64, 96)).astype(np.float32)
    lab = render_label_map([(30, 40)], 0.5, 64, 96).grid
    return img, lab


def test_off_is_identity():
    img, lab = _sample()
    out, lab2 = augment(img, lab, AugmentationPolicy.off(), np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)
    np.testing.assert_array_equal(lab2, lab)


def test_flip_maps_columns():
    img, lab = _sample()
    pol = AugmentationPolicy(**{**AugmentationPolicy.off().__dict__, "p_flip": 1.0})
    out, lab2 = augment(img, lab, pol, np.random.default_rng(0))
    np.testing.assert_allclose(out, img[:, ::-1], atol=1e-5)
    cols = np.nonzero(lab.any(axis=0))[0]
    np.testing.assert_array_equal(np.nonzero(lab2.any(axis=0))[0], sorted(95 - cols))


def test_deterministic():
    img, lab = _sample()
    a = augment(img, lab, AugmentationPolicy(), np.random.default_rng(5))
    b = augment(img, lab, AugmentationPolicy(), np.random.default_rng(5))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_outputs_valid(seed):
    img, lab = _sample(seed % 7)
    out, lab2 = augment(img, lab, AugmentationPolicy(), np.random.default_rng(seed))
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert set(np.unique(lab2)) <= {0, 1}


def test_clip_frames_share_geometry():
    frame = np.zeros((64, 96), np.float32)
    frame[20:30, 40:50] = 1.0
    clip = np.stack([frame] * 4)
    pol = AugmentationPolicy(**{**AugmentationPolicy.off().__dict__, "p_rotate": 1.0, "p_translate": 1.0})
    out, _ = augment(clip, None, pol, np.random.default_rng(2))
    for f in out[1:]:
        np.testing.assert_array_equal(f, out[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_label_centroid_follows_image_transform(seed):
    rng = np.random.default_rng(seed)
    m = random_affine(AugmentationPolicy(p_rotate=1, p_scale=1, p_translate=1), rng, (128, 192))
    origin = np.array([64.0, 96.0])
    lab = render_label_map([tuple(origin)], 0.3, 128, 192).grid
    moved = apply_affine(lab, m, order=0)
    expected = (m @ np.array([*origin, 1.0]))[:2]
    got = np.array(ndimage.center_of_mass(moved))
    assert np.hypot(*(got - expected)) <= 1.0


def test_occlusion_clears_hidden_targets():
    img = np.ones((40, 40), np.float32) * 0.5
    lab = np.ones((40, 40), np.uint8)
    pol = AugmentationPolicy(**{**AugmentationPolicy.off().__dict__, "p_occlusion": 1.0})
    out, lab2 = augment(img, lab, pol, np.random.default_rng(0))
    assert np.array_equal(out == 0, lab2 == 0)
    assert (lab2 == 0).sum() <= 0.2 * 1600 + 1
