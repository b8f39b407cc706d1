"""On-the-fly augmentation for frames, clips and their label maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentationPolicy:
    translate_frac: float = 0.10
    p_translate: float = 0.5
    rotate_deg: float = 15.0
    p_rotate: float = 0.5
    scale_range: tuple[float, float] = (0.85, 1.15)
    p_scale: float = 0.5
    p_flip: float = 0.5
    occlusion_max_area: float = 0.20
    p_occlusion: float = 0.3
    brightness: float = 0.20
    contrast: float = 0.20
    p_intensity: float = 0.5
    noise_sigma_max: float = 0.03
    p_noise: float = 0.3
    blur_sigma_max: float = 1.5
    p_blur: float = 0.3

    @classmethod
    def off(cls) -> "AugmentationPolicy":
        return cls(p_translate=0, p_rotate=0, p_scale=0, p_flip=0, p_occlusion=0,
                   p_intensity=0, p_noise=0, p_blur=0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


def random_affine(policy: AugmentationPolicy, rng: np.random.Generator,
                  shape: tuple[int, int]) -> np.ndarray | None:
    """Sample a 3x3 homogeneous (row, col) map from input to output pixel
    coordinates, or ``None`` when no geometric transform fired."""
    h, w = shape
    fired = False
    flip = rng.random() < policy.p_flip
    angle, scale = 0.0, 1.0
    dr = dc = 0.0
    if rng.random() < policy.p_rotate:
        angle = np.deg2rad(rng.uniform(-policy.rotate_deg, policy.rotate_deg))
        fired = True
    if rng.random() < policy.p_scale:
        scale = rng.uniform(*policy.scale_range)
        fired = True
    if rng.random() < policy.p_translate:
        dr = rng.uniform(-policy.translate_frac, policy.translate_frac) * h
        dc = rng.uniform(-policy.translate_frac, policy.translate_frac) * w
        fired = True
    if not (fired or flip):
        return None

    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    center = np.array([[1, 0, -cr], [0, 1, -cc], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cr + dr], [0, 1, cc + dc], [0, 0, 1]], dtype=np.float64)
    f = np.diag([1.0, -1.0 if flip else 1.0, 1.0])
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    sc = np.diag([scale, scale, 1.0])
    return back @ rot @ sc @ f @ center


def apply_affine(img: np.ndarray, forward: np.ndarray, order: int) -> np.ndarray:
    inv = np.linalg.inv(forward)
    return ndimage.affine_transform(img, inv[:2, :2], offset=inv[:2, 2], order=order,
                                    mode="constant", cval=0.0)


def augment(image: np.ndarray, label: np.ndarray | None, policy: AugmentationPolicy,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    """Augment a frame ``(H, W)`` or clip ``(L, H, W)`` and optional label map.

    Geometric transforms are shared by every frame and the label map
    (bilinear for images, nearest for labels); intensities are re-clamped to
    [0, 1]. Each transform fires independently with its own probability.
    """
    image = np.asarray(image, dtype=np.float32)
    clip = image.ndim == 3
    frames = image if clip else image[None]
    shape = frames.shape[1:]

    m = random_affine(policy, rng, shape)
    if m is not None:
        frames = np.stack([apply_affine(f, m, order=1) for f in frames])
        if label is not None:
            label = apply_affine(label, m, order=0).astype(label.dtype)
    else:
        frames = frames.copy()

    h, w = shape
    if rng.random() < policy.p_occlusion:
        area = rng.uniform(0.02, policy.occlusion_max_area) * h * w
        aspect = rng.uniform(0.5, 2.0)
        oh = int(min(h, max(1, round(np.sqrt(area / aspect)))))
        ow = int(min(w, max(1, round(np.sqrt(area * aspect)))))
        r0, c0 = rng.integers(0, h - oh + 1), rng.integers(0, w - ow + 1)
        frames[:, r0:r0 + oh, c0:c0 + ow] = 0.0
        if label is not None:
            # a hidden origin is no longer a target
            label = label.copy()
            label[r0:r0 + oh, c0:c0 + ow] = 0
    if rng.random() < policy.p_intensity:
        gain = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
        shift = rng.uniform(-policy.brightness, policy.brightness)
        mean = frames.mean()
        frames = (frames - mean) * gain + mean + shift
    if rng.random() < policy.p_noise:
        sigma = rng.uniform(0.0, policy.noise_sigma_max)
        frames = frames + rng.normal(0.0, sigma, frames.shape).astype(np.float32)
    if rng.random() < policy.p_blur:
        sigma = rng.uniform(0.0, policy.blur_sigma_max)
        frames = ndimage.gaussian_filter(frames, sigma=(0, sigma, sigma))

    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return (frames if clip else frames[0]), label
