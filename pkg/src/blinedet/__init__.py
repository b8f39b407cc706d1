"""B-line detection and single-point localization for lung-ultrasound videos."""

__version__ = "0.1.0"

H, W = 256, 384
CLIP_LENGTH = 16
