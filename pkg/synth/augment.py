from dataclasses import dataclass

import numpy as np

# ITU-R BT.601 luma weights
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentDraw:
    flip_vertical: bool = False
    flip_horizontal: bool = False
    brightness: float = 1.0
    saturation: float = 1.0


def draw_augmentation(rng) -> AugmentDraw:
    """Draw order: vertical flip, horizontal flip, brightness, saturation"""
    flip_v = rng.random() < 0.5
    flip_h = rng.random() < 0.5
    brightness = rng.uniform(0.8, 1.2)
    saturation = rng.uniform(0.8, 1.2)
    return AugmentDraw(bool(flip_v), bool(flip_h), float(brightness), float(saturation))


def apply_augmentation(image, draw: AugmentDraw):
    """Flips, brightness scale, then saturation scale around per-pixel luminance; clamped to [0,1]"""
    out = np.asarray(image, dtype=np.float32)
    if draw.flip_vertical:
        out = out[:, ::-1, :]
    if draw.flip_horizontal:
        out = out[:, :, ::-1]
    out = out * np.float32(draw.brightness)
    luminance = np.tensordot(LUMA, out, axes=([0], [0]))[None]
    out = luminance + np.float32(draw.saturation) * (out - luminance)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def augment(image, rng):
    """Random flips and colour jitter for one [3,H,W] image in [0,1]"""
    return apply_augmentation(image, draw_augmentation(rng))
