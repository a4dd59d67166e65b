"""
Latent glomerulus-like patches and their analytic stain renderings.

A latent patch holds a base texture, a blob mask (the glomerulus) and two cue
maps: cue_a carries the class (sclerosis extent), cue_b is a nuisance texture
present in every class. Every stain is a fixed pixelwise function of the same
latent:

    tissue = TEXTURE_WEIGHT * structure + BLOB_WEIGHT * blob_mask
    linear = matrix @ [tissue, contrast_a * cue_a, contrast_b * cue_b] + bias
    image  = clip(linear, 0, 1) ** tone_gamma

Stain 0 renders cue_a at low contrast under a strong nuisance; stains 1-3 each
bring out the cue differently. The table below is versioned: any change to a
constant must bump STAIN_TABLE_VERSION.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from models.config import CLASS_NAMES
from models.errors import CorpusError

STAIN_TABLE_VERSION = "stains-v1"

TEXTURE_WEIGHT = 0.35
BLOB_WEIGHT = 0.45


@dataclass(frozen=True)
class StainProfile:
    name: str
    # columns respond to (tissue, cue_a, cue_b); negative entries darken
    matrix: Tuple[Tuple[float, float, float], ...]
    bias: Tuple[float, float, float]
    contrast_a: float
    contrast_b: float
    tone_gamma: float


def _columns(tissue, cue_a, cue_b):
    return tuple(zip(tissue, cue_a, cue_b))


STAIN_TABLE = {
    0: StainProfile(
        name="PAS",
        matrix=_columns((-0.15, -0.55, -0.25), (-0.30, -0.20, -0.05), (-0.10, -0.25, -0.05)),
        bias=(0.95, 0.85, 0.92),
        contrast_a=0.25,
        contrast_b=0.90,
        tone_gamma=1.0,
    ),
    1: StainProfile(
        name="H&E",
        matrix=_columns((-0.35, -0.55, -0.15), (-0.45, -0.10, -0.35), (-0.20, -0.30, -0.05)),
        bias=(0.93, 0.82, 0.90),
        contrast_a=1.00,
        contrast_b=0.60,
        tone_gamma=0.9,
    ),
    2: StainProfile(
        name="MASSON",
        matrix=_columns((-0.45, -0.35, -0.05), (-0.50, -0.35, -0.05), (-0.05, -0.05, -0.05)),
        bias=(0.90, 0.88, 0.95),
        contrast_a=1.00,
        contrast_b=0.20,
        tone_gamma=1.1,
    ),
    3: StainProfile(
        name="PASM",
        matrix=_columns((-0.40, -0.40, -0.40), (-0.35, -0.35, -0.30), (-0.25, -0.20, -0.10)),
        bias=(0.88, 0.86, 0.80),
        contrast_a=0.80,
        contrast_b=1.00,
        tone_gamma=1.2,
    ),
}

# Fraction of the blob covered by cue_a, per class
COVERAGE = {
    "noa": (0.0, 0.0),
    "gs": (0.85, 1.0),
    "ss": (0.25, 0.45),
}


@dataclass(frozen=True)
class LatentPatch:
    """Stain-independent content of one patch; maps are [1,H,W] float32"""
    structure: np.ndarray
    blob_mask: np.ndarray
    cue_a: np.ndarray
    cue_b: np.ndarray
    class_label: Optional[str]

    @property
    def size(self):
        return self.structure.shape[-1]

    def cue_coverage(self):
        blob = self.blob_mask[0] > 0
        if not blob.any():
            return 0.0
        return float(((self.cue_a[0] > 0) & blob).sum() / blob.sum())


def _smooth_noise(rng, size, sigma):
    field = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode="wrap")
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo + 1e-12)


def render_base(seed, class_label, image_size=64, cue_style="sector", center=None):
    """
    Renders the latent content of one patch, deterministic in seed

    Args:
        seed (int): Patch seed
        class_label (str): "noa", "gs" or "ss"
        image_size (int): Square side
        cue_style (str): "sector" (contiguous segment) or "speckle" (scattered spots)
        center (tuple, optional): Blob centre in pixels; may lie outside the patch

    Returns:
        LatentPatch
    """
    if class_label not in CLASS_NAMES:
        raise CorpusError(f"unknown class label {class_label!r}")
    if cue_style not in ("sector", "speckle"):
        raise CorpusError(f"unknown cue style {cue_style!r}")
    rng = np.random.default_rng(seed)
    size = image_size

    structure = _smooth_noise(rng, size, sigma=size / 32)

    if center is None:
        jitter = rng.uniform(-0.08, 0.08, size=2) * size
        cy, cx = size / 2 + jitter[0], size / 2 + jitter[1]
    else:
        cy, cx = center
    ry = rng.uniform(0.18, 0.34) * size
    rx = ry * rng.uniform(0.8, 1.25)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u, v = (yy - cy) / ry, (xx - cx) / rx
    blob = (u * u + v * v) <= 1.0

    lo, hi = COVERAGE[class_label]
    fraction = rng.uniform(lo, hi) if hi > 0 else 0.0
    intensity = rng.uniform(0.5, 1.0)
    texture_a = 0.7 + 0.3 * _smooth_noise(rng, size, sigma=1.5)
    if fraction <= 0:
        region = np.zeros((size, size), dtype=bool)
    elif cue_style == "sector":
        # angle in normalized coordinates, so the angular share equals the area share
        phase = rng.uniform(0, 2 * np.pi)
        theta = np.mod(np.arctan2(u, v) - phase, 2 * np.pi)
        region = theta < fraction * 2 * np.pi
    else:
        spots = _smooth_noise(rng, size, sigma=1.2)
        inside = spots[blob]
        threshold = np.quantile(inside, 1.0 - fraction) if inside.size else 1.0
        region = spots >= threshold
    cue_a = intensity * texture_a * (region & blob)

    nuisance = _smooth_noise(rng, size, sigma=1.0)
    cue_b = rng.uniform(0.4, 1.0) * ((nuisance > np.quantile(nuisance, 0.7)) & blob)

    def plane(arr):
        return arr.astype(np.float32)[None]

    return LatentPatch(
        structure=plane(structure),
        blob_mask=plane(blob),
        cue_a=plane(cue_a),
        cue_b=plane(cue_b),
        class_label=class_label,
    )


def apply_stain(latent: LatentPatch, stain_id) -> np.ndarray:
    """Renders a latent in one stain: [3,H,W] float32 in [0,1]"""
    profile = STAIN_TABLE.get(stain_id)
    if profile is None:
        raise CorpusError(f"unknown stain id {stain_id}; known: {sorted(STAIN_TABLE)}")
    tissue = TEXTURE_WEIGHT * latent.structure[0] + BLOB_WEIGHT * latent.blob_mask[0]
    channels = np.stack([
        tissue,
        profile.contrast_a * latent.cue_a[0],
        profile.contrast_b * latent.cue_b[0],
    ]).astype(np.float64)
    matrix = np.asarray(profile.matrix, dtype=np.float64)
    bias = np.asarray(profile.bias, dtype=np.float64)
    linear = np.einsum("ck,khw->chw", matrix, channels) + bias[:, None, None]
    return (np.clip(linear, 0.0, 1.0) ** profile.tone_gamma).astype(np.float32)
