import os

import numpy as np
from PIL import Image

from models.errors import CorpusError


def to_uint8(image):
    """[3,H,W] floats in [0,1] -> [3,H,W] uint8, round half to even"""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image):
    """Saves a [3,H,W] image (uint8, or floats in [0,1]) as 8-bit RGB PNG"""
    pixels = image if image.dtype == np.uint8 else to_uint8(image)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise CorpusError(f"expected a [3,H,W] image for {path}, got {pixels.shape}")
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).save(path, format="PNG")
    except OSError as error:
        raise CorpusError(f"cannot write image {path}: {error}") from error


def read_png(path):
    """Loads an RGB PNG as float32 [3,H,W] in [0,1]"""
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float32)
    except OSError as error:
        raise CorpusError(f"cannot read image {path}: {error}") from error
    return np.ascontiguousarray(pixels.transpose(2, 0, 1) / 255.0, dtype=np.float32)
