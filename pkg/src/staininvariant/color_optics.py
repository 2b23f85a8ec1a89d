"""RGB <-> optical density conversion and tissue masking.

Images are plain numpy arrays:

* RGB images are ``uint8`` arrays of shape ``(height, width, 3)``.
* OD images are ``float64`` arrays of the same shape, base-10 Beer-Lambert
  absorbance per channel.
* Tissue masks are ``bool`` arrays of shape ``(height, width)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

I0_DEFAULT = 255.0
OD_MAX = float(np.log10(255.0))
TISSUE_OD_THRESHOLD = 0.15


def as_rgb(img) -> np.ndarray:
    """Validate and return ``img`` as a ``(h, w, 3)`` uint8 array."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) RGB array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.integer) and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("RGB channel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def rgb_to_od(img: np.ndarray, i0: float = I0_DEFAULT) -> np.ndarray:
    """Convert RGB intensities to optical density.

    Zero intensities are clamped to 1 so the result stays finite; for 8-bit
    input and ``i0 = 255`` every value lies in ``[0, log10(255)]``.
    """
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    intensity = np.maximum(np.asarray(img, dtype=np.float64), 1.0)
    return -np.log10(intensity / i0)


def od_to_rgb(od: np.ndarray, i0: float = I0_DEFAULT) -> np.ndarray:
    """Convert optical density back to 8-bit RGB (round half up, then clamp)."""
    od = np.asarray(od, dtype=np.float64)
    intensity = i0 * np.power(10.0, -od)
    return np.clip(np.floor(intensity + 0.5), 0, 255).astype(np.uint8)


def tissue_mask(od: np.ndarray, od_threshold: float = TISSUE_OD_THRESHOLD) -> np.ndarray:
    """Pixels whose largest OD channel exceeds ``od_threshold``."""
    if od_threshold < 0:
        raise ValueError("od_threshold must be non-negative")
    return np.asarray(od).max(axis=-1) > od_threshold


def load_png(path: str | Path) -> np.ndarray:
    """Read an image file as RGB uint8; an alpha channel is dropped."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_png(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(as_rgb(img)).save(path, format="PNG")
