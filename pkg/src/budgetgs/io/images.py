"""8-bit PNG images and single-channel ROI masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path) -> np.ndarray:
    """RGB image as float64 ``(H, W, 3)`` in [0, 1]; alpha is dropped."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path, image) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_mask(path, threshold: float = 0.5) -> np.ndarray:
    """Binary ``(H, W)`` float mask: 1 where the gray level exceeds ``threshold``."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return (gray > threshold).astype(np.float64)


def save_mask(path, mask) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)
