"""Thin Pillow-backed helpers for image files and polygon masks."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw


def load_rgba(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG file as an (H, W, 4) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGBA"))


def save_png(array: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def rasterize_polygon(
    size: tuple[int, int], polygon: Sequence[tuple[float, float]]
) -> np.ndarray:
    """Binary (H, W) uint8 mask of a polygon interior; ``size`` is (w, h)."""
    mask = Image.new("L", (int(size[0]), int(size[1])), 0)
    ImageDraw.Draw(mask).polygon([(float(x), float(y)) for x, y in polygon], fill=255)
    return (np.asarray(mask) > 0).astype(np.uint8)
