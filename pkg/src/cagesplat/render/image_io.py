"""PNG output for rendered frames."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .raster import RenderedImage


def to_uint8(img: RenderedImage) -> np.ndarray:
    return np.round(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(img: RenderedImage, path) -> None:
    """8-bit RGB PNG, values clamped to [0,1]; identical input gives
    identical bytes."""
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def encode_png(img: RenderedImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def read_image(path) -> np.ndarray:
    """[H,W,3] f32 in [0,1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
