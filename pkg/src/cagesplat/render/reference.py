"""Brute-force reference renderer: global depth sort, every fragment
evaluated at every pixel. Oracle for the tile renderer, not a fast path.
"""

from __future__ import annotations

import numpy as np

from .camera import Camera
from .project import FragmentBatch
from .raster import STOP_TRANSMITTANCE, RenderedImage, _depth_order


def render_reference(frags: FragmentBatch, cam: Camera) -> RenderedImage:
    width, height = cam.width, cam.height
    img = np.zeros((height, width, 3), dtype=np.float64)
    trans = np.ones((height, width), dtype=np.float64)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    inv = frags.inverse_cov().astype(np.float64)
    for f in _depth_order(frags):
        mx, my = frags.mean[f]
        ia, ib, ic = inv[f]
        dx = xs[None, :] - mx
        dy = ys[:, None] - my
        q = 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
        live = (q <= 4.5) & (trans >= STOP_TRANSMITTANCE)
        alpha = np.where(live, frags.opacity[f] * np.exp(-np.minimum(q, 60.0)), 0.0)
        img += (trans * alpha)[:, :, None] * frags.color[f]
        trans *= np.where(live, 1.0 - alpha, 1.0)
    if cam.exposure != 1.0:
        img = img * cam.exposure
    return RenderedImage(pixels=np.clip(img, 0.0, 1.0).astype(np.float32),
                         alpha=(1.0 - trans).astype(np.float32))
