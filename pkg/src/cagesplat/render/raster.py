"""Tile-binned front-to-back compositing of projected Gaussian fragments.

Fragments are depth-sorted globally (ties broken by ascending Gaussian index
so the image is independent of input order), binned to every tile their
3-sigma box overlaps, and composited per pixel with transmittance early-exit.
The composite inner loop runs in the compiled kernel when available and in a
vectorized numpy fallback otherwise; both produce identical output.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .project import FragmentBatch, project

try:                                       # compiled hot path, optional
    from . import _raster_cy
except ImportError:                        # pragma: no cover - build fallback
    _raster_cy = None

STOP_TRANSMITTANCE = 1e-3
DEFAULT_TILE_PX = 16


def available_backends() -> list[str]:
    out = ["python"]
    if _raster_cy is not None:
        out.insert(0, "cython")
    return out


def active_backend() -> str:
    if os.environ.get("CAGESPLAT_PURE") == "1" or _raster_cy is None:
        return "python"
    return "cython"


@dataclass
class RenderedImage:
    pixels: np.ndarray                 # [H,W,3] f32 in [0,1]
    alpha: np.ndarray | None = None    # [H,W] f32

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class RenderStats:
    project_ms: float = 0.0
    bin_ms: float = 0.0
    sort_ms: float = 0.0
    composite_ms: float = 0.0
    total_ms: float = 0.0
    n_fragments: int = 0
    n_pairs: int = 0
    backend: str = ""

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _depth_order(frags: FragmentBatch, backend: str | None = None) -> np.ndarray:
    # fragments arrive in ascending Gaussian index order, so a stable sort on
    # depth alone breaks ties by index deterministically; depths are positive
    # so their bit patterns sort like the doubles
    if backend == "cython" and _raster_cy is not None and len(frags) > 1:
        return _raster_cy.radix_order(
            np.ascontiguousarray(frags.depth).view(np.uint64))
    return np.argsort(frags.depth, kind="stable").astype(np.int64)


def _tile_ranges(frags: FragmentBatch, width, height, tile_px):
    tiles_x = (width + tile_px - 1) // tile_px
    tiles_y = (height + tile_px - 1) // tile_px
    u, v = frags.mean[:, 0], frags.mean[:, 1]
    rx, ry = frags.radius_x, frags.radius_y
    tx0 = np.clip(np.floor((u - rx) / tile_px), 0, tiles_x - 1).astype(np.int32)
    tx1 = np.clip(np.floor((u + rx) / tile_px), 0, tiles_x - 1).astype(np.int32)
    ty0 = np.clip(np.floor((v - ry) / tile_px), 0, tiles_y - 1).astype(np.int32)
    ty1 = np.clip(np.floor((v + ry) / tile_px), 0, tiles_y - 1).astype(np.int32)
    return tiles_x, tiles_y, tx0, tx1, ty0, ty1


def _pairs_numpy(order, tx0, tx1, ty0, ty1, tiles_x, tiles_y):
    """(fragment, tile) pairs grouped by tile, depth order preserved."""
    w = (tx1 - tx0 + 1).astype(np.int64)[order]
    h = (ty1 - ty0 + 1).astype(np.int64)[order]
    cnt = w * h
    total = int(cnt.sum())
    if total == 0:
        return (np.zeros(0, dtype=np.int32),
                np.zeros(tiles_x * tiles_y + 1, dtype=np.int64))
    start = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    pos = np.arange(total, dtype=np.int64) - np.repeat(start, cnt)
    wrep = np.repeat(w, cnt)
    fx = pos % wrep
    fy = pos // wrep
    frag_rep = np.repeat(order.astype(np.int32), cnt)
    tile_id = (np.repeat(ty0[order].astype(np.int64), cnt) + fy) * tiles_x + \
        np.repeat(tx0[order].astype(np.int64), cnt) + fx
    reorder = np.argsort(tile_id, kind="stable")
    pair_frag = frag_rep[reorder]
    counts = np.bincount(tile_id, minlength=tiles_x * tiles_y)
    tile_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return pair_frag, tile_start


def _composite_numpy(pair_frag, tile_start, frags: FragmentBatch,
                     width, height, tile_px, tiles_x):
    img = np.zeros((height, width, 3), dtype=np.float64)
    trans = np.ones((height, width), dtype=np.float64)
    inv = frags.inverse_cov().astype(np.float64)
    mean, op, color = frags.mean, frags.opacity, frags.color
    rad_x, rad_y = frags.radius_x, frags.radius_y
    n_tiles = tile_start.shape[0] - 1
    for t in range(n_tiles):
        lo, hi = tile_start[t], tile_start[t + 1]
        if hi <= lo:
            continue
        x0t = (t % tiles_x) * tile_px
        y0t = (t // tiles_x) * tile_px
        x1t = min(x0t + tile_px, width)
        y1t = min(y0t + tile_px, height)
        T = trans[y0t:y1t, x0t:x1t]
        C = img[y0t:y1t, x0t:x1t]
        ys = np.arange(y0t, y1t) + 0.5
        xs = np.arange(x0t, x1t) + 0.5
        for f in pair_frag[lo:hi]:
            if (T < STOP_TRANSMITTANCE).all():
                break
            mx, my = mean[f]
            xa = max(int(np.floor(mx - rad_x[f])), x0t)
            xb = min(int(np.floor(mx + rad_x[f])) + 1, x1t)
            ya = max(int(np.floor(my - rad_y[f])), y0t)
            yb = min(int(np.floor(my + rad_y[f])) + 1, y1t)
            if xa >= xb or ya >= yb:
                continue
            dx = xs[xa - x0t:xb - x0t] - mx
            dy = ys[ya - y0t:yb - y0t] - my
            ia, ib, ic = inv[f]
            q = 0.5 * (ia * dx[None, :] ** 2 +
                       2.0 * ib * dy[:, None] * dx[None, :] +
                       ic * dy[:, None] ** 2)
            Ts = T[ya - y0t:yb - y0t, xa - x0t:xb - x0t]
            live = (q <= 4.5) & (Ts >= STOP_TRANSMITTANCE)
            if not live.any():
                continue
            alpha = np.where(live, op[f] * np.exp(-np.minimum(q, 60.0)), 0.0)
            C[ya - y0t:yb - y0t, xa - x0t:xb - x0t] += \
                (Ts * alpha)[:, :, None] * color[f]
            Ts *= np.where(live, 1.0 - alpha, 1.0)
    return img, trans


def rasterize(frags: FragmentBatch, cam: Camera, tile_px: int = DEFAULT_TILE_PX,
              backend: str | None = None,
              stats: RenderStats | None = None) -> RenderedImage:
    """Composite fragments over a black background; see module docstring."""
    if tile_px < 8:
        raise ValueError("tile_px must be >= 8")
    backend = backend or active_backend()
    width, height = cam.width, cam.height
    if stats is None:
        stats = RenderStats()
    stats.backend = backend
    stats.n_fragments = len(frags)

    # the compiled kernel tracks live pixels in one 64-bit mask per tile row
    use_cy = (backend == "cython" and _raster_cy is not None
              and len(frags) > 0 and tile_px <= 64)
    t0 = time.perf_counter()
    order = _depth_order(frags, backend="cython" if use_cy else "python")
    t1 = time.perf_counter()
    stats.sort_ms = (t1 - t0) * 1e3

    tiles_x, tiles_y, tx0, tx1, ty0, ty1 = _tile_ranges(frags, width, height, tile_px)
    if use_cy:
        pair_frag, tile_start = _raster_cy.bucket_pairs(
            np.ascontiguousarray(order, dtype=np.int32), tx0, tx1, ty0, ty1,
            tiles_x, tiles_y)
    else:
        pair_frag, tile_start = _pairs_numpy(order, tx0, tx1, ty0, ty1,
                                             tiles_x, tiles_y)
    t2 = time.perf_counter()
    stats.bin_ms = (t2 - t1) * 1e3
    stats.n_pairs = int(pair_frag.shape[0])

    if use_cy:
        n_threads = min(os.cpu_count() or 1, max(1, tiles_x * tiles_y))
        img, trans = _raster_cy.composite_tiles(
            np.ascontiguousarray(pair_frag, dtype=np.int32),
            np.ascontiguousarray(tile_start, dtype=np.int64),
            np.ascontiguousarray(frags.mean),
            np.ascontiguousarray(frags.packed_f32()),
            width, height, tile_px, tiles_x, STOP_TRANSMITTANCE, n_threads)
    else:
        img, trans = _composite_numpy(pair_frag, tile_start, frags,
                                      width, height, tile_px, tiles_x)
    t3 = time.perf_counter()
    stats.composite_ms = (t3 - t2) * 1e3

    if cam.exposure != 1.0:
        img = img * cam.exposure
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return RenderedImage(pixels=pixels, alpha=(1.0 - trans).astype(np.float32))


def render_frame(scene, cam: Camera, tile_px: int = DEFAULT_TILE_PX,
                 backend: str | None = None):
    """project + rasterize with per-stage timing counters."""
    stats = RenderStats()
    t0 = time.perf_counter()
    frags = project(scene, cam, backend=backend or active_backend())
    t1 = time.perf_counter()
    stats.project_ms = (t1 - t0) * 1e3
    image = rasterize(frags, cam, tile_px, backend=backend, stats=stats)
    stats.total_ms = (time.perf_counter() - t0) * 1e3
    return image, stats
