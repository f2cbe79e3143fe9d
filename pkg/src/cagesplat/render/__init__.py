"""Software Gaussian rasterizer: projection, tile compositing, image output.

The composite kernel is compiled (Cython) when the extension built; setting
``CAGESPLAT_PURE=1`` or passing ``backend="python"`` selects the pure-numpy
fallback, which produces identical images.
"""

from .camera import Camera, CameraError, load_camera, save_camera
from .image_io import encode_png, read_image, to_uint8, write_image
from .project import FragmentBatch, SplatFragment, project
from .raster import (
    DEFAULT_TILE_PX,
    RenderedImage,
    RenderStats,
    active_backend,
    available_backends,
    rasterize,
    render_frame,
)
from .reference import render_reference

__all__ = [
    "Camera", "CameraError", "load_camera", "save_camera",
    "encode_png", "read_image", "to_uint8", "write_image",
    "FragmentBatch", "SplatFragment", "project",
    "DEFAULT_TILE_PX", "RenderedImage", "RenderStats",
    "active_backend", "available_backends", "rasterize", "render_frame",
    "render_reference",
]
