"""Pinhole camera with a y-down image frame.

Camera space: +x right, +y down, +z forward; a world point maps to
x_c = R (x_w - position), pixel (u, v) = (W/2 + f x/z, H/2 + f y/z) with
f = H / (2 tan(fov_y / 2)). Pixel centers sample at (i + 0.5, j + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    position: np.ndarray
    rotation: np.ndarray          # [3,3] world -> camera
    fov_y: float                  # radians
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    exposure: float = 1.0         # scalar multiplier applied before clamping

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if not 0.0 < self.fov_y < np.pi:
            raise CameraError("fov_y must lie in (0, pi)")
        if not 0.0 < self.near < self.far:
            raise CameraError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise CameraError("resolution must be positive")

    @property
    def focal_px(self) -> float:
        return self.height / (2.0 * np.tan(self.fov_y / 2.0))

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), fov_y=0.9,
                width=640, height=400, near=0.01, far=100.0,
                exposure=1.0) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - position
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise CameraError("camera position and target coincide")
        forward = forward / norm
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            raise CameraError("up vector parallel to view direction")
        right = right / rnorm
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        return cls(position=position, rotation=rotation, fov_y=fov_y,
                   width=width, height=height, near=near, far=far,
                   exposure=exposure)


def save_camera(cam: Camera, path, look_at=None, up=(0.0, 0.0, 1.0)) -> None:
    """Plain-text camera file; orientation stored as look-at + up."""
    if look_at is None:
        look_at = cam.position + cam.rotation[2]   # one unit along forward
    with open(path, "w") as fh:
        fh.write("position {:.17g} {:.17g} {:.17g}\n".format(*cam.position))
        fh.write("look_at {:.17g} {:.17g} {:.17g}\n".format(*np.asarray(look_at, dtype=float)))
        fh.write("up {:.17g} {:.17g} {:.17g}\n".format(*np.asarray(up, dtype=float)))
        fh.write(f"fov_y {cam.fov_y:.17g}\n")
        fh.write(f"resolution {cam.width} {cam.height}\n")
        fh.write(f"near {cam.near:.17g}\n")
        fh.write(f"far {cam.far:.17g}\n")


def load_camera(path) -> Camera:
    vals: dict[str, list[float]] = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            vals[parts[0]] = [float(v) for v in parts[1:]]
    try:
        return Camera.look_at(
            position=vals["position"], target=vals["look_at"], up=vals["up"],
            fov_y=vals["fov_y"][0], width=int(vals["resolution"][0]),
            height=int(vals["resolution"][1]), near=vals["near"][0],
            far=vals["far"][0],
        )
    except KeyError as exc:
        raise CameraError(f"camera file missing field {exc}") from exc
