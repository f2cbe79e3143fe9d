"""Perspective projection of anisotropic Gaussians into screen-space fragments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene import GaussianScene
from .camera import Camera

COV2D_FLOOR = 0.3          # isotropic floor added to projected covariance, px^2
CUTOFF_SIGMA = 3.0         # contributions truncated outside this Mahalanobis radius


@dataclass
class SplatFragment:
    """Single projected Gaussian (record view into a FragmentBatch)."""

    gaussian_index: int
    mean_px: np.ndarray        # [2]
    cov_px: np.ndarray         # [2,2]
    depth: float               # camera-space z, m
    opacity: float
    color: np.ndarray


@dataclass
class FragmentBatch:
    """Struct-of-arrays fragment list (one entry per surviving Gaussian)."""

    index: np.ndarray          # [F] int32, source Gaussian index
    mean: np.ndarray           # [F,2] f64 pixel coordinates
    cov: np.ndarray            # [F,3] f64 packed 2D covariance (a, b, c)
    depth: np.ndarray          # [F] f64
    opacity: np.ndarray        # [F] f64
    color: np.ndarray          # [F,3] f64
    radius_x: np.ndarray       # [F] f64, 3-sigma bbox half-extents in px
    radius_y: np.ndarray
    inv: np.ndarray | None = None    # [F,3] f32 cached inverse covariance
    fdat: np.ndarray | None = None   # [F,8] f32 packed compositing record

    def __len__(self) -> int:
        return self.index.shape[0]

    def packed_f32(self) -> np.ndarray:
        """[F,8] f32 record per fragment: ia,ib,ic,ry,opacity,r,g,b."""
        if self.fdat is None:
            self.fdat = np.column_stack([
                self.inverse_cov(),
                self.radius_y.astype(np.float32),
                self.opacity.astype(np.float32),
                self.color.astype(np.float32),
            ]).astype(np.float32)
        return self.fdat

    def fragment(self, i: int) -> SplatFragment:
        a, b, c = self.cov[i]
        return SplatFragment(
            gaussian_index=int(self.index[i]),
            mean_px=self.mean[i].copy(),
            cov_px=np.array([[a, b], [b, c]]),
            depth=float(self.depth[i]),
            opacity=float(self.opacity[i]),
            color=self.color[i].copy(),
        )

    def inverse_cov(self) -> np.ndarray:
        """[F,3] packed inverse 2D covariance (ia, ib, ic).

        Quantized to f32: every backend evaluates the Gaussian falloff from
        these exact coefficient values, keeping the truncation boundary
        (q <= 4.5) identical across compiled and python paths.
        """
        if self.inv is not None:
            return self.inv
        a, b, c = self.cov[:, 0], self.cov[:, 1], self.cov[:, 2]
        det = a * c - b * b
        self.inv = np.stack([c / det, -b / det, a / det],
                            axis=1).astype(np.float32)
        return self.inv


def _bilinear_coeffs(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Coefficients c with (packed cov) . c = r^T Sigma s for packed order
    xx,xy,xz,yy,yz,zz."""
    return np.array([
        r[0] * s[0],
        r[0] * s[1] + r[1] * s[0],
        r[0] * s[2] + r[2] * s[0],
        r[1] * s[1],
        r[1] * s[2] + r[2] * s[1],
        r[2] * s[2],
    ])


def project(scene: GaussianScene, cam: Camera, backend: str | None = None) -> FragmentBatch:
    """Project Gaussians whose center lies inside the frustum expanded by the
    3-sigma footprint; 2D covariance via the perspective-affine approximation
    J W Sigma W^T J^T plus an isotropic pixel floor.
    """
    n = len(scene)
    if n == 0:
        return _empty_batch()
    from .raster import active_backend
    if (backend or active_backend()) == "cython":
        from . import _raster_cy
        idx, mean, cov, inv, depth, op, col, rx, ry, fdat = _raster_cy.project_cull(
            np.ascontiguousarray(scene.centers),
            np.ascontiguousarray(scene.covs_packed),
            np.ascontiguousarray(scene.opacity),
            np.ascontiguousarray(scene.color),
            np.ascontiguousarray(cam.rotation), np.ascontiguousarray(cam.position),
            cam.focal_px, cam.width / 2.0, cam.height / 2.0,
            float(cam.width), float(cam.height), cam.near, cam.far,
            COV2D_FLOOR, CUTOFF_SIGMA)
        return FragmentBatch(index=idx, mean=mean, cov=cov, depth=depth,
                             opacity=op, color=col, radius_x=rx, radius_y=ry,
                             inv=inv, fdat=fdat)
    R = cam.rotation
    pc = (scene.centers - cam.position) @ R.T
    z = pc[:, 2]
    infront = (z > cam.near) & (z < cam.far)
    if not infront.any():
        return _empty_batch()
    idx0 = np.nonzero(infront)[0]
    pc = pc[idx0]
    z = z[idx0]
    f = cam.focal_px
    inv_z = 1.0 / z
    u = cam.width / 2.0 + f * pc[:, 0] * inv_z
    v = cam.height / 2.0 + f * pc[:, 1] * inv_z
    # M = J R rows: m0 = j00 R0 + j02 R2, m1 = j00 R1 + j12 R2, so the 2D
    # covariance reduces to quadratic forms of Sigma with the fixed rows of R,
    # batched as one [N,6]x[6,6] product on the packed storage
    K = np.stack([
        _bilinear_coeffs(R[0], R[0]),   # q00
        _bilinear_coeffs(R[0], R[1]),   # q01
        _bilinear_coeffs(R[0], R[2]),   # q02
        _bilinear_coeffs(R[1], R[1]),   # q11
        _bilinear_coeffs(R[1], R[2]),   # q12
        _bilinear_coeffs(R[2], R[2]),   # q22
    ])
    Q = scene.covs_packed[idx0] @ K.T
    q00, q01, q02, q11, q12, q22 = (Q[:, i] for i in range(6))
    j00 = f * inv_z
    j02 = -f * pc[:, 0] * inv_z * inv_z
    j12 = -f * pc[:, 1] * inv_z * inv_z
    a = j00 * j00 * q00 + 2.0 * j00 * j02 * q02 + j02 * j02 * q22 + COV2D_FLOOR
    b = j00 * j00 * q01 + j00 * j12 * q02 + j02 * j00 * q12 + j02 * j12 * q22
    c = j00 * j00 * q11 + 2.0 * j00 * j12 * q12 + j12 * j12 * q22 + COV2D_FLOOR
    rx = CUTOFF_SIGMA * np.sqrt(a)
    ry = CUTOFF_SIGMA * np.sqrt(c)
    visible = (u + rx >= 0) & (u - rx <= cam.width) & \
              (v + ry >= 0) & (v - ry <= cam.height)
    keep = np.nonzero(visible)[0]
    return FragmentBatch(
        index=idx0[keep].astype(np.int32),
        mean=np.stack([u[keep], v[keep]], axis=1),
        cov=np.stack([a[keep], b[keep], c[keep]], axis=1),
        depth=z[keep],
        opacity=scene.opacity[idx0[keep]].astype(np.float64),
        color=scene.color[idx0[keep]].astype(np.float64),
        radius_x=rx[keep],
        radius_y=ry[keep],
    )


def _empty_batch() -> FragmentBatch:
    return FragmentBatch(
        index=np.zeros(0, dtype=np.int32),
        mean=np.zeros((0, 2)),
        cov=np.zeros((0, 3)),
        depth=np.zeros(0),
        opacity=np.zeros(0),
        color=np.zeros((0, 3)),
        radius_x=np.zeros(0),
        radius_y=np.zeros(0),
    )
