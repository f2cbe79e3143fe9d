"""Evaluation metrics: Chamfer distance, voxel IoU, SSIM, and centerline
bend/twist angles.

Conventions: point sets are [N,3] in meters; chamfer returns millimeters and
is the symmetric mean nearest-neighbor distance halved. Angle estimators bin
points along the rest-pose principal axis (16 bins); the bend angle between
the line fits of the first and last quarter of the centerline is rescaled by
1/0.75 (the secant of a constant-curvature arc measures 75% of the full turn)
and the twist angle is the slope of per-bin Procrustes rotations over the
full length, right-handed about the centerline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

N_CENTERLINE_BINS = 16
DEFAULT_VOXEL_MM = 2.0


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    sequence_id: str
    region: str                 # "center" | "full"
    iou: float
    ssim: float
    chamfer_mm: float
    angle_error_deg: float

    def row(self):
        return [self.sequence_id, self.region, f"{self.iou:.6f}",
                f"{self.ssim:.6f}", f"{self.chamfer_mm:.6f}",
                f"{self.angle_error_deg:.6f}"]


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "region", "iou", "ssim", "chamfer_mm",
                    "angle_error_deg"])
        for r in reports:
            w.writerow(r.row())


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance, halved, in mm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("chamfer needs non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(0.5 * (d_ab.mean() + d_ba.mean()) * 1000.0)


def chamfer_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    """O(n^2) oracle for the accelerated version."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()) * 1000.0)


def _occupancy(points: np.ndarray, origin: np.ndarray, dims: np.ndarray,
               voxel: float) -> set:
    idx = np.floor((points - origin) / voxel).astype(np.int64)
    idx = np.clip(idx, 0, dims - 1)
    flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    return set(flat.tolist())


def voxel_iou(a: np.ndarray, b: np.ndarray, voxel_mm: float = DEFAULT_VOXEL_MM) -> float:
    """Occupancy-grid intersection over union on the joint bounding box."""
    if voxel_mm <= 0:
        raise MetricError("voxel size must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("voxel_iou needs non-empty point sets")
    voxel = voxel_mm / 1000.0
    both = np.concatenate([a, b])
    origin = both.min(axis=0)
    dims = np.maximum(np.floor((both.max(axis=0) - origin) / voxel).astype(np.int64) + 1, 1)
    occ_a = _occupancy(a, origin, dims, voxel)
    occ_b = _occupancy(b, origin, dims, voxel)
    union = len(occ_a | occ_b)
    if union == 0:
        return 1.0
    return len(occ_a & occ_b) / union


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(k, k)
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """2D 'valid' correlation via stacked shifted views."""
    k = window.shape[0]
    h, w = img.shape
    out = np.zeros((h - k + 1, w - k + 1), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += window[i, j] * img[i:i + h - k + 1, j:j + w - k + 1]
    return out


def ssim(x, y, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, luminance_range: float = 1.0) -> float:
    """Mean structural similarity; per-channel then averaged.

    Accepts [H,W] or [H,W,3] float arrays in [0,1] (or RenderedImage-likes
    with a .pixels attribute).
    """
    x = np.asarray(getattr(x, "pixels", x), dtype=np.float64)
    y = np.asarray(getattr(y, "pixels", y), dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    if min(x.shape[0], x.shape[1]) < window_size:
        raise MetricError(f"images must be at least {window_size} px per side")
    c1 = (k1 * luminance_range) ** 2
    c2 = (k2 * luminance_range) ** 2
    win = _gaussian_window(window_size, sigma)
    vals = []
    for ch in range(x.shape[2]):
        xa, ya = x[:, :, ch], y[:, :, ch]
        mu_x = _filter_valid(xa, win)
        mu_y = _filter_valid(ya, win)
        xx = _filter_valid(xa * xa, win) - mu_x * mu_x
        yy = _filter_valid(ya * ya, win) - mu_y * mu_y
        xy = _filter_valid(xa * ya, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


def _principal_axis(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0]
    # deterministic sign: largest-magnitude component positive
    k = np.argmax(np.abs(axis))
    return axis if axis[k] >= 0 else -axis


def _centerline(points: np.ndarray, rest: np.ndarray,
                axis: np.ndarray | None = None,
                n_bins: int = N_CENTERLINE_BINS):
    """Bin points by rest-pose position along the (given or principal) axis.

    When the rest correspondence differs from the deformed points, each bin
    centroid is the bin's rest position on the axis plus its mean
    displacement, which cancels the transverse sampling noise of wide
    cross-sections. Returns (centroids, per-point bin, axis, occupied mask).
    """
    axis = _principal_axis(rest) if axis is None else np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    s = rest @ axis
    edges = np.linspace(s.min(), s.max() + 1e-12, n_bins + 1)
    which = np.clip(np.digitize(s, edges) - 1, 0, n_bins - 1)
    corrected = points is not rest
    cent = np.zeros((n_bins, 3))
    ok = np.zeros(n_bins, dtype=bool)
    for b in range(n_bins):
        m = which == b
        if m.sum() >= 1:
            if corrected:
                disp = (points[m] - rest[m]).mean(axis=0)
                cent[b] = axis * s[m].mean() + disp
            else:
                cent[b] = points[m].mean(axis=0)
            ok[b] = True
    if ok.sum() < 4:
        raise MetricError("degenerate centerline: fewer than 4 occupied bins")
    return cent, which, axis, ok


def _fit_direction(pts: np.ndarray) -> np.ndarray:
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    d = vt[0]
    # orient along increasing order of the points
    if np.dot(pts[-1] - pts[0], d) < 0:
        d = -d
    return d


def bend_angle(points: np.ndarray, rest: np.ndarray | None = None,
               axis_hint: np.ndarray | None = None) -> float:
    """Total bend angle (degrees) of an elongated point set.

    Bins along the rest principal axis (or axis_hint); the angle between the
    first/last-quarter centerline line fits is scaled by 1/0.75, exact for
    constant-curvature arcs. Passing the rest correspondence enables the
    displacement-corrected centroids (see _centerline).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 10:
        raise MetricError("need at least 10 points for a centerline")
    rest = points if rest is None else np.asarray(rest, dtype=np.float64)
    cent, _, _, ok = _centerline(points, rest, axis_hint)
    bins = np.nonzero(ok)[0]
    q = max(len(bins) // 4, 2)
    d0 = _fit_direction(cent[bins[:q]])
    d1 = _fit_direction(cent[bins[-q:]])
    cosv = np.clip(np.dot(d0, d1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosv)) / 0.75)


def twist_angle(points: np.ndarray, rest: np.ndarray) -> float:
    """Signed twist (degrees) about the centerline, right-handed.

    Per-bin 2D Procrustes rotations in the plane normal to the rest
    centerline, with the total twist taken as the fitted slope over the full
    length (robust version of distal-minus-proximal).
    """
    points = np.asarray(points, dtype=np.float64)
    rest = np.asarray(rest, dtype=np.float64)
    if points.shape != rest.shape:
        raise MetricError("deformed and rest sets must correspond")
    axis = _principal_axis(rest)
    # orthonormal transverse frame
    u = np.cross(axis, [0.0, 0.0, 1.0])
    if np.linalg.norm(u) < 1e-9:
        u = np.cross(axis, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    s = rest @ axis
    edges = np.linspace(s.min(), s.max() + 1e-12, N_CENTERLINE_BINS + 1)
    which = np.clip(np.digitize(s, edges) - 1, 0, N_CENTERLINE_BINS - 1)
    angles, centers = [], []
    for b in range(N_CENTERLINE_BINS):
        m = which == b
        if m.sum() < 3:
            continue
        r2 = np.stack([rest[m] @ u, rest[m] @ v], axis=1)
        p2 = np.stack([points[m] @ u, points[m] @ v], axis=1)
        r2 = r2 - r2.mean(axis=0)
        p2 = p2 - p2.mean(axis=0)
        # optimal 2D rotation angle from the cross-covariance
        num = (r2[:, 0] * p2[:, 1] - r2[:, 1] * p2[:, 0]).sum()
        den = (r2[:, 0] * p2[:, 0] + r2[:, 1] * p2[:, 1]).sum()
        if num == 0 and den == 0:
            continue
        angles.append(np.arctan2(num, den))
        centers.append(0.5 * (edges[b] + edges[b + 1]))
    if len(angles) < 2:
        raise MetricError("too few usable bins for a twist estimate")
    angles = np.unwrap(np.array(angles))
    centers = np.array(centers)
    span = s.max() - s.min()
    slope = np.polyfit(centers, angles, 1)[0]
    return float(np.degrees(slope * span))
