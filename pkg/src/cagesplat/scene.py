"""Gaussian-splat scene container, its binary file format, and mesh-based
proxy initialization.

A scene is stored struct-of-arrays: centers (mutable per frame), packed
covariances, opacity and color (fixed after creation). The on-disk format is
a little-endian binary file: magic ``CSPL``, u32 version, u64 count, then one
56-byte record per primitive (f32x3 center, f32x6 upper-triangular covariance
in xx,xy,xz,yy,yz,zz order, f32 opacity, f32x3 color, 4 reserved bytes).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

MAGIC = b"CSPL"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
RECORD_FLOATS = 13
RECORD_BYTES = 56  # 13 f32 payload + 4 reserved bytes
MIN_EIGENVALUE = 1e-12

_TRI = np.array([[0, 1, 2], [1, 3, 4], [2, 4, 5]])  # packed -> 3x3 index map


class SplatFormatError(ValueError):
    """Malformed splat file or invalid primitive record."""


@dataclass
class GaussianPrimitive:
    """Single Gaussian: center (m), 3x3 SPD covariance (m^2), opacity, RGB."""

    center: np.ndarray
    covariance: np.ndarray
    opacity: float
    color: np.ndarray


@dataclass
class GaussianScene:
    """Ordered set of Gaussian primitives with stable indexing over time.

    ``centers`` is the only per-frame mutable attribute; appearance arrays are
    shared between frames (single writer replaces centers wholesale).
    """

    centers: np.ndarray          # [N,3] f64
    covs_packed: np.ndarray      # [N,6] f64, order xx,xy,xz,yy,yz,zz
    opacity: np.ndarray          # [N]   f64
    color: np.ndarray            # [N,3] f64
    frame_id: int = 0

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box (min, max) of the rest centers."""
        if len(self) == 0:
            z = np.zeros(3)
            return z, z
        return self.centers.min(axis=0), self.centers.max(axis=0)

    def primitive(self, j: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=self.centers[j].copy(),
            covariance=unpack_covariance(self.covs_packed[j : j + 1])[0],
            opacity=float(self.opacity[j]),
            color=self.color[j].copy(),
        )

    def with_centers(self, centers: np.ndarray, frame_id: int | None = None) -> "GaussianScene":
        """New frame sharing appearance arrays; centers replaced wholesale."""
        if centers.shape != self.centers.shape:
            raise ValueError("center array shape mismatch")
        return GaussianScene(
            centers=np.asarray(centers, dtype=np.float64),
            covs_packed=self.covs_packed,
            opacity=self.opacity,
            color=self.color,
            frame_id=self.frame_id + 1 if frame_id is None else frame_id,
        )

    def validate(self) -> None:
        validate_records(self.covs_packed, self.opacity, self.color)


def unpack_covariance(packed: np.ndarray) -> np.ndarray:
    """[N,6] packed upper triangle -> [N,3,3] symmetric matrices."""
    packed = np.asarray(packed, dtype=np.float64)
    return packed[:, _TRI]


def pack_covariance(full: np.ndarray) -> np.ndarray:
    """[N,3,3] symmetric -> [N,6] packed (xx,xy,xz,yy,yz,zz)."""
    full = np.asarray(full, dtype=np.float64)
    iu = np.triu_indices(3)
    return full[:, iu[0], iu[1]]


def validate_records(covs_packed, opacity, color) -> None:
    """Raise SplatFormatError naming the first offending record index."""
    n = covs_packed.shape[0]
    if n == 0:
        return
    bad = ~np.isfinite(covs_packed).all(axis=1)
    bad |= ~np.isfinite(opacity) | ~np.isfinite(color).all(axis=1)
    if bad.any():
        raise SplatFormatError(f"non-finite values at record {int(np.argmax(bad))}")
    out = (opacity < 0.0) | (opacity > 1.0)
    if out.any():
        raise SplatFormatError(f"opacity out of [0,1] at record {int(np.argmax(out))}")
    out = (color < 0.0).any(axis=1) | (color > 1.0).any(axis=1)
    if out.any():
        raise SplatFormatError(f"color out of [0,1] at record {int(np.argmax(out))}")
    eigs = np.linalg.eigvalsh(unpack_covariance(covs_packed))
    out = eigs[:, 0] <= MIN_EIGENVALUE
    if out.any():
        raise SplatFormatError(
            f"covariance not positive-definite at record {int(np.argmax(out))}"
        )


def save_scene(scene: GaussianScene, path) -> None:
    scene.validate()
    n = len(scene)
    rec = np.zeros((n, RECORD_FLOATS + 1), dtype="<f4")
    rec[:, 0:3] = scene.centers
    rec[:, 3:9] = scene.covs_packed
    rec[:, 9] = scene.opacity
    rec[:, 10:13] = scene.color
    # column 13 is the reserved pad, left zero
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n))
        fh.write(rec.tobytes())


def load_scene(path) -> GaussianScene:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size:
        raise SplatFormatError("truncated header")
    magic, version, count = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise SplatFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise SplatFormatError(f"unsupported version {version}")
    body = blob[HEADER.size :]
    if len(body) != count * RECORD_BYTES:
        raise SplatFormatError(
            f"expected {count} records ({count * RECORD_BYTES} bytes), got {len(body)} bytes"
        )
    rec = np.frombuffer(body, dtype="<f4").reshape(count, RECORD_FLOATS + 1)
    scene = GaussianScene(
        centers=rec[:, 0:3].astype(np.float64),
        covs_packed=rec[:, 3:9].astype(np.float64),
        opacity=rec[:, 9].astype(np.float64),
        color=rec[:, 10:13].astype(np.float64),
    )
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# Triangle meshes (binary STL only) and surface-sampled proxies


@dataclass
class TriangleMesh:
    vertices: np.ndarray                     # [V,3] f64
    faces: np.ndarray                        # [F,3] int
    face_colors: np.ndarray | None = field(default=None)

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = (v[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def read_stl_binary(path) -> TriangleMesh:
    """Read a binary STL. ASCII STL is rejected."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 84:
        if blob[:5].lower() == b"solid":
            raise SplatFormatError("ASCII STL not supported; use binary STL")
        raise SplatFormatError("STL too short for a binary header")
    count = struct.unpack_from("<I", blob, 80)[0]
    if len(blob) != 84 + 50 * count:
        if blob[:5].lower() == b"solid":
            raise SplatFormatError("ASCII STL not supported; use binary STL")
        raise SplatFormatError("binary STL size does not match triangle count")
    raw = np.frombuffer(blob, dtype=np.uint8, offset=84).reshape(count, 50)
    tris = raw[:, :48].copy().view("<f4").reshape(count, 4, 3)[:, 1:4, :]
    vertices = tris.reshape(-1, 3).astype(np.float64)
    faces = np.arange(3 * count).reshape(count, 3)
    return TriangleMesh(vertices=vertices, faces=faces)


def write_stl_binary(mesh: TriangleMesh, path) -> None:
    v = mesh.vertices
    tri = v[mesh.faces]                                   # [F,3,3]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(norm > 0, n / np.maximum(norm, 1e-30), 0.0)
    rec = np.zeros((mesh.n_faces, 50), dtype=np.uint8)
    payload = np.concatenate([n[:, None, :], tri], axis=1).astype("<f4")
    rec[:, :48] = np.ascontiguousarray(payload.reshape(mesh.n_faces, 12)).view(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"\0" * 80)
        fh.write(struct.pack("<I", mesh.n_faces))
        fh.write(rec.tobytes())


def make_box_mesh(size, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box as 12 triangles."""
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2.0
    cx, cy, cz = center
    corners = np.array(
        [
            [cx - sx, cy - sy, cz - sz], [cx + sx, cy - sy, cz - sz],
            [cx + sx, cy + sy, cz - sz], [cx - sx, cy + sy, cz - sz],
            [cx - sx, cy - sy, cz + sz], [cx + sx, cy - sy, cz + sz],
            [cx + sx, cy + sy, cz + sz], [cx - sx, cy + sy, cz + sz],
        ]
    )
    quads = [
        (0, 3, 2, 1),  # -z
        (4, 5, 6, 7),  # +z
        (0, 1, 5, 4),  # -y
        (2, 3, 7, 6),  # +y
        (1, 2, 6, 5),  # +x
        (0, 4, 7, 3),  # -x
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriangleMesh(vertices=corners, faces=np.array(faces))


def make_cylinder_mesh(radius: float, length: float, segments: int = 48,
                       center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Capped cylinder with its axis along +x."""
    cx, cy, cz = center
    ang = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    ys = cy + radius * np.cos(ang)
    zs = cz + radius * np.sin(ang)
    x0, x1 = cx - length / 2.0, cx + length / 2.0
    ring0 = np.stack([np.full(segments, x0), ys, zs], axis=1)
    ring1 = np.stack([np.full(segments, x1), ys, zs], axis=1)
    cap0 = np.array([[x0, cy, cz]])
    cap1 = np.array([[x1, cy, cz]])
    vertices = np.concatenate([ring0, ring1, cap0, cap1])
    i0, i1 = np.arange(segments), (np.arange(segments) + 1) % segments
    side_a = np.stack([i0, segments + i0, segments + i1], axis=1)
    side_b = np.stack([i0, segments + i1, i1], axis=1)
    c0 = np.full(segments, 2 * segments)
    c1 = np.full(segments, 2 * segments + 1)
    cap_a = np.stack([c0, i1, i0], axis=1)
    cap_b = np.stack([c1, segments + i0, segments + i1], axis=1)
    faces = np.concatenate([side_a, side_b, cap_a, cap_b])
    return TriangleMesh(vertices=vertices.astype(np.float64), faces=faces)


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator):
    """Area-uniform surface samples; returns (points [n,3], face index [n])."""
    areas = mesh.face_areas()
    total = areas.sum()
    if mesh.n_faces < 1 or total <= 0:
        raise ValueError("mesh has no sampleable area")
    degenerate = areas <= 0
    if degenerate.any():
        raise ValueError(f"degenerate triangle at face {int(np.argmax(degenerate))}")
    face_idx = rng.choice(mesh.n_faces, size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return pts, face_idx


DEFAULT_ALBEDO = (0.72, 0.72, 0.78)
SIGMA_SPACING_FACTOR = 0.6  # isotropic stddev = 0.6 x mean nearest-neighbor spacing
PROXY_OPACITY = 0.9


def init_proxy_from_mesh(mesh: TriangleMesh, n: int, seed: int,
                         albedo=DEFAULT_ALBEDO) -> GaussianScene:
    """Surface-sampled Gaussian proxy of an undeformed geometry.

    Centers are area-uniform samples; covariances are isotropic with stddev
    proportional to the mean inter-sample spacing so coverage stays gap-free.
    Deterministic for a given seed.
    """
    if n < 1:
        raise ValueError("need at least one primitive")
    rng = np.random.default_rng(seed)
    pts, face_idx = sample_surface(mesh, n, rng)
    if n > 1:
        _, dist_idx = cKDTree(pts).query(pts, k=2)
        spacing = float(np.linalg.norm(pts - pts[dist_idx[:, 1]], axis=1).mean())
    else:
        spacing = float(np.cbrt(mesh.face_areas().sum()))
    sigma = max(SIGMA_SPACING_FACTOR * spacing, 1e-7)
    var = np.float32(sigma * sigma)
    covs = np.zeros((n, 6), dtype=np.float32)
    covs[:, [0, 3, 5]] = var
    if mesh.face_colors is not None:
        color = mesh.face_colors[face_idx].astype(np.float32)
    else:
        color = np.tile(np.asarray(albedo, dtype=np.float32), (n, 1))
    scene = GaussianScene(
        centers=pts.astype(np.float32).astype(np.float64),
        covs_packed=covs.astype(np.float64),
        opacity=np.full(n, PROXY_OPACITY, dtype=np.float64),
        color=color.astype(np.float64),
    )
    scene.validate()
    return scene
