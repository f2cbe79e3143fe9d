"""Cage lattice geometry: binding weights, displacement propagation, and
ground-truth label extraction.

The cage is a regular grid over the padded object bounds. Gaussian centers
bind to their k nearest nodes with normalized inverse-distance weights;
nearest-neighbor selection happens in the cage's per-axis normalized frame so
the lattice is isotropic regardless of the object's aspect ratio (weights are
scale-invariant, so for uniformly scaled boxes they equal physical-frame IDW).
Cage labels for a frame of per-Gaussian displacements solve the regularized
normal equations with conjugate gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .scene import GaussianScene

CAGE_PADDING = 0.05  # fraction of each extent added on both sides
WEIGHTS_MAGIC = b"CBWT"
WEIGHTS_VERSION = 1
_WHDR = struct.Struct("<4sIIdQI")


class CageError(ValueError):
    pass


class SolverError(RuntimeError):
    """Least-squares solve did not reach the required residual."""


@dataclass
class RigidTransform:
    rotation: np.ndarray   # [3,3], orthonormal, det +1
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation


@dataclass
class CageGrid:
    """Regular control lattice; node order is row-major with x fastest."""

    dims: tuple[int, int, int]
    nodes: np.ndarray                 # [Nc,3] f64, canonical frame
    edges: np.ndarray                 # [E,2] int32, 6-neighborhood, each once
    region_transform: RigidTransform

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def node_index(self, ix: int, iy: int, iz: int) -> int:
        nx, ny, _ = self.dims
        return ix + nx * (iy + ny * iz)

    def normalized_nodes(self) -> np.ndarray:
        """Node coordinates scaled to the unit cube of the padded box."""
        lo = self.nodes.min(axis=0)
        extent = self.nodes.max(axis=0) - lo
        extent = np.where(extent > 1e-30, extent, 1.0)
        return (self.nodes - lo) / extent

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg


@dataclass
class BindingWeights:
    """Per-Gaussian (node index, weight) lists of fixed length k."""

    node_idx: np.ndarray   # [N,k] int32
    weights: np.ndarray    # [N,k] f64, rows sum to 1
    epsilon: float
    n_nodes: int

    @property
    def k(self) -> int:
        return self.node_idx.shape[1]

    def __len__(self) -> int:
        return self.node_idx.shape[0]

    def node_support(self) -> np.ndarray:
        """Total binding weight landing on each node (0 = unobserved)."""
        return np.bincount(
            self.node_idx.ravel(), weights=self.weights.ravel(), minlength=self.n_nodes
        )

    def as_sparse(self) -> sp.csr_matrix:
        n, k = self.node_idx.shape
        rows = np.repeat(np.arange(n), k)
        return sp.csr_matrix(
            (self.weights.ravel(), (rows, self.node_idx.ravel())),
            shape=(n, self.n_nodes),
        )


@dataclass
class CageDisplacementField:
    offsets: np.ndarray    # [Nc,3] f64
    timestamp: float = 0.0

    def __len__(self) -> int:
        return self.offsets.shape[0]

    def validate(self) -> None:
        if not np.isfinite(self.offsets).all():
            raise CageError("non-finite cage offsets")


def build_cage(bounds_min, bounds_max, dims: tuple[int, int, int],
               padding: float = CAGE_PADDING,
               region_transform: RigidTransform | None = None) -> CageGrid:
    """Uniform lattice over the padded axis-aligned box."""
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    nx, ny, nz = (int(d) for d in dims)
    if min(nx, ny, nz) < 2:
        raise CageError(f"cage dims must all be >= 2, got {dims}")
    extent = hi - lo
    if (extent <= 0).any():
        raise CageError(f"degenerate bounding box, extent {extent}")
    lo = lo - padding * extent
    hi = hi + padding * extent
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    zs = np.linspace(lo[2], hi[2], nz)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")        # [nx,ny,nz]
    nodes = np.stack([gx, gy, gz], axis=-1).transpose(2, 1, 0, 3).reshape(-1, 3)
    idx = np.arange(nx * ny * nz, dtype=np.int32).reshape(nz, ny, nx)
    ex = np.stack([idx[:, :, :-1].ravel(), idx[:, :, 1:].ravel()], axis=1)
    ey = np.stack([idx[:, :-1, :].ravel(), idx[:, 1:, :].ravel()], axis=1)
    ez = np.stack([idx[:-1].ravel(), idx[1:].ravel()], axis=1)
    edges = np.concatenate([ex, ey, ez]).astype(np.int32)
    return CageGrid(
        dims=(nx, ny, nz),
        nodes=nodes,
        edges=edges,
        region_transform=region_transform or RigidTransform.identity(),
    )


def cage_for_scene(scene: GaussianScene, dims, padding: float = CAGE_PADDING) -> CageGrid:
    lo, hi = scene.bounds
    return build_cage(lo, hi, dims, padding=padding)


def _normalize(points: np.ndarray, nodes: np.ndarray):
    lo = nodes.min(axis=0)
    extent = nodes.max(axis=0) - lo
    extent = np.where(extent > 1e-30, extent, 1.0)
    return (points - lo) / extent, (nodes - lo) / extent


def bind_weights(cage: CageGrid, scene: GaussianScene, k: int,
                 epsilon: float) -> BindingWeights:
    """Normalized inverse-distance weights over each center's k nearest nodes.

    Ties in the k-th distance are broken toward the lower node index. epsilon
    is measured in the normalized frame and guards node-coincident centers;
    epsilon = 0 is accepted, in which case a coincident center puts all its
    mass on the zero-distance node(s).
    """
    n = len(scene)
    if n == 0:
        raise CageError("empty scene")
    if k < 1 or k > cage.n_nodes:
        raise CageError(f"k={k} outside [1, {cage.n_nodes}]")
    if epsilon < 0:
        raise CageError("epsilon must be >= 0")
    q, nodes_n = _normalize(scene.centers, cage.nodes)
    tree = cKDTree(nodes_n)
    pool = min(cage.n_nodes, k + 33)
    dist, idx = tree.query(q, k=pool)
    if pool == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    # sort candidates by index first, then stable-sort by distance: exact
    # distance ties end up in ascending node index order
    order_i = np.argsort(idx, axis=1, kind="stable")
    dist = np.take_along_axis(dist, order_i, axis=1)
    idx = np.take_along_axis(idx, order_i, axis=1)
    order_d = np.argsort(dist, axis=1, kind="stable")
    dist = np.take_along_axis(dist, order_d, axis=1)
    idx = np.take_along_axis(idx, order_d, axis=1)
    if k < pool < cage.n_nodes:
        # if a tie class straddles the pool boundary, resolve those rows
        # against all nodes to keep the selection exact
        boundary = dist[:, k - 1] >= dist[:, pool - 1]
        if boundary.any():
            rows = np.nonzero(boundary)[0]
            d_all = np.linalg.norm(q[rows, None, :] - nodes_n[None, :, :], axis=2)
            i_all = np.broadcast_to(np.arange(cage.n_nodes), d_all.shape)
            od = np.argsort(d_all, axis=1, kind="stable")  # index order is ascending already
            dist[rows, :] = np.take_along_axis(d_all, od, axis=1)[:, :pool]
            idx[rows, :] = np.take_along_axis(i_all, od, axis=1)[:, :pool]
    dist = dist[:, :k]
    idx = idx[:, :k].astype(np.int32)
    with np.errstate(divide="ignore"):
        raw = 1.0 / (dist + epsilon)
    inf_rows = ~np.isfinite(raw).all(axis=1)
    if inf_rows.any():
        # epsilon = 0 with coincident nodes: uniform mass over the zero set
        zero = dist[inf_rows] == 0.0
        raw[inf_rows] = zero / np.maximum(zero.sum(axis=1, keepdims=True), 1)
    weights = raw / raw.sum(axis=1, keepdims=True)
    return BindingWeights(node_idx=idx, weights=weights, epsilon=float(epsilon),
                          n_nodes=cage.n_nodes)


def propagate(weights: BindingWeights, field: CageDisplacementField,
              scene: GaussianScene) -> GaussianScene:
    """Apply cage offsets to Gaussian centers; appearance stays fixed."""
    if len(field) != weights.n_nodes:
        raise CageError(
            f"field has {len(field)} offsets, cage has {weights.n_nodes} nodes"
        )
    delta = np.einsum("nk,nkc->nc", weights.weights, field.offsets[weights.node_idx])
    return scene.with_centers(scene.centers + delta)


def extract_cage_labels(weights: BindingWeights, gt_displacements: np.ndarray,
                        lambda_reg: float = 1e-6, tol: float = 1e-10,
                        max_iter: int | None = None,
                        x0: np.ndarray | None = None) -> CageDisplacementField:
    """Cage offsets minimizing ||W dc - gt||^2 + lambda_reg ||dc||^2.

    Solves the normal equations (W^T W + lambda I) dc = W^T gt per axis with
    conjugate gradients (the three axes share the matrix and run as a block).
    Unobserved nodes take the minimal-norm value 0. Raises SolverError when
    the relative residual stays above 1e-8 after the iteration cap.
    """
    gt = np.asarray(gt_displacements, dtype=np.float64)
    if gt.ndim != 2 or gt.shape[1] != 3:
        raise CageError("gt displacements must be [N,3]")
    if gt.shape[0] != len(weights):
        raise CageError("gt displacement count does not match binding weights")
    if gt.shape[0] == 0:
        raise CageError("no Gaussians to fit against")
    if lambda_reg < 0:
        raise CageError("lambda_reg must be >= 0")
    W = weights.as_sparse()
    nc = weights.n_nodes
    if max_iter is None:
        max_iter = 10 * nc
    b = W.T @ gt                                            # [Nc,3]
    x = np.zeros((nc, 3)) if x0 is None else np.array(x0, dtype=np.float64)

    def matvec(v):
        return W.T @ (W @ v) + lambda_reg * v

    r = b - matvec(x)
    p = r.copy()
    rs = (r * r).sum(axis=0)
    b_norm = np.maximum(np.sqrt((b * b).sum(axis=0)), 1e-300)
    for _ in range(max_iter):
        if (np.sqrt(rs) <= tol * b_norm).all():
            break
        Ap = matvec(p)
        pAp = (p * Ap).sum(axis=0)
        alpha = np.where(pAp > 0, rs / np.where(pAp > 0, pAp, 1.0), 0.0)
        x += alpha * p
        r -= alpha * Ap
        rs_new = (r * r).sum(axis=0)
        beta = np.where(rs > 0, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        p = r + beta * p
        rs = rs_new
    resid = np.sqrt(((b - matvec(x)) ** 2).sum(axis=0)) / b_norm
    if (resid > 1e-8).any():
        raise SolverError(
            f"normal equations not converged: relative residuals {resid}"
        )
    return CageDisplacementField(offsets=x)


def align_patch(patch_fiducials: np.ndarray, cage_fiducials: np.ndarray) -> RigidTransform:
    """Rigid transform (no scaling) minimizing RMS distance between the
    corresponding fiducial sets, via cross-covariance SVD with det correction.
    """
    src = np.asarray(patch_fiducials, dtype=np.float64)
    dst = np.asarray(cage_fiducials, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise CageError("fiducial sets must both be [n,3]")
    if src.shape[0] < 3:
        raise CageError("need at least 3 fiducials")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise CageError("collinear fiducials: cross-covariance rank < 2")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cd - R @ cs
    return RigidTransform(rotation=R, translation=t)


# ---------------------------------------------------------------------------
# Serialization


def save_weights(weights: BindingWeights, path) -> None:
    n, k = weights.node_idx.shape
    rec = np.zeros((n, k), dtype=[("i", "<u4"), ("w", "<f4")])
    rec["i"] = weights.node_idx
    rec["w"] = weights.weights
    with open(path, "wb") as fh:
        fh.write(_WHDR.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, k, weights.epsilon,
                            n, weights.n_nodes))
        fh.write(rec.tobytes())


def load_weights(path) -> BindingWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, k, eps, n, n_nodes = _WHDR.unpack_from(blob)
    if magic != WEIGHTS_MAGIC or version != WEIGHTS_VERSION:
        raise CageError("not a binding-weights file")
    rec = np.frombuffer(blob, dtype=[("i", "<u4"), ("w", "<f4")],
                        offset=_WHDR.size).reshape(n, k)
    return BindingWeights(
        node_idx=rec["i"].astype(np.int32),
        weights=rec["w"].astype(np.float64),
        epsilon=eps,
        n_nodes=n_nodes,
    )


def save_cage(cage: CageGrid, path) -> None:
    with open(path, "w") as fh:
        fh.write("dims {} {} {}\n".format(*cage.dims))
        for p in cage.nodes:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        fh.write("transform\n")
        for row in cage.region_transform.rotation:
            fh.write(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g}\n")
        t = cage.region_transform.translation
        fh.write(f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g}\n")


def load_cage(path) -> CageGrid:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("dims"):
        raise CageError("cage file must start with a dims line")
    nx, ny, nz = (int(v) for v in lines[0].split()[1:4])
    n = nx * ny * nz
    nodes = np.array([[float(v) for v in ln.split()] for ln in lines[1 : 1 + n]])
    transform = RigidTransform.identity()
    if len(lines) > 1 + n and lines[1 + n] == "transform":
        rows = [[float(v) for v in ln.split()] for ln in lines[2 + n : 6 + n]]
        transform = RigidTransform(rotation=np.array(rows[:3]),
                                   translation=np.array(rows[3]))
    rebuilt = build_cage(nodes.min(axis=0), nodes.max(axis=0), (nx, ny, nz), padding=0.0)
    return CageGrid(dims=(nx, ny, nz), nodes=nodes, edges=rebuilt.edges,
                    region_transform=transform)
