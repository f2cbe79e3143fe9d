"""Tactile-array simulation and acquisition chain.

Replaces the physical patch: analytic bend/twist oracles deform Gaussian
centers, a strain-gauge model turns the same deformation state into a
resistance map, and the acquisition chain (two-point calibration to
normalized units, first-order IIR low-pass, 3x3 median, tiling) reproduces
the real data contract. Dataset generation pairs simulated frames with
oracle Gaussian displacements.

Conventions: the central axis lies in the patch plane at ``axis_angle``
radians from +x, a_hat = (cos g, sin g, 0); bends displace along
b_hat = z_hat x a_hat with constant curvature from the object's minimum
edge along b_hat (cantilever); twists rotate cross-sections about the
centerline, linear in length, right-handed. Bends carry each point by its
mid-surface arc displacement (cross-sections are not re-tilted), so the
displacement field depends only on the coordinate along b_hat. The twist
signature seen by the simulated patch (strain antisymmetric across the
axis) is a modeling choice; a real torsion gauge responds to shear only
indirectly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter

from .scene import GaussianScene, load_scene, save_scene

MODES = ("bend", "twist")

# strain-gauge model defaults
GAUGE_ALPHA = 2.0        # dR/R0 = alpha * strain
GAUGE_THICKNESS = 0.02   # effective fiber offset, normalized units
TWIST_GAUGE = 0.5        # shear-to-reading projection for twists
DEFAULT_R0 = 1000.0      # ohms
DEFAULT_SAMPLE_HZ = 250.0
DEFAULT_CUTOFF_HZ = 10.0
PATCH_FRACTION = 0.3     # patch covers this fraction of the in-plane extent


class SensorError(ValueError):
    pass


@dataclass
class SensorFrame:
    """One tactile frame: H x W grid, either raw ohms or normalized dR/R0."""

    grid: np.ndarray
    timestamp: float
    units: str = "ohms"            # "ohms" | "relative"
    adc_raw: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape  # type: ignore[return-value]

    def validate(self) -> None:
        h, w = self.grid.shape
        if h < 10 or w < 10 or h % 10 or w % 10:
            raise SensorError(f"acquisition frames must tile 10x10 patches, got {h}x{w}")
        if self.units == "ohms" and (self.grid <= 0).any():
            raise SensorError("resistance values must be positive")


@dataclass
class CalibrationTable:
    """Per-channel baseline and two-point gain/offset (raw -> ohms)."""

    r0: np.ndarray
    gain: np.ndarray
    offset: np.ndarray

    def validate(self) -> None:
        if (self.r0 <= 0).any():
            raise SensorError("baseline R0 must be positive everywhere")

    @classmethod
    def default(cls, shape=(10, 10), r0=DEFAULT_R0) -> "CalibrationTable":
        g = np.ones(shape)
        return cls(r0=np.full(shape, float(r0)), gain=g, offset=np.zeros(shape))


@dataclass
class DeformationState:
    mode: str                 # "bend" | "twist"
    magnitude: float          # radians of total bend / twist
    axis_angle: float         # central-axis orientation in the patch plane
    phase: float              # normalized time in [0,1]

    def validate(self, max_magnitude: float | None = None) -> None:
        if self.mode not in MODES:
            raise SensorError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.phase <= 1.0:
            raise SensorError("phase must lie in [0,1]")
        if max_magnitude is not None and abs(self.magnitude) > max_magnitude + 1e-12:
            raise SensorError("magnitude outside actuation range")


def _axis_vectors(axis_angle: float):
    a = np.array([np.cos(axis_angle), np.sin(axis_angle), 0.0])
    b = np.array([-np.sin(axis_angle), np.cos(axis_angle), 0.0])  # z_hat x a_hat
    return a, b


def oracle_deform(scene: GaussianScene, state: DeformationState) -> np.ndarray:
    """Analytic displacement of every rest center under the state. [N,3]."""
    state.validate()
    p = scene.centers
    a_hat, b_hat = _axis_vectors(state.axis_angle)
    if state.mode == "bend":
        s_coord = p @ b_hat
        s0 = s_coord.min()
        span = max(s_coord.max() - s0, 1e-12)
        s = s_coord - s0
        kappa = state.magnitude / span
        u = kappa * s
        # sin(u)/u and (1-cos u)/u with smooth u -> 0 limits
        sinc = np.sinc(u / np.pi)
        gu = np.where(np.abs(u) < 1e-6, u / 2.0, (1.0 - np.cos(u)) / np.where(u == 0, 1.0, u))
        along_b = s * (sinc - 1.0)
        along_z = s * gu
        return along_b[:, None] * b_hat + along_z[:, None] * np.array([0.0, 0.0, 1.0])
    # twist: rotate about the central line along a_hat through the bounds center
    lo, hi = scene.bounds
    center = (lo + hi) / 2.0
    rel = p - center
    s_coord = rel @ a_hat
    s0 = s_coord.min()
    span = max(s_coord.max() - s0, 1e-12)
    psi = state.magnitude * (s_coord - s0) / span
    r = rel - np.outer(s_coord, a_hat)          # perpendicular component
    axr = np.cross(np.broadcast_to(a_hat, r.shape), r)
    cos_p, sin_p = np.cos(psi)[:, None], np.sin(psi)[:, None]
    return r * (cos_p - 1.0) + axr * sin_p


def patch_strain(state: DeformationState, shape=(10, 10),
                 gauge_thickness=GAUGE_THICKNESS, twist_gauge=TWIST_GAUGE,
                 patch_fraction: float = PATCH_FRACTION) -> np.ndarray:
    """Surface strain sampled at the patch cell centers for a state.

    Bends read curvature times fiber offset, ramped with the distance from
    the clamped edge; twists read a signed shear proportional to the
    transverse offset from the central axis (antisymmetric).
    """
    h, w = shape
    ys = (np.arange(h) + 0.5) / h - 0.5          # row coordinate, along +y
    xs = (np.arange(w) + 0.5) / w - 0.5          # column coordinate, along +x
    gx, gy = np.meshgrid(xs, ys)                 # [h,w]
    a_hat, b_hat = _axis_vectors(state.axis_angle)
    if state.mode == "bend":
        # position along the bend direction, in object-normalized units;
        # the patch sits at the object's center
        s_norm = 0.5 + patch_fraction * (gx * b_hat[0] + gy * b_hat[1])
        return state.magnitude * gauge_thickness * s_norm
    perp = gx * b_hat[0] + gy * b_hat[1]
    return twist_gauge * state.magnitude * perp


def simulate_resistance(state: DeformationState, noise_std: float, seed: int,
                        shape=(10, 10), table: CalibrationTable | None = None,
                        gauge_alpha: float = GAUGE_ALPHA,
                        gauge_thickness: float = GAUGE_THICKNESS,
                        twist_gauge: float = TWIST_GAUGE,
                        timestamp: float = 0.0,
                        adc12: bool = False) -> SensorFrame:
    """Resistance map R0 * (1 + alpha * strain) + gaussian noise (ohms)."""
    if noise_std < 0:
        raise SensorError("noise_std must be >= 0")
    table = table or CalibrationTable.default(shape)
    strain = patch_strain(state, shape, gauge_thickness, twist_gauge)
    grid = table.r0 * (1.0 + gauge_alpha * strain)
    if noise_std > 0:
        grid = grid + np.random.default_rng(seed).normal(0.0, noise_std, size=shape)
    adc = None
    if adc12:
        # 12-bit quantization of the acquisition channel before calibration
        code = np.clip(np.round(grid / (2.0 * DEFAULT_R0) * 4095.0), 0, 4095)
        adc = code.astype(np.int32)
        grid = code / 4095.0 * (2.0 * DEFAULT_R0)
    frame = SensorFrame(grid=grid, timestamp=timestamp, units="ohms", adc_raw=adc)
    frame.validate()
    return frame


def calibrate(frame_raw: SensorFrame, table: CalibrationTable) -> SensorFrame:
    """Affine raw->ohms map, then per-channel normalization to dR/R0."""
    if frame_raw.grid.shape != table.r0.shape:
        raise SensorError("calibration table does not match frame dimensions")
    ohms = table.gain * frame_raw.grid + table.offset
    rel = (ohms - table.r0) / table.r0
    return SensorFrame(grid=rel, timestamp=frame_raw.timestamp, units="relative")


def calibrate_inverse(frame_rel: SensorFrame, table: CalibrationTable) -> SensorFrame:
    """Inverse of calibrate(), for round-trip checks."""
    ohms = frame_rel.grid * table.r0 + table.r0
    raw = (ohms - table.offset) / table.gain
    return SensorFrame(grid=raw, timestamp=frame_rel.timestamp, units="ohms")


class IIRLowpass:
    """First-order causal low-pass, state carried across frames per channel."""

    def __init__(self, cutoff_hz: float, sample_hz: float):
        if not 0 < cutoff_hz < sample_hz / 2.0:
            raise SensorError("cutoff must lie in (0, sample_hz/2)")
        self.alpha = 1.0 - np.exp(-2.0 * np.pi * cutoff_hz / sample_hz)
        self.state: np.ndarray | None = None

    def apply(self, frame: SensorFrame) -> SensorFrame:
        if self.state is None:
            self.state = np.zeros_like(frame.grid)
        self.state = self.alpha * frame.grid + (1.0 - self.alpha) * self.state
        return SensorFrame(grid=self.state.copy(), timestamp=frame.timestamp,
                           units=frame.units)


def lowpass_iir(frames, cutoff_hz: float, sample_hz: float):
    """Stream version of the low-pass; yields filtered frames in order."""
    filt = IIRLowpass(cutoff_hz, sample_hz)
    for frame in frames:
        yield filt.apply(frame)


def median3x3(frame: SensorFrame) -> SensorFrame:
    """3x3 median with replicate border padding."""
    h, w = frame.grid.shape
    if h < 3 or w < 3:
        raise SensorError("median filter needs at least a 3x3 frame")
    out = median_filter(frame.grid, size=3, mode="nearest")
    return SensorFrame(grid=out, timestamp=frame.timestamp, units=frame.units)


def tile_frames(patches, layout: tuple[int, int],
                sample_period: float = 1.0 / DEFAULT_SAMPLE_HZ) -> SensorFrame:
    """Block-concatenate timestamp-aligned patches into one frame."""
    rows, cols = layout
    if rows * cols != len(patches):
        raise SensorError(f"layout {layout} does not match {len(patches)} patches")
    shapes = {p.grid.shape for p in patches}
    if len(shapes) != 1:
        raise SensorError("patch dimensions differ")
    stamps = [p.timestamp for p in patches]
    if max(stamps) - min(stamps) > sample_period:
        raise SensorError("patch timestamps skewed by more than one sample period")
    grid = np.block([[patches[r * cols + c].grid for c in range(cols)]
                     for r in range(rows)])
    return SensorFrame(grid=grid, timestamp=max(stamps), units=patches[0].units)


# ---------------------------------------------------------------------------
# Motion sequences


@dataclass
class MotionSequence:
    """Time-ordered (sensor frame, state, ground-truth displacement) triples."""

    frames: list                      # normalized SensorFrames
    states: list                      # DeformationStates
    gt: np.ndarray                    # [T, N, 3] f32 per-Gaussian displacements
    geometry_id: str
    mode: str
    sample_hz: float
    labels: np.ndarray | None = None  # [T, Nc, 3] cage labels once extracted
    node_support: np.ndarray | None = field(default=None)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        t = len(self.frames)
        if len(self.states) != t or self.gt.shape[0] != t:
            raise SensorError("sequence lists must share one length")
        stamps = np.array([f.timestamp for f in self.frames])
        if (np.diff(stamps) <= 0).any():
            raise SensorError("timestamps must strictly increase")


def generate_dataset(scene: GaussianScene, mode: str, n_axes: int,
                     n_keyposes: int, n_interp: int, seed: int,
                     magnitude_max: float, *,
                     magnitude_scales=(1.0,),
                     axis_angles=None,
                     noise_std: float = 0.0,
                     sample_hz: float = DEFAULT_SAMPLE_HZ,
                     shape=(10, 10),
                     geometry_id: str = "object",
                     gauge_alpha: float = GAUGE_ALPHA,
                     gauge_thickness: float = GAUGE_THICKNESS,
                     twist_gauge: float = TWIST_GAUGE) -> list[MotionSequence]:
    """Key poses ramped over the actuation range with linear in-betweens.

    One sequence per (axis orientation, magnitude scale). Deformation states
    are independent of the seed; only the sensor noise realization changes
    with it.
    """
    if mode not in MODES:
        raise SensorError(f"unknown mode {mode!r}")
    if n_keyposes < 2:
        raise SensorError("need at least two key poses")
    if axis_angles is None:
        axis_angles = [i * np.pi / n_axes for i in range(n_axes)]
    table = CalibrationTable.default(shape)
    sequences = []
    for ax_i, axis_angle in enumerate(axis_angles):
        for sc_i, scale in enumerate(magnitude_scales):
            keys = np.linspace(0.0, magnitude_max * scale, n_keyposes)
            mags = [keys[0]]
            for k0, k1 in zip(keys[:-1], keys[1:]):
                steps = np.linspace(k0, k1, n_interp + 2)[1:]
                mags.extend(steps.tolist())
            total = len(mags)
            frames, states = [], []
            gt = np.zeros((total, len(scene), 3), dtype=np.float32)
            base_seed = (seed * 7919 + ax_i * 131 + sc_i * 17) & 0x7FFFFFFF
            for t, mag in enumerate(mags):
                state = DeformationState(mode=mode, magnitude=float(mag),
                                         axis_angle=float(axis_angle),
                                         phase=t / max(total - 1, 1))
                raw = simulate_resistance(state, noise_std, base_seed + t,
                                          shape=shape, table=table,
                                          gauge_alpha=gauge_alpha,
                                          gauge_thickness=gauge_thickness,
                                          twist_gauge=twist_gauge,
                                          timestamp=t / sample_hz)
                frames.append(calibrate(raw, table))
                states.append(state)
                gt[t] = oracle_deform(scene, state).astype(np.float32)
            seq = MotionSequence(frames=frames, states=states, gt=gt,
                                 geometry_id=geometry_id, mode=mode,
                                 sample_hz=sample_hz, seed=seed)
            seq.validate()
            sequences.append(seq)
    return sequences


def filter_chain(frames, cutoff_hz: float = DEFAULT_CUTOFF_HZ,
                 sample_hz: float = DEFAULT_SAMPLE_HZ):
    """Temporal-then-spatial denoising applied to normalized frames."""
    for frame in lowpass_iir(frames, cutoff_hz, sample_hz):
        yield median3x3(frame)


# ---------------------------------------------------------------------------
# On-disk motion sequences: meta + frames.bin + states.bin + gt.bin
# (+ labels.bin / node_support.bin after label extraction, + scene.cspl)


def save_sequence(seq: MotionSequence, dirpath, scene: GaussianScene | None = None) -> None:
    os.makedirs(dirpath, exist_ok=True)
    t = len(seq)
    h, w = seq.frames[0].grid.shape
    with open(os.path.join(dirpath, "meta"), "w") as fh:
        fh.write(f"geometry_id {seq.geometry_id}\n")
        fh.write(f"mode {seq.mode}\n")
        fh.write(f"sample_hz {seq.sample_hz:.17g}\n")
        fh.write(f"n_frames {t}\n")
        fh.write(f"grid_h {h}\n")
        fh.write(f"grid_w {w}\n")
        fh.write(f"n_gaussians {seq.gt.shape[1]}\n")
        fh.write(f"seed {seq.seed}\n")
        fh.write("units relative\n")
    with open(os.path.join(dirpath, "frames.bin"), "wb") as fh:
        for frame in seq.frames:
            fh.write(frame.grid.astype("<f4").tobytes())
            fh.write(struct.pack("<d", frame.timestamp))
    with open(os.path.join(dirpath, "states.bin"), "wb") as fh:
        for st in seq.states:
            fh.write(struct.pack("<3d", st.magnitude, st.axis_angle, st.phase))
    with open(os.path.join(dirpath, "gt.bin"), "wb") as fh:
        fh.write(seq.gt.astype("<f4").tobytes())
    if seq.labels is not None:
        save_labels(seq, dirpath)
    if scene is not None:
        save_scene(scene, os.path.join(dirpath, "scene.cspl"))


def save_labels(seq: MotionSequence, dirpath) -> None:
    if seq.labels is None:
        raise SensorError("sequence has no labels to save")
    with open(os.path.join(dirpath, "labels.bin"), "wb") as fh:
        fh.write(seq.labels.astype("<f4").tobytes())
    if seq.node_support is not None:
        with open(os.path.join(dirpath, "node_support.bin"), "wb") as fh:
            fh.write(seq.node_support.astype("<f4").tobytes())


def load_sequence(dirpath) -> MotionSequence:
    meta = {}
    with open(os.path.join(dirpath, "meta")) as fh:
        for line in fh:
            key, _, value = line.strip().partition(" ")
            meta[key] = value
    t = int(meta["n_frames"])
    h, w = int(meta["grid_h"]), int(meta["grid_w"])
    n = int(meta["n_gaussians"])
    rec_bytes = h * w * 4 + 8
    frames = []
    with open(os.path.join(dirpath, "frames.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != t * rec_bytes:
        raise SensorError("frames.bin size does not match meta")
    for i in range(t):
        off = i * rec_bytes
        grid = np.frombuffer(blob, dtype="<f4", count=h * w, offset=off)
        stamp = struct.unpack_from("<d", blob, off + h * w * 4)[0]
        frames.append(SensorFrame(grid=grid.reshape(h, w).astype(np.float64),
                                  timestamp=stamp, units=meta.get("units", "relative")))
    states = []
    with open(os.path.join(dirpath, "states.bin"), "rb") as fh:
        sblob = fh.read()
    for i in range(t):
        mag, ang, phase = struct.unpack_from("<3d", sblob, i * 24)
        states.append(DeformationState(mode=meta["mode"], magnitude=mag,
                                       axis_angle=ang, phase=phase))
    gt_path = os.path.join(dirpath, "gt.bin")
    if not os.path.exists(gt_path):
        raise SensorError(f"missing gt.bin in {dirpath}")
    gt = np.fromfile(gt_path, dtype="<f4").reshape(t, n, 3)
    labels = support = None
    lab_path = os.path.join(dirpath, "labels.bin")
    if os.path.exists(lab_path):
        labels = np.fromfile(lab_path, dtype="<f4")
        labels = labels.reshape(t, -1, 3)
        sup_path = os.path.join(dirpath, "node_support.bin")
        if os.path.exists(sup_path):
            support = np.fromfile(sup_path, dtype="<f4")
    seq = MotionSequence(frames=frames, states=states, gt=gt,
                         geometry_id=meta["geometry_id"], mode=meta["mode"],
                         sample_hz=float(meta["sample_hz"]), labels=labels,
                         node_support=support, seed=int(meta.get("seed", 0)))
    seq.validate()
    return seq


def load_sequence_scene(dirpath) -> GaussianScene:
    return load_scene(os.path.join(dirpath, "scene.cspl"))
