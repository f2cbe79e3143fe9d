"""Ablation variant: direct per-Gaussian displacement regression.

Shares the conv encoder and time embedding with the cage model but bypasses
the cage entirely: a shared MLP maps [sensor feature | time | normalized rest
position] to a 3D displacement per Gaussian. Predictions are in units of the
scene's largest padded extent, mirroring the cage model's normalization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..scene import GaussianScene
from . import autodiff as ad
from .autodiff import Tensor
from .layers import Affine, Conv3x3
from .model import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    TIME_BANDS,
    ModelError,
    _conv_out,
    _restore_rng,
    _rng_state,
    read_checkpoint,
    time_embedding,
)


def scene_scale(scene: GaussianScene, padding: float = 0.05) -> float:
    lo, hi = scene.bounds
    extent = (hi - lo) * (1.0 + 2.0 * padding)
    return float(max(extent.max(), 1e-12))


def normalized_points(scene: GaussianScene) -> np.ndarray:
    lo, hi = scene.bounds
    extent = np.where(hi - lo > 1e-30, hi - lo, 1.0)
    return ((scene.centers - lo) / extent).astype(np.float32)


@dataclass
class DirectRegressor:
    grid_h: int
    grid_w: int
    feat_dim: int = 128
    hidden: int = 128
    rng_seed: int = 0
    conv1: Conv3x3 = field(default=None, repr=False)
    conv2: Conv3x3 = field(default=None, repr=False)
    enc_fc: Affine = field(default=None, repr=False)
    fc1: Affine = field(default=None, repr=False)
    fc2: Affine = field(default=None, repr=False)
    fc3: Affine = field(default=None, repr=False)
    rng: np.random.Generator = field(default=None, repr=False)

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.conv1.params("conv1"))
        out.update(self.conv2.params("conv2"))
        out.update(self.enc_fc.params("enc_fc"))
        out.update(self.fc1.params("fc1"))
        out.update(self.fc2.params("fc2"))
        out.update(self.fc3.params("fc3"))
        return out


def build_direct_model(grid_shape, seed: int = 0, feat_dim: int = 128,
                       hidden: int = 128) -> DirectRegressor:
    model = DirectRegressor(grid_h=grid_shape[0], grid_w=grid_shape[1],
                            feat_dim=feat_dim, hidden=hidden, rng_seed=seed)
    _init_direct(model)
    return model


def _init_direct(model: DirectRegressor) -> None:
    rng = np.random.default_rng(model.rng_seed)
    h2 = _conv_out(_conv_out(model.grid_h))
    w2 = _conv_out(_conv_out(model.grid_w))
    model.conv1 = Conv3x3(rng, 1, 16)
    model.conv2 = Conv3x3(rng, 16, 32)
    model.enc_fc = Affine(rng, 32 * h2 * w2, model.feat_dim)
    n_in = model.feat_dim + 2 * TIME_BANDS + 3
    model.fc1 = Affine(rng, n_in, model.hidden)
    model.fc2 = Affine(rng, model.hidden, model.hidden)
    model.fc3 = Affine(rng, model.hidden, 3, zero=True)
    model.rng = rng


def forward_direct(model: DirectRegressor, frames: np.ndarray, t_norms,
                   points_norm: np.ndarray) -> Tensor:
    """[B*P, 3] displacements in scene-normalized units."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 2:
        frames = frames[None]
    b = frames.shape[0]
    p = points_norm.shape[0]
    x = Tensor(frames.reshape(b, 1, model.grid_h, model.grid_w))
    x = ad.elu(model.conv1(x))
    x = ad.elu(model.conv2(x))
    x = ad.reshape(x, (b, -1))
    feat = ad.elu(model.enc_fc(x))
    emb = np.stack([time_embedding(t) for t in np.atleast_1d(t_norms)])
    fused = ad.concat([feat, Tensor(emb.astype(np.float32))], axis=1)
    rows = ad.broadcast_rows(fused, p)
    pts = Tensor(np.tile(points_norm.astype(np.float32), (b, 1)))
    h = ad.concat([rows, pts], axis=1)
    h = ad.elu(model.fc1(h))
    h = ad.elu(model.fc2(h))
    return model.fc3(h)


def predict_displacements(model: DirectRegressor, frame: np.ndarray,
                          t_norm: float, scene: GaussianScene) -> np.ndarray:
    """[N,3] meters for one frame."""
    out = forward_direct(model, np.asarray(frame)[None], [t_norm],
                         normalized_points(scene))
    return out.data.astype(np.float64) * scene_scale(scene)


def save_direct_checkpoint(model: DirectRegressor, path, meta: dict | None = None) -> None:
    header = {
        "kind": "direct_regressor",
        "grid_h": model.grid_h, "grid_w": model.grid_w,
        "feat_dim": model.feat_dim, "hidden": model.hidden,
        "rng_seed": model.rng_seed, "rng_state": _rng_state(model.rng),
    }
    if meta:
        header["meta"] = meta
    params = model.params()
    header["param_names"] = list(params.keys())
    hjson = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hjson)))
        fh.write(hjson)
        for name, tensor in params.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            fh.write(tensor.data.astype("<f4").tobytes())


def load_direct_checkpoint(path) -> DirectRegressor:
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "direct_regressor":
        raise ModelError(f"checkpoint holds a {header.get('kind')} model")
    model = DirectRegressor(grid_h=header["grid_h"], grid_w=header["grid_w"],
                            feat_dim=header["feat_dim"], hidden=header["hidden"],
                            rng_seed=header["rng_seed"])
    _init_direct(model)
    for name, tensor in model.params().items():
        if name not in arrays:
            raise ModelError(f"checkpoint missing parameter {name}")
        tensor.data = arrays[name].astype(np.float32)
    model.rng = _restore_rng(header["rng_state"])
    return model
