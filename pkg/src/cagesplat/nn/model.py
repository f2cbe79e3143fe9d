"""Sensor-to-cage deformation network.

A small conv encoder turns the filtered tactile grid into a feature vector;
a six-band sinusoidal embedding of normalized time is concatenated; the fused
vector is broadcast to every cage node together with the node's normalized
rest coordinates and refined by two multi-head graph-attention layers, one
neighborhood-mean GraphConv, and an MLP projecting to per-node 3D offsets.

The network works in cage-normalized units: predictions are multiplied by the
cage's largest extent to produce meters, so a model trained on one geometry
transfers to another of a different size.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..cage import CageDisplacementField, CageGrid
from . import autodiff as ad
from .autodiff import Tensor
from .layers import Affine, Conv3x3, GatLayer, GraphConv, build_graph_structure

CHECKPOINT_MAGIC = b"CDNN"
CHECKPOINT_VERSION = 1
TIME_BANDS = 6


class ModelError(ValueError):
    pass


def time_embedding(t_norm: float) -> np.ndarray:
    """Interleaved [sin(2^b pi t), cos(2^b pi t)] for b = 0..5."""
    t = float(t_norm)
    if not 0.0 <= t <= 1.0:
        warnings.warn(f"t_norm {t} outside [0,1], clamping", stacklevel=2)
        t = min(max(t, 0.0), 1.0)
    out = np.empty(2 * TIME_BANDS, dtype=np.float32)
    for b in range(TIME_BANDS):
        w = (2.0 ** b) * np.pi * t
        out[2 * b] = np.sin(w)
        out[2 * b + 1] = np.cos(w)
    return out


def cage_scale(cage: CageGrid) -> float:
    """Normalization scale: largest extent of the cage's node bounding box."""
    extent = cage.nodes.max(axis=0) - cage.nodes.min(axis=0)
    return float(max(extent.max(), 1e-12))


def _conv_out(h: int, stride: int = 2, pad: int = 1, k: int = 3) -> int:
    return (h + 2 * pad - k) // stride + 1


@dataclass
class DeformerModel:
    grid_h: int
    grid_w: int
    cage_dims: tuple[int, int, int]
    n_nodes: int
    heads: int = 4
    hidden: int = 256
    feat_dim: int = 128
    head_hidden: int = 128
    head_init: str = "zeros"          # "zeros" | "random"
    rng_seed: int = 0
    conv1: Conv3x3 = field(default=None, repr=False)
    conv2: Conv3x3 = field(default=None, repr=False)
    enc_fc: Affine = field(default=None, repr=False)
    gat1: GatLayer = field(default=None, repr=False)
    gat2: GatLayer = field(default=None, repr=False)
    gconv: GraphConv = field(default=None, repr=False)
    head1: Affine = field(default=None, repr=False)
    head2: Affine = field(default=None, repr=False)
    rng: np.random.Generator = field(default=None, repr=False)
    _graph_cache: dict = field(default_factory=dict, repr=False)

    @property
    def node_feat_dim(self) -> int:
        return self.feat_dim + 2 * TIME_BANDS + 3

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.conv1.params("conv1"))
        out.update(self.conv2.params("conv2"))
        out.update(self.enc_fc.params("enc_fc"))
        out.update(self.gat1.params("gat1"))
        out.update(self.gat2.params("gat2"))
        out.update(self.gconv.params("gconv"))
        out.update(self.head1.params("head1"))
        out.update(self.head2.params("head2"))
        return out

    def graph(self, cage: CageGrid, batch: int):
        key = (id(cage), batch)
        if key not in self._graph_cache:
            if cage.n_nodes != self.n_nodes:
                raise ModelError(
                    f"model built for {self.n_nodes} cage nodes, got {cage.n_nodes}")
            self._graph_cache[key] = (
                build_graph_structure(cage.edges, cage.n_nodes, batch),
                cage.normalized_nodes().astype(np.float32),
            )
        return self._graph_cache[key]


def build_model(grid_shape, cage: CageGrid, seed: int = 0, heads: int = 4,
                hidden: int = 256, feat_dim: int = 128, head_hidden: int = 128,
                head_init: str = "zeros") -> DeformerModel:
    grid_h, grid_w = grid_shape
    model = DeformerModel(grid_h=grid_h, grid_w=grid_w, cage_dims=cage.dims,
                          n_nodes=cage.n_nodes, heads=heads, hidden=hidden,
                          feat_dim=feat_dim, head_hidden=head_hidden,
                          head_init=head_init, rng_seed=seed)
    _init_layers(model)
    return model


def _init_layers(model: DeformerModel) -> None:
    rng = np.random.default_rng(model.rng_seed)
    h2 = _conv_out(_conv_out(model.grid_h))
    w2 = _conv_out(_conv_out(model.grid_w))
    model.conv1 = Conv3x3(rng, 1, 16)
    model.conv2 = Conv3x3(rng, 16, 32)
    model.enc_fc = Affine(rng, 32 * h2 * w2, model.feat_dim)
    if model.hidden % model.heads:
        raise ModelError("hidden width must divide evenly into heads")
    model.gat1 = GatLayer(rng, model.node_feat_dim,
                          model.hidden // model.heads, model.heads, concat=True)
    model.gat2 = GatLayer(rng, model.hidden,
                          model.hidden // model.heads, model.heads, concat=True)
    model.gconv = GraphConv(rng, model.hidden, model.hidden)
    model.head1 = Affine(rng, model.hidden, model.head_hidden)
    model.head2 = Affine(rng, model.head_hidden, 3, zero=model.head_init == "zeros")
    if model.head_init == "random":
        model.head2.w = ad.parameter(rng.normal(0.0, 0.05, size=(model.head_hidden, 3)))
        model.head2.b = ad.parameter(np.zeros(3, dtype=np.float32))
    model.rng = rng


def encode(model: DeformerModel, frames: np.ndarray) -> Tensor:
    """[B,H,W] filtered normalized grids -> [B, feat_dim] features."""
    b = frames.shape[0]
    x = Tensor(frames.reshape(b, 1, model.grid_h, model.grid_w).astype(np.float32))
    x = ad.elu(model.conv1(x))
    x = ad.elu(model.conv2(x))
    x = ad.reshape(x, (b, -1))
    return ad.elu(model.enc_fc(x))


def forward_batch(model: DeformerModel, frames: np.ndarray, t_norms,
                  cage: CageGrid) -> Tensor:
    """Cage offsets for a batch of frames, in cage-normalized units.

    Returns a Tensor of shape [B * n_nodes, 3].
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 2:
        frames = frames[None]
    b = frames.shape[0]
    if frames.shape[1:] != (model.grid_h, model.grid_w):
        raise ModelError(
            f"expected {model.grid_h}x{model.grid_w} frames, got {frames.shape[1:]}")
    gs, pos = model.graph(cage, b)
    feat = encode(model, frames)                                  # [B, F]
    emb = np.stack([time_embedding(t) for t in np.atleast_1d(t_norms)])
    fused = ad.concat([feat, Tensor(emb.astype(np.float32))], axis=1)
    n = model.n_nodes
    fused_nodes = ad.broadcast_rows(fused, n)
    node_in = ad.concat([fused_nodes, Tensor(np.tile(pos, (b, 1)))], axis=1)
    h = ad.elu(model.gat1(node_in, gs))
    h = ad.elu(model.gat2(h, gs))
    h = ad.elu(model.gconv(h, gs))
    h = ad.elu(model.head1(h))
    return model.head2(h)                                         # [B*n, 3]


def forward(model: DeformerModel, frame: np.ndarray, t_norm: float,
            cage: CageGrid) -> CageDisplacementField:
    """Single-frame inference; offsets are in meters (object frame)."""
    out = forward_batch(model, np.asarray(frame)[None], [t_norm], cage)
    offsets = out.data.astype(np.float64) * cage_scale(cage)
    field_out = CageDisplacementField(offsets=offsets)
    field_out.validate()
    return field_out


def deformer_loss(pred: Tensor, gt, pred_prev=None, lambda_smooth: float = 0.0,
                  node_weights=None) -> Tensor:
    """Mean per-node squared offset error plus temporal smoothness.

    pred, gt: [N,3]; pred_prev: [N,3] or None (first frame skips the
    smoothness term); node_weights: optional [N,1] per-node multipliers
    (regression term only), normalized by their sum instead of N.
    """
    gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=np.float32))
    if pred.shape != gt_t.shape:
        raise ModelError(f"loss shape mismatch {pred.shape} vs {gt_t.shape}")
    n = pred.shape[0]
    d = ad.sub(pred, gt_t)
    d2 = ad.mul(d, d)
    if node_weights is not None:
        w = node_weights if isinstance(node_weights, Tensor) else Tensor(
            np.asarray(node_weights, dtype=np.float32).reshape(-1, 1))
        d2 = ad.mul(d2, w)
        denom = float(w.data.sum())
        if denom <= 0:
            raise ModelError("node weights sum to zero")
    else:
        denom = float(n)
    loss = ad.scale(ad.sum_all(d2), 1.0 / denom)
    if pred_prev is not None and lambda_smooth > 0.0:
        prev = pred_prev if isinstance(pred_prev, Tensor) else Tensor(
            np.asarray(pred_prev, dtype=np.float32))
        if prev.shape != pred.shape:
            raise ModelError("pred_prev shape mismatch")
        ds = ad.sub(pred, prev)
        loss = ad.add(loss, ad.scale(ad.sum_all(ad.mul(ds, ds)),
                                     lambda_smooth / float(n)))
    return loss


@dataclass
class EmaState:
    beta: float
    smoothed: CageDisplacementField | None = None

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ModelError("EMA beta must lie in [0, 1)")


def infer_smoothed(model: DeformerModel, frame, t_norm: float, cage: CageGrid,
                   ema: EmaState) -> CageDisplacementField:
    raw = forward(model, frame, t_norm, cage)
    if ema.smoothed is None or ema.beta == 0.0:
        ema.smoothed = raw
    else:
        ema.smoothed = CageDisplacementField(
            offsets=ema.beta * ema.smoothed.offsets + (1.0 - ema.beta) * raw.offsets,
            timestamp=raw.timestamp)
    return ema.smoothed


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, JSON header, named f32 parameter blocks


def _arch_header(model: DeformerModel) -> dict:
    return {
        "kind": "cage_deformer",
        "grid_h": model.grid_h, "grid_w": model.grid_w,
        "cage_dims": list(model.cage_dims), "n_nodes": model.n_nodes,
        "heads": model.heads, "hidden": model.hidden,
        "feat_dim": model.feat_dim, "head_hidden": model.head_hidden,
        "head_init": model.head_init, "rng_seed": model.rng_seed,
    }


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bg": st["bit_generator"],
            "state": str(st["state"]["state"]), "inc": str(st["state"]["inc"]),
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def _restore_rng(blob: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": blob["bg"],
        "state": {"state": int(blob["state"]), "inc": int(blob["inc"])},
        "has_uint32": blob["has_uint32"], "uinteger": blob["uinteger"],
    }
    return rng


def save_checkpoint(model, path, extra_blocks: dict | None = None,
                    meta: dict | None = None) -> None:
    header = _arch_header(model)
    header["rng_state"] = _rng_state(model.rng)
    if meta:
        header["meta"] = meta
    params = dict(model.params())
    if extra_blocks:
        params = {**params, **{k: v for k, v in extra_blocks.items()}}
    header["param_names"] = list(params.keys())
    hjson = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hjson)))
        fh.write(hjson)
        for name, tensor in params.items():
            data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict]:
    """(header, name -> f32 array); raises on truncation or bad magic."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ModelError("not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    off = 12
    if off + hlen > len(blob):
        raise ModelError("truncated checkpoint header")
    header = json.loads(blob[off:off + hlen])
    off += hlen
    arrays = {}
    for name in header["param_names"]:
        try:
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            got = blob[off:off + nlen].decode()
            off += nlen
            if got != name:
                raise ModelError(f"parameter order mismatch: {got} != {name}")
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            off += 4 * count
            arrays[name] = data.reshape(shape).copy()
        except (struct.error, ValueError) as exc:
            raise ModelError(f"truncated checkpoint at block {name!r}") from exc
    return header, arrays


def load_checkpoint(path, expect_cage: CageGrid | None = None) -> DeformerModel:
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "cage_deformer":
        raise ModelError(f"checkpoint holds a {header.get('kind')} model")
    model = DeformerModel(
        grid_h=header["grid_h"], grid_w=header["grid_w"],
        cage_dims=tuple(header["cage_dims"]), n_nodes=header["n_nodes"],
        heads=header["heads"], hidden=header["hidden"],
        feat_dim=header["feat_dim"], head_hidden=header["head_hidden"],
        head_init=header["head_init"], rng_seed=header["rng_seed"])
    _init_layers(model)
    if expect_cage is not None and expect_cage.n_nodes != model.n_nodes:
        raise ModelError(
            f"checkpoint built for {model.n_nodes} nodes, cage has {expect_cage.n_nodes}")
    for name, tensor in model.params().items():
        if name not in arrays:
            raise ModelError(f"checkpoint missing parameter {name}")
        if arrays[name].shape != tensor.data.shape:
            raise ModelError(f"parameter {name} shape mismatch")
        tensor.data = arrays[name].astype(np.float32)
    model.rng = _restore_rng(header["rng_state"])
    return model
