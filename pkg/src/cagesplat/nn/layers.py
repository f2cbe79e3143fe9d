"""Network building blocks: parameter init, affine, conv encoder, graph
attention, and neighborhood-mean graph convolution over a cage graph.

Cage graphs have bounded degree (6-neighborhood), so adjacency is stored as
fixed-width padded tables: every aggregation is a dense gather + einsum,
which is what keeps the wide attention layers fast under numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_BIAS = -1e9  # additive mask for padded attention slots


def he_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return ad.parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def glorot_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-lim, lim, size=shape))


def zeros_init(shape) -> Tensor:
    return ad.parameter(np.zeros(shape, dtype=np.float32))


@dataclass
class GraphStructure:
    """Fixed-degree padded adjacency of a (batch-replicated) cage graph.

    The attention tables include a self-loop in slot 0; the ``nb_`` tables
    are neighbors-only for the GraphConv mean. ``out_pos`` flat-indexes each
    node's outgoing edges inside the in-edge table so scatter gradients are
    dense sums; padded slots carry zero masks (and -1e9 attention bias).
    """

    n_nodes: int
    in_src: np.ndarray      # [n,K] int64
    in_bias: np.ndarray     # [n,K] f32, 0 real / -1e9 padded
    out_pos: np.ndarray     # [n,K] int64 flat indices into the in-table
    out_dst: np.ndarray     # [n,K] int64
    out_mask: np.ndarray    # [n,K] f32
    nb_in_src: np.ndarray   # [n,Kn] int64
    nb_in_w: np.ndarray     # [n,Kn] f32, mask / neighbor count
    nb_out_dst: np.ndarray  # [n,Kn] int64
    nb_out_w: np.ndarray    # [n,Kn] f32, mask / neighbor count of dst


def _padded_tables(src: np.ndarray, dst: np.ndarray, n: int, width: int,
                   self_loops: bool):
    """in/out fixed-width adjacency tables for directed edges src->dst."""
    k = width + (1 if self_loops else 0)
    in_src = np.zeros((n, k), dtype=np.int64)
    in_mask = np.zeros((n, k), dtype=np.float32)
    in_fill = np.zeros(n, dtype=np.int64)
    if self_loops:
        in_src[:, 0] = np.arange(n)
        in_mask[:, 0] = 1.0
        in_fill[:] = 1
    edge_slot = np.empty(len(src), dtype=np.int64)       # flat in-table index
    for e in range(len(src)):
        d = dst[e]
        slot = in_fill[d]
        in_src[d, slot] = src[e]
        in_mask[d, slot] = 1.0
        edge_slot[e] = d * k + slot
        in_fill[d] = slot + 1
    out_pos = np.zeros((n, k), dtype=np.int64)
    out_dst = np.zeros((n, k), dtype=np.int64)
    out_mask = np.zeros((n, k), dtype=np.float32)
    out_fill = np.zeros(n, dtype=np.int64)
    if self_loops:
        out_pos[:, 0] = np.arange(n) * k                 # self slot
        out_dst[:, 0] = np.arange(n)
        out_mask[:, 0] = 1.0
        out_fill[:] = 1
    for e in range(len(src)):
        s = src[e]
        slot = out_fill[s]
        out_pos[s, slot] = edge_slot[e]
        out_dst[s, slot] = dst[e]
        out_mask[s, slot] = 1.0
        out_fill[s] = slot + 1
    return in_src, in_mask, out_pos, out_dst, out_mask


def build_graph_structure(edges: np.ndarray, n_nodes: int, batch: int = 1) -> GraphStructure:
    src = np.concatenate([edges[:, 0], edges[:, 1]]).astype(np.int64)
    dst = np.concatenate([edges[:, 1], edges[:, 0]]).astype(np.int64)
    deg = np.bincount(dst, minlength=n_nodes)
    width = int(deg.max()) if len(dst) else 0

    in_src, in_mask, out_pos, out_dst, out_mask = _padded_tables(
        src, dst, n_nodes, width, self_loops=True)
    nb_in_src, nb_in_mask, _, nb_out_dst, nb_out_mask = _padded_tables(
        src, dst, n_nodes, width, self_loops=False)
    counts = np.maximum(deg, 1).astype(np.float32)
    nb_in_w = nb_in_mask / counts[:, None]
    nb_out_w = nb_out_mask / np.maximum(counts[nb_out_dst], 1.0)

    def rep(a, off_scale):
        if batch == 1:
            return a
        offs = (np.arange(batch, dtype=np.int64) * off_scale)[:, None, None]
        return (a[None, :, :] + offs).reshape(batch * a.shape[0], a.shape[1])

    def tile(a):
        if batch == 1:
            return a
        return np.tile(a, (batch, 1))

    k = in_src.shape[1]
    kn = nb_in_src.shape[1]
    return GraphStructure(
        n_nodes=n_nodes * batch,
        in_src=rep(in_src, n_nodes),
        in_bias=tile(np.where(in_mask > 0, 0.0, PAD_BIAS).astype(np.float32)),
        out_pos=rep(out_pos, n_nodes * k),
        out_dst=rep(out_dst, n_nodes),
        out_mask=tile(out_mask),
        nb_in_src=rep(nb_in_src, n_nodes),
        nb_in_w=tile(nb_in_w.astype(np.float32)),
        nb_out_dst=rep(nb_out_dst, n_nodes),
        nb_out_w=tile(nb_out_w.astype(np.float32)),
    )


class Affine:
    def __init__(self, rng, n_in: int, n_out: int, zero: bool = False):
        if zero:
            self.w = zeros_init((n_in, n_out))
            self.b = zeros_init((n_out,))
        else:
            self.w = he_init(rng, (n_in, n_out), n_in)
            self.b = zeros_init((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Conv3x3:
    def __init__(self, rng, c_in: int, c_out: int, stride: int = 2):
        self.w = he_init(rng, (c_out, c_in, 3, 3), c_in * 9)
        self.b = zeros_init((c_out,))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=1)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class GatLayer:
    """Multi-head graph attention with LeakyReLU(0.2) scoring.

    Heads are concatenated when ``concat`` is set and averaged otherwise.
    Attention coefficients normalize over each node's in-neighborhood
    (self-loop included).
    """

    def __init__(self, rng, n_in: int, head_dim: int, heads: int, concat: bool):
        self.heads = heads
        self.concat = concat
        self.w = [he_init(rng, (n_in, head_dim), n_in) for _ in range(heads)]
        self.a_src = [glorot_init(rng, (head_dim, 1), head_dim, 1) for _ in range(heads)]
        self.a_dst = [glorot_init(rng, (head_dim, 1), head_dim, 1) for _ in range(heads)]

    def __call__(self, x: Tensor, gs: GraphStructure) -> Tensor:
        outs = []
        for h in range(self.heads):
            proj = ad.matmul(x, self.w[h])                    # [n, d]
            s_src = ad.matmul(proj, self.a_src[h])            # [n, 1]
            s_dst = ad.matmul(proj, self.a_dst[h])
            outs.append(ad.gat_attention(proj, s_src, s_dst, gs))
        if self.concat:
            return ad.concat(outs, axis=1)
        acc = outs[0]
        for o in outs[1:]:
            acc = ad.add(acc, o)
        return ad.scale(acc, 1.0 / self.heads)

    def attention(self, x: Tensor, gs: GraphStructure, head: int = 0) -> np.ndarray:
        """[n,K] attention coefficients of one head (padded slots are 0)."""
        proj = x.data @ self.w[head].data
        alpha, _ = ad.attention_alpha(proj @ self.a_src[head].data,
                                      proj @ self.a_dst[head].data, gs)
        return alpha

    def params(self, prefix: str) -> dict:
        out = {}
        for h in range(self.heads):
            out[f"{prefix}.h{h}.w"] = self.w[h]
            out[f"{prefix}.h{h}.a_src"] = self.a_src[h]
            out[f"{prefix}.h{h}.a_dst"] = self.a_dst[h]
        return out


class GraphConv:
    """h' = W_self h + W_neigh mean_{j in N(i)} h_j + b (neighbors only)."""

    def __init__(self, rng, n_in: int, n_out: int):
        self.w_self = he_init(rng, (n_in, n_out), n_in)
        self.w_neigh = he_init(rng, (n_in, n_out), n_in)
        self.b = zeros_init((n_out,))

    def __call__(self, x: Tensor, gs: GraphStructure) -> Tensor:
        mean = ad.neighbor_mean(x, gs)
        return ad.add(ad.add(ad.matmul(x, self.w_self),
                             ad.matmul(mean, self.w_neigh)), self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w_self": self.w_self, f"{prefix}.w_neigh": self.w_neigh,
                f"{prefix}.b": self.b}
