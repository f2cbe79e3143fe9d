"""Minimal reverse-mode autodiff over numpy arrays.

Define-by-run tape of float tensors covering exactly the operations the cage
deformer needs: broadcasting arithmetic, matmul, strided 3x3 convolution,
ELU / LeakyReLU, row gather/broadcast, fused graph attention and neighbor
mean over fixed-degree padded adjacency, row softmax, concatenation, and
sum/mean reductions. Full reductions accumulate in float64 before casting
back to the tensor dtype. Graph aggregations recompute their edge-wide
temporaries during backward instead of storing them.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, seed=None) -> None:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += g.astype(parent.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor{self.shape} grad={'set' if self.grad is not None else 'none'}"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast to reach g.shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data + b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g, a.shape),
                                      _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data - b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g, a.shape),
                                      _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data * b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                      _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return Tensor((a.data * c).astype(a.dtype), parents=(a,),
                  backward=lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data @ b.data, parents=(a, b),
                  backward=lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return Tensor(a.data.reshape(shape), parents=(a,),
                  backward=lambda g: (g.reshape(old),))


def concat(parts, axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis),
                  parents=tuple(parts), backward=backward)


def elu(a) -> Tensor:
    a = _as_tensor(a)
    neg = np.expm1(np.minimum(a.data, 0.0))
    out_data = np.where(a.data > 0, a.data, neg).astype(a.dtype)
    dmask = np.where(a.data > 0, 1.0, neg + 1.0).astype(a.dtype)
    return Tensor(out_data, parents=(a,), backward=lambda g: (g * dmask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    dmask = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return Tensor((a.data * dmask).astype(a.dtype), parents=(a,),
                  backward=lambda g: (g * dmask,))


def gather_rows(a, idx) -> Tensor:
    """Row selection with scatter-add backward (idx may repeat)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], parents=(a,), backward=backward)


def broadcast_rows(a, n_rep: int) -> Tensor:
    """Repeat each of the B rows n_rep times: [B,F] -> [B*n_rep,F]."""
    a = _as_tensor(a)
    b, f = a.shape

    def backward(g):
        return (g.reshape(b, n_rep, f).sum(axis=1, dtype=np.float64).astype(a.dtype),)

    return Tensor(np.repeat(a.data, n_rep, axis=0), parents=(a,), backward=backward)


def row_softmax(scores, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over axis 1 of [n,K] scores plus an optional constant bias
    (large negative bias entries mask padded slots)."""
    s = _as_tensor(scores)
    e = s.data if bias is None else s.data + bias
    m = e.max(axis=1, keepdims=True)
    z = np.exp((e - m).astype(np.float64))
    alpha = (z / z.sum(axis=1, keepdims=True)).astype(s.dtype)

    def backward(g):
        dot = (g * alpha).sum(axis=1, keepdims=True, dtype=np.float64)
        return ((alpha * (g - dot)).astype(s.dtype),)

    return Tensor(alpha, parents=(s,), backward=backward)


def attention_alpha(s_src_data: np.ndarray, s_dst_data: np.ndarray, gs):
    """Attention coefficients [n,K] (numpy only; shared by op and tests)."""
    e_pre = s_src_data.ravel()[gs.in_src] + s_dst_data
    leak = np.where(e_pre > 0, 1.0, 0.2).astype(e_pre.dtype)
    e = e_pre * leak + gs.in_bias
    m = e.max(axis=1, keepdims=True)
    z = np.exp((e - m).astype(np.float64))
    alpha = (z / z.sum(axis=1, keepdims=True)).astype(s_src_data.dtype)
    return alpha, leak


def gat_attention(proj, s_src, s_dst, gs) -> Tensor:
    """Fused graph-attention head over a padded fixed-degree adjacency.

    proj: [n,F] projected node features; s_src, s_dst: [n,1] score halves.
    Edge scores LeakyReLU(0.2)(s_src[src] + s_dst[dst]) are softmaxed over
    each node's in-neighborhood (self-loop included, padded slots masked),
    then out[d] = sum_k alpha[d,k] proj[in_src[d,k]]. Edge-wide temporaries
    are recomputed in backward instead of stored.
    """
    proj, s_src, s_dst = _as_tensor(proj), _as_tensor(s_src), _as_tensor(s_dst)
    alpha, leak = attention_alpha(s_src.data, s_dst.data, gs)
    out = _slot_weighted_sum(alpha, proj.data, gs.in_src)

    def backward(g):
        dalpha = _slot_dots(g, proj.data, gs.in_src)
        dot = (dalpha * alpha).sum(axis=1, keepdims=True, dtype=np.float64)
        ds = (alpha * (dalpha - dot)).astype(proj.dtype) * leak
        d_sdst = ds.sum(axis=1, keepdims=True, dtype=np.float64)
        d_ssrc = (ds.ravel()[gs.out_pos] * gs.out_mask).sum(
            axis=1, keepdims=True, dtype=np.float64)
        alpha_out = alpha.ravel()[gs.out_pos] * gs.out_mask
        dproj = _slot_weighted_sum(alpha_out, g, gs.out_dst)
        return (dproj.astype(proj.dtype), d_ssrc.astype(s_src.dtype),
                d_sdst.astype(s_dst.dtype))

    return Tensor(out.astype(proj.dtype), parents=(proj, s_src, s_dst),
                  backward=backward)


def _slot_weighted_sum(w: np.ndarray, values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """sum_k w[:,k,None] * values[idx[:,k]] without a [n,K,F] temporary."""
    out = w[:, 0:1] * values[idx[:, 0]]
    for k in range(1, idx.shape[1]):
        out += w[:, k:k + 1] * values[idx[:, k]]
    return out


def _slot_dots(g: np.ndarray, values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """[n,K] of <g[n], values[idx[n,k]]> row dots."""
    n, k = idx.shape
    out = np.empty((n, k), dtype=np.float32)
    for j in range(k):
        out[:, j] = np.einsum("nf,nf->n", g, values[idx[:, j]])
    return out


def neighbor_mean(x, gs) -> Tensor:
    """Mean over true neighbors via the padded no-self-loop adjacency."""
    x = _as_tensor(x)
    out = _slot_weighted_sum(gs.nb_in_w, x.data, gs.nb_in_src)

    def backward(g):
        dx = _slot_weighted_sum(gs.nb_out_w, g, gs.nb_out_dst)
        return (dx.astype(x.dtype),)

    return Tensor(out.astype(x.dtype), parents=(x,), backward=backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    total = a.data.sum(dtype=np.float64)
    return Tensor(np.asarray(total, dtype=a.dtype), parents=(a,),
                  backward=lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    total = a.data.sum(dtype=np.float64) / n
    return Tensor(np.asarray(total, dtype=a.dtype), parents=(a,),
                  backward=lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),))


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, w, b, stride: int = 2, pad: int = 1) -> Tensor:
    """3x3 convolution on [B,C,H,W] with [O,C,3,3] weights and [O] bias."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    bsz, cin, h, win = x.shape
    cout, _, kh, kw = w.shape
    xp = _pad_hw(x.data, pad)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (win + 2 * pad - kw) // stride + 1
    # im2col from kh*kw shifted views
    cols = np.empty((bsz, cin * kh * kw, ho * wo), dtype=x.dtype)
    k = 0
    for di in range(kh):
        for dj in range(kw):
            view = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            cols[:, k * cin:(k + 1) * cin, :] = view.reshape(bsz, cin, ho * wo)
            k += 1
    wflat = np.empty((cout, cin * kh * kw), dtype=w.dtype)
    k = 0
    for di in range(kh):
        for dj in range(kw):
            wflat[:, k * cin:(k + 1) * cin] = w.data[:, :, di, dj]
            k += 1
    out = np.einsum("of,bfp->bop", wflat, cols) + b.data[None, :, None]
    out = out.reshape(bsz, cout, ho, wo).astype(x.dtype)

    def backward(g):
        gm = g.reshape(bsz, cout, ho * wo)
        dwflat = np.einsum("bop,bfp->of", gm, cols)
        dw = np.empty_like(w.data)
        kk = 0
        for di in range(kh):
            for dj in range(kw):
                dw[:, :, di, dj] = dwflat[:, kk * cin:(kk + 1) * cin]
                kk += 1
        db = gm.sum(axis=(0, 2), dtype=np.float64).astype(b.dtype)
        dcols = np.einsum("of,bop->bfp", wflat, gm)
        dxp = np.zeros_like(xp)
        kk = 0
        for di in range(kh):
            for dj in range(kw):
                view = dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
                view += dcols[:, kk * cin:(kk + 1) * cin, :].reshape(bsz, cin, ho, wo)
                kk += 1
        dx = dxp[:, :, pad:pad + h, pad:pad + win] if pad else dxp
        return (dx.astype(x.dtype), dw.astype(w.dtype), db)

    return Tensor(out, parents=(x, w, b), backward=backward)
