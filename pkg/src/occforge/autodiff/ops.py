"""Differentiable ops on :class:`Tensor`.

Every op checks its output for NaN/Inf and, when a tape is active and some
input requires gradients, records a backward rule mapping the output
gradient to per-input gradients.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import NonFiniteError, Tensor, active_tape


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite values in output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _make("where", np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), bwd)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make("index", a.data[idx], (a,), bwd)


def scatter_rows(base, rows, values) -> Tensor:
    """Copy of ``base`` with ``base[rows] = values``; ``rows`` must be unique."""
    base, values = as_tensor(base), as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    if np.unique(rows).size != rows.size:
        raise ValueError("scatter_rows: duplicate row indices")
    out = base.data.copy()
    out[rows] = values.data

    def bwd(g):
        gb = g.copy()
        gb[rows] = 0.0
        return gb, g[rows]

    return _make("scatter_rows", out, (base, values), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _make("stack", np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def upsample_nearest(a, factor: int, axes: Sequence[int]) -> Tensor:
    """Repeat each element ``factor`` times along every axis in ``axes``."""
    a = as_tensor(a)
    out = a.data
    for ax in axes:
        out = np.repeat(out, factor, axis=ax)

    def bwd(g):
        for ax in sorted(axes, reverse=True):
            shp = list(g.shape)
            shp[ax:ax + 1] = [shp[ax] // factor, factor]
            g = g.reshape(shp).sum(axis=ax + 1)
        return (g,)

    return _make("upsample_nearest", out, (a,), bwd)


# ---------------------------------------------------------------- normalizers

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NonFiniteError("softmax: non-finite input")
    z = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bwd)


# ---------------------------------------------------------------- sampling

def grid_sample(volume, points) -> Tensor:
    """Multilinear sampling of grouped feature grids with zero padding.

    volume: [G, C, *S] with D spatial axes; points: [G, P, D] normalized so
    column k spans spatial axis k over [0, 1] (grid coordinate p * (n_k - 1)).
    Points with any coordinate outside [0, 1] sample the zero vector.
    Returns [G, P, C].
    """
    volume, points = as_tensor(volume), as_tensor(points)
    V, pts = volume.data, points.data
    G, C = V.shape[:2]
    spatial = V.shape[2:]
    D = len(spatial)
    P = pts.shape[1]
    if pts.shape != (G, P, D):
        raise ValueError(f"grid_sample: points shape {pts.shape} does not match volume {V.shape}")
    valid = ((pts >= 0.0) & (pts <= 1.0)).all(axis=-1)
    scale = np.array([n - 1 for n in spatial], dtype=np.float64)
    coords = np.where(valid[..., None], pts, 0.0) * scale
    lo = np.clip(np.floor(coords).astype(np.int64), 0, np.array(spatial) - 1)
    hi = np.minimum(lo + 1, np.array(spatial) - 1)
    frac = coords - lo
    strides = np.array([int(np.prod(spatial[k + 1:])) for k in range(D)], dtype=np.int64)
    flat = V.reshape(G, C, -1)

    corners = []
    for bits in itertools.product((0, 1), repeat=D):
        b = np.array(bits)
        idx = np.where(b, hi, lo)
        pos = (idx * strides).sum(axis=-1)
        wk = np.where(b, frac, 1.0 - frac)
        feat = np.take_along_axis(flat, pos[:, None, :], axis=2).transpose(0, 2, 1)
        corners.append((b, pos, wk, feat))

    out = np.zeros((G, P, C))
    for _, _, wk, feat in corners:
        out += (wk.prod(axis=-1) * valid)[..., None] * feat

    def bwd(g):
        gV = None
        if volume.requires_grad:
            total = int(np.prod(spatial))
            rows = np.concatenate([(pos + np.arange(G)[:, None] * total).ravel()
                                   for _, pos, _, _ in corners])
            cols = np.tile(np.arange(G * P), len(corners))
            vals = np.concatenate([(wk.prod(axis=-1) * valid).ravel()
                                   for _, _, wk, _ in corners])
            M = sp.csr_matrix((vals, (rows, cols)), shape=(G * total, G * P))
            gV = np.asarray(M @ g.reshape(G * P, C)).reshape(G, total, C)
            gV = gV.transpose(0, 2, 1).reshape(V.shape)
        gP = None
        if points.requires_grad:
            gP = np.zeros_like(pts)
            for b, _, wk, feat in corners:
                proj = (g * feat).sum(axis=-1)
                for k in range(D):
                    others = np.prod(np.delete(wk, k, axis=-1), axis=-1)
                    sign = 1.0 if b[k] else -1.0
                    gP[..., k] += sign * scale[k] * others * proj
            gP *= valid[..., None]
        return gV, gP

    return _make("grid_sample", out, (volume, points), bwd)


def bilinear_sample(feature_map, points) -> Tensor:
    """Sample ``feature_map`` [C, H, W] at normalized (u, v) ``points`` [P, 2].

    u spans the width and v the height; returns [P, C].
    """
    feature_map, points = as_tensor(feature_map), as_tensor(points)
    if feature_map.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("bilinear_sample expects [C,H,W] and [P,2]")
    vu = index(points, (slice(None), [1, 0]))
    out = grid_sample(reshape(feature_map, (1,) + feature_map.shape),
                      reshape(vu, (1,) + vu.shape))
    return reshape(out, out.shape[1:])


# ---------------------------------------------------------------- convolution

def conv(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """N-d cross-correlation of x [Cin, *S] with weight [Cout, Cin, *K]."""
    x, weight = as_tensor(x), as_tensor(weight)
    inputs = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    D = x.ndim - 1
    if weight.ndim != D + 2 or weight.shape[1] != x.shape[0]:
        raise ValueError(f"conv: weight {weight.shape} incompatible with input {x.shape}")
    pad = [(0, 0)] + [(padding, padding)] * D
    xp = np.pad(x.data, pad)
    ksize = weight.shape[2:]
    osize = tuple((xp.shape[1 + d] - ksize[d]) // stride + 1 for d in range(D))
    if min(osize) < 1:
        raise ValueError("conv: kernel larger than padded input")
    cout, cin = weight.shape[:2]

    def window(off):
        return (slice(None),) + tuple(
            slice(off[d], off[d] + stride * (osize[d] - 1) + 1, stride) for d in range(D))

    offsets = list(itertools.product(*[range(k) for k in ksize]))
    out = np.zeros((cout, int(np.prod(osize))))
    for off in offsets:
        out += weight.data[(slice(None), slice(None)) + off] @ xp[window(off)].reshape(cin, -1)
    out = out.reshape((cout,) + osize)
    if bias is not None:
        out = out + bias.data.reshape((cout,) + (1,) * D)

    def bwd(g):
        gflat = g.reshape(cout, -1)
        gx = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for off in offsets:
            sl = window(off)
            w_off = weight.data[(slice(None), slice(None)) + off]
            gw[(slice(None), slice(None)) + off] = gflat @ xp[sl].reshape(cin, -1).T
            gx[sl] += (w_off.T @ gflat).reshape((cin,) + osize)
        crop = (slice(None),) + tuple(slice(padding, padding + n) for n in x.shape[1:])
        grads = [gx[crop], gw]
        if bias is not None:
            grads.append(gflat.sum(axis=1))
        return grads

    return _make("conv", out, inputs, bwd)
