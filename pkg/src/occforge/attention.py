"""Deformable attention in 2D and 3D, and the cross-view transformer.

All functions take explicit parameter scopes so the same code serves the
monocular and privileged branches. Sampling locations use normalized
coordinates in *axis order* of the sampled grid: (row, col) for a 2D map
[d, h, w] and (x, y, z) for a volume [x, y, z, d]. Image reference points
arrive as (u, v) and are flipped internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.params import ParamScope
from .autodiff.tensor import Tensor
from .geometry import CameraModel, VoxelGridSpec, voxel_refpoints


@dataclass(frozen=True)
class DeformAttnConfig:
    dim: int = 32
    heads: int = 2
    points: int = 4
    offset_scale: float = 0.01

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.points < 1:
            raise ValueError("need at least one sampling point")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


_DIRS_3D = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1]],
                    dtype=np.float64)


def _offset_bias_pattern(heads: int, points: int, ndim: int) -> np.ndarray:
    """Per-head fan of directions, point k at radius k + 1."""
    pattern = np.zeros((heads, points, ndim))
    for h in range(heads):
        for k in range(points):
            if ndim == 2:
                theta = 2 * np.pi * (h * points + k) / (heads * points)
                d = np.array([np.sin(theta), np.cos(theta)])
            else:
                d = _DIRS_3D[(h * points + k) % len(_DIRS_3D)]
            pattern[h, k] = d * (k + 1)
    return pattern.reshape(-1)


def attention_params(scope: ParamScope, cfg: DeformAttnConfig, ndim: int,
                     zero_out: bool) -> dict[str, Tensor]:
    d, H, K, dh = cfg.dim, cfg.heads, cfg.points, cfg.head_dim
    p = {
        "offset_w": scope.param("offset_w", (d, H * K * ndim), init="zeros"),
        "offset_b": scope.param("offset_b", (H * K * ndim,),
                                init=lambda shape: _offset_bias_pattern(H, K, ndim)),
        "offset_scale": scope.param("offset_scale", (H,), init="constant",
                                    value=cfg.offset_scale),
        "attn_w": scope.param("attn_w", (d, H * K), init="zeros"),
        "attn_b": scope.param("attn_b", (H * K,), init="zeros"),
        "value_w": scope.param("value_w", (H, d, dh), fan_in=d),
        "value_b": scope.param("value_b", (H, 1, dh), init="zeros"),
        "out_w": scope.param("out_w", (d, d), init="zeros" if zero_out else "kaiming", fan_in=d),
        "out_b": scope.param("out_b", (d,), init="zeros"),
    }
    return p


def _deform_attn(queries: Tensor, ref: np.ndarray, valid: np.ndarray, grid: Tensor,
                 p: dict[str, Tensor], cfg: DeformAttnConfig, query_pos=None):
    """Core sampler. ``grid`` is [d, *S]; ``ref`` [N, D] in axis order.

    Returns the masked output [N, d] and the attention weights [N, heads, K].
    """
    N, d = queries.shape
    D = grid.ndim - 1
    H, K, dh = cfg.heads, cfg.points, cfg.head_dim
    if d != cfg.dim or grid.shape[0] != d:
        raise ValueError(f"channel mismatch: queries {queries.shape}, grid {grid.shape}")
    if ref.shape != (N, D) or valid.shape != (N,):
        raise ValueError(f"reference points {ref.shape} do not align with {N} queries")
    q = queries if query_pos is None else queries + query_pos
    offsets = (q @ p["offset_w"] + p["offset_b"]).reshape(N, H, K, D)
    offsets = offsets * p["offset_scale"].reshape(1, H, 1, 1)
    loc = offsets + ref.reshape(N, 1, 1, D)
    loc = loc.transpose(1, 0, 2, 3).reshape(1, H * N * K, D)
    sampled = ops.grid_sample(grid.reshape((1,) + grid.shape), loc)
    sampled = sampled.reshape(H, N * K, d)
    values = sampled @ p["value_w"] + p["value_b"]
    logits = (q @ p["attn_w"] + p["attn_b"]).reshape(N, H, K)
    weights = ops.softmax(logits, axis=-1)
    agg = weights.transpose(1, 0, 2).reshape(H, N, 1, K) @ values.reshape(H, N, K, dh)
    agg = agg.reshape(H, N, dh).transpose(1, 0, 2).reshape(N, d)
    out = agg @ p["out_w"] + p["out_b"]
    out = ops.where(valid.reshape(N, 1), out, 0.0)
    return out, weights


def deformable_cross_attention(queries: Tensor, refpoints: np.ndarray, valid: np.ndarray,
                               feature_map: Tensor, params: ParamScope, cfg: DeformAttnConfig,
                               query_pos=None, zero_out: bool = False,
                               return_weights: bool = False):
    """Lift image features to queries around normalized (u, v) reference points.

    Queries with invalid reference points produce zero rows.
    """
    p = attention_params(params, cfg, 2, zero_out)
    ref = np.asarray(refpoints, dtype=np.float64)[:, ::-1]
    out, w = _deform_attn(queries, np.ascontiguousarray(ref), np.asarray(valid, dtype=bool),
                          feature_map, p, cfg, query_pos)
    return (out, w) if return_weights else out


def temporal_aggregate(queries: Tensor, refpoints: list, valids: list, feature_maps: list,
                       params: ParamScope, cfg: DeformAttnConfig, query_pos=None) -> Tensor:
    """Mean of per-frame cross-attention outputs with shared parameters.

    The mean is taken as x_0 + sum_i (x_i - x_0) / N, which equals the plain
    average and reproduces x_0 bitwise when every frame is identical.
    """
    n = len(feature_maps)
    if n == 0:
        raise ValueError("temporal_aggregate needs at least one frame")
    if not (len(refpoints) == len(valids) == n):
        raise ValueError("one set of reference points per frame is required")
    outs = [deformable_cross_attention(queries, r, v, f, params, cfg, query_pos)
            for r, v, f in zip(refpoints, valids, feature_maps)]
    acc = outs[0]
    for o in outs[1:]:
        acc = acc + (o - outs[0]) * (1.0 / n)
    return acc


def normalized_voxel_coords(dims) -> np.ndarray:
    """Voxel-node coordinates in [0, 1] per axis for every voxel, [V, 3]."""
    idx = np.stack(np.unravel_index(np.arange(int(np.prod(dims))), dims), axis=1)
    scale = np.array([max(n - 1, 1) for n in dims], dtype=np.float64)
    return idx / scale


def deformable_self_attention(volume: Tensor, params: ParamScope, cfg: DeformAttnConfig,
                              query_pos=None, residual: bool = True,
                              return_weights: bool = False):
    """Every voxel attends to K trilinear samples of the volume around itself."""
    X, Y, Z, d = volume.shape
    p = attention_params(params, cfg, 3, zero_out=True)
    V = X * Y * Z
    flat = volume.reshape(V, d)
    grid = volume.transpose(3, 0, 1, 2)
    out, w = _deform_attn(flat, normalized_voxel_coords((X, Y, Z)), np.ones(V, dtype=bool),
                          grid, p, cfg, None if query_pos is None else query_pos.reshape(V, d))
    if residual:
        out = flat + out
    out = out.reshape(X, Y, Z, d)
    return (out, w) if return_weights else out


def image_conditioned_cross_attention(volume: Tensor, feature_map: Tensor,
                                      spec: VoxelGridSpec, cam: CameraModel,
                                      params: ParamScope, cfg: DeformAttnConfig,
                                      query_pos=None) -> Tensor:
    """Refine every voxel with image features at its centroid's projection.

    Voxels that do not project into the image are returned unchanged.
    """
    X, Y, Z, d = volume.shape
    if (X, Y, Z) != spec.dims:
        raise ValueError(f"volume {volume.shape[:3]} does not match grid {spec.dims}")
    V = X * Y * Z
    ref, valid = voxel_refpoints(spec, spec.all_indices(), cam)
    flat = volume.reshape(V, d)
    attn = deformable_cross_attention(flat, ref, valid, feature_map, params, cfg,
                                      None if query_pos is None else query_pos.reshape(V, d),
                                      zero_out=True)
    out = ops.where(valid.reshape(V, 1), flat + attn, flat)
    return out.reshape(X, Y, Z, d)


# ---------------------------------------------------------------- positional encodings

@dataclass(frozen=True)
class SinusoidalPE:
    dim: int
    base: float = 10000.0

    def encode(self, positions, size: int | None = None) -> np.ndarray:
        """[len(positions), size] interleaved sin/cos features."""
        size = self.dim if size is None else size
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
        i = np.arange(size)
        freq = self.base ** (-2.0 * (i // 2) / max(size, 1))
        ang = pos * freq
        return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))

    def image(self, h: int, w: int, frame: int = 0) -> np.ndarray:
        """[dim, h, w]: rows in the first half of channels, columns in the
        second, plus a frame-index encoding over all channels."""
        half = self.dim // 2
        rows = self.encode(np.arange(h), half)
        cols = self.encode(np.arange(w), self.dim - half)
        pe = np.concatenate([np.broadcast_to(rows[:, None, :], (h, w, half)),
                             np.broadcast_to(cols[None, :, :], (h, w, self.dim - half))], axis=2)
        pe = pe + self.encode([frame])[0]
        return np.ascontiguousarray(pe.transpose(2, 0, 1))

    def volume(self, dims) -> np.ndarray:
        """[x, y, z, dim]: channel blocks encode x, y and z in turn."""
        a = 2 * max(1, self.dim // 6)
        sizes = [a, a, self.dim - 2 * a]
        X, Y, Z = dims
        ex = self.encode(np.arange(X), sizes[0])[:, None, None, :]
        ey = self.encode(np.arange(Y), sizes[1])[None, :, None, :]
        ez = self.encode(np.arange(Z), sizes[2])[None, None, :, :]
        return np.concatenate([np.broadcast_to(ex, (X, Y, Z, sizes[0])),
                               np.broadcast_to(ey, (X, Y, Z, sizes[1])),
                               np.broadcast_to(ez, (X, Y, Z, sizes[2]))], axis=3)


# ---------------------------------------------------------------- cross-view transformer

def cvt_params(scope: ParamScope, dim: int) -> dict[str, Tensor]:
    return {
        "q_w": scope.param("q_w", (dim, dim), fan_in=dim),
        "k_w": scope.param("k_w", (dim, dim), fan_in=dim),
        "v_w": scope.param("v_w", (dim, dim), fan_in=dim),
        "out_w": scope.param("out_w", (dim, dim), init="zeros"),
        "out_b": scope.param("out_b", (dim,), init="zeros"),
    }


def _cross_attend(q_tok: Tensor, k_tok: Tensor, v_tok: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Dense single-head attention over flattened positions, tokens [hw, d]."""
    d = q_tok.shape[1]
    scores = (q_tok @ p["q_w"]) @ (k_tok @ p["k_w"]).transpose(1, 0) * (1.0 / np.sqrt(d))
    return ops.softmax(scores, axis=-1) @ (v_tok @ p["v_w"]) @ p["out_w"] + p["out_b"]


def cross_view_transform(features: list, pe: SinusoidalPE, params: ParamScope,
                         residual_pe: bool = True) -> list:
    """Enhance chronologically ordered frame features [d, h, w].

    Positional encodings are added to every frame; then each frame receives
    residual cross-attention from each chronological neighbour (both
    directions of every adjacent pair), computed from the pre-update
    features so pair order does not matter.

    With ``residual_pe=False`` the encodings only enter queries and keys and
    the residual stream carries the raw features, so a zero output
    projection makes the whole block an exact identity.
    """
    if not features:
        raise ValueError("cross_view_transform needs at least one frame")
    d, h, w = features[0].shape
    p = cvt_params(params, d)
    encoded = [f + pe.image(h, w, frame=i) for i, f in enumerate(features)]
    base = encoded if residual_pe else list(features)

    def tokens(x):
        return x.reshape(d, h * w).transpose(1, 0)

    qk = [tokens(e) for e in encoded]
    vals = [tokens(b) for b in base]
    outs = []
    for i in range(len(features)):
        update = None
        for j in (i - 1, i + 1):
            if 0 <= j < len(features):
                a = _cross_attend(qk[i], qk[j], vals[j], p)
                update = a if update is None else update + a
        if update is None:
            outs.append(base[i])
        else:
            outs.append(base[i] + update.transpose(1, 0).reshape(d, h, w))
    return outs
