"""Slow, loop-based reference implementations used as test oracles.

Nothing here calls into the vectorized sampling or attention code; only
parameter values are read from the store.
"""

import math

import numpy as np


def sample_point(grid, loc):
    """Multilinear sample of grid [C, *S] at normalized loc (axis order);
    zero vector when any coordinate leaves [0, 1]."""
    C = grid.shape[0]
    spatial = grid.shape[1:]
    if any(c < 0 or c > 1 for c in loc):
        return np.zeros(C)
    coord = [c * (n - 1) for c, n in zip(loc, spatial)]
    out = np.zeros(C)
    for idx in np.ndindex(*spatial):
        w = 1.0
        for c, i in zip(coord, idx):
            w *= max(0.0, 1.0 - abs(c - i))
        if w:
            out += w * grid[(slice(None),) + idx]
    return out


def softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def deform_attn_naive(queries, ref_axis, valid, grid, p, heads, points, pos=None):
    """Reference deformable attention. ``ref_axis`` is in the grid's axis order."""
    N, d = queries.shape
    D = grid.ndim - 1
    dh = d // heads
    out = np.zeros((N, d))
    for n in range(N):
        if not valid[n]:
            continue
        q = queries[n] + (0 if pos is None else pos[n])
        off = (q @ p["offset_w"] + p["offset_b"]).reshape(heads, points, D)
        logits = (q @ p["attn_w"] + p["attn_b"]).reshape(heads, points)
        agg = []
        for h in range(heads):
            w = softmax_list(list(logits[h]))
            acc = np.zeros(dh)
            for k in range(points):
                loc = [ref_axis[n][a] + p["offset_scale"][h] * off[h, k, a] for a in range(D)]
                s = sample_point(grid, loc)
                acc += w[k] * (s @ p["value_w"][h] + p["value_b"][h, 0])
            agg.append(acc)
        out[n] = np.concatenate(agg) @ p["out_w"] + p["out_b"]
    return out


def dca_naive(queries, ref_uv, valid, fmap, p, heads, points, pos=None):
    ref_axis = [(r[1], r[0]) for r in np.asarray(ref_uv)]
    return deform_attn_naive(queries, ref_axis, valid, fmap, p, heads, points, pos)


def dsa_naive(volume, p, heads, points, pos=None, residual=True):
    X, Y, Z, d = volume.shape
    grid = np.transpose(volume, (3, 0, 1, 2))
    refs, qs = [], []
    for i, j, k in np.ndindex(X, Y, Z):
        refs.append((i / max(X - 1, 1), j / max(Y - 1, 1), k / max(Z - 1, 1)))
        qs.append(volume[i, j, k])
    qs = np.array(qs)
    flat_pos = None if pos is None else pos.reshape(-1, d)
    out = deform_attn_naive(qs, refs, [True] * len(qs), grid, p, heads, points, flat_pos)
    if residual:
        out = qs + out
    return out.reshape(X, Y, Z, d)


def cvt_naive(features, pe_maps, p, residual_pe=True):
    """Dense per-token cross-view attention between adjacent frames."""
    N = len(features)
    d, h, w = features[0].shape
    enc = [f + pe for f, pe in zip(features, pe_maps)]
    base = enc if residual_pe else features
    outs = []
    for i in range(N):
        out = base[i].copy()
        for j in (i - 1, i + 1):
            if not 0 <= j < N:
                continue
            for y in range(h):
                for x in range(w):
                    q = enc[i][:, y, x] @ p["q_w"]
                    keys = [(enc[j][:, yy, xx] @ p["k_w"], base[j][:, yy, xx] @ p["v_w"])
                            for yy in range(h) for xx in range(w)]
                    scores = [float(q @ k) / math.sqrt(d) for k, _ in keys]
                    a = softmax_list(scores)
                    mix = sum(ai * v for ai, (_, v) in zip(a, keys))
                    out[:, y, x] += mix @ p["out_w"] + p["out_b"]
        outs.append(out)
    return outs


def params_dict(store, prefix):
    return {k[len(prefix) + 1:]: t.data for k, t in store.items() if k.startswith(prefix + "/")}


def randomize(store, rng, scale=0.5, prefix=""):
    for k, t in store.items():
        if k.startswith(prefix):
            t.data = rng.normal(0.0, scale, size=t.shape)
