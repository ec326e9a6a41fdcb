"""Finite-difference gradient suite over every differentiable building block.

Each case builds a small random instance, so the whole suite runs in well
under a minute on one core. Used by ``occforge gradcheck``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention import (
    DeformAttnConfig, SinusoidalPE, cross_view_transform, deformable_cross_attention,
    deformable_self_attention, image_conditioned_cross_attention, temporal_aggregate,
)
from .autodiff import ParameterStore, Tensor, check_function, grad_check, ops
from .geometry import CameraModel, VoxelGridSpec
from .losses import (
    LossWeights, distill_loss, scal_losses, semantic_aux_loss, ssc_loss, total_loss,
)
from .pipeline import (
    BranchConfig, decode_semantic_voxels, decode_semantics_2d, extract_features,
    fill_mask_tokens, run_student,
)
from .scenes import generate_scene, get_preset
from .training import branch_losses, scene_targets

STEP = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    entries: int
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(self.max_error < TOL)


def _away_from_zero(x, margin=0.1):
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def _op_cases(rng):
    n = rng.normal
    lab = rng.integers(0, 4, size=(3, 2, 2))
    lab[0, 0, 0] = 255
    pix = rng.integers(0, 5, size=(3, 4))
    pix[1, 2] = 255
    yield "add", lambda a, b: ((a + b) * a).sum(), [n(size=(3, 4)), n(size=(4,))]
    yield "sub", lambda a, b: ((a - b) * b).sum(), [n(size=(3, 4)), n(size=(3, 4))]
    yield "mul", lambda a, b: (a * b * a).sum(), [n(size=(2, 3)), n(size=(3,))]
    yield "div", lambda a, b: (a / (ops.exp(b) + 1.0)).sum(), [n(size=(3, 4)), n(size=(3, 4))]
    yield "exp_log", lambda a: ops.log(ops.exp(a) + 1.0).sum(), [n(size=(3, 4))]
    yield "relu", lambda a, w: (ops.relu(a) * w).sum(), [_away_from_zero(n(size=(4, 3))),
                                                         n(size=(4, 3))]
    yield "sigmoid", lambda a: (ops.sigmoid(a) * a).sum(), [n(size=(5,))]
    mask = rng.uniform(size=(3, 4)) > 0.5
    yield "where", lambda a, b: ops.where(mask, a * a, b).sum(), [n(size=(3, 4)), n(size=(3, 4))]
    yield "sum_mean", lambda a: (ops.sum(a, axis=0) * ops.mean(a, axis=1).sum()).sum(), \
        [n(size=(3, 4))]
    yield "matmul", lambda a, b: ops.sigmoid(a @ b).sum(), [n(size=(2, 3, 4)), n(size=(2, 4, 2))]
    yield "reshape_transpose", lambda a, w: (a.reshape(4, 6).transpose(1, 0) * w).sum(), \
        [n(size=(2, 3, 4)), n(size=(6, 4))]
    yield "broadcast_to", lambda a, w: (ops.broadcast_to(a, (3, 4)) * w).sum(), \
        [n(size=(4,)), n(size=(3, 4))]
    yield "index", lambda a, w: (a[np.array([0, 2, 2])] * w).sum(), [n(size=(4, 3)), n(size=(3, 3))]
    rows = np.array([3, 0])
    yield "scatter_rows", lambda b, v, w: (ops.scatter_rows(b, rows, v) * w).sum(), \
        [n(size=(5, 2)), n(size=(2, 2)), n(size=(5, 2))]
    yield "concat_stack", lambda a, b: (ops.stack([ops.concat([a, b], 0), ops.concat([b, a], 0)])
                                        * ops.concat([a, a], 0)).sum(), [n(size=(2, 3)),
                                                                          n(size=(2, 3))]
    yield "upsample_nearest", lambda a, w: (ops.upsample_nearest(a, 2, (0, 1, 2)) * w).sum(), \
        [n(size=(2, 1, 2, 3)), n(size=(4, 2, 4, 3))]
    yield "softmax", lambda a, w: (ops.softmax(a, 1) * w).sum(), [n(size=(3, 5)), n(size=(3, 5))]
    yield "log_softmax", lambda a, w: (ops.log_softmax(a, 0) * w).sum(), \
        [n(size=(4, 3)), n(size=(4, 3))]
    yield "conv2d", lambda x, w, b: ops.sigmoid(ops.conv(x, w, b, stride=2, padding=1)).sum(), \
        [n(size=(2, 5, 6)), n(size=(3, 2, 3, 3)), n(size=(3,))]
    yield "conv3d", lambda x, w, b: ops.sigmoid(ops.conv(x, w, b, padding=1)).sum(), \
        [n(size=(1, 3, 3, 2)), n(size=(2, 1, 3, 3, 3)), n(size=(2,))]
    pts2 = rng.uniform(-0.1, 1.1, size=(7, 2))
    yield "bilinear_sample", lambda f, p, w: (ops.bilinear_sample(f, p) * w).sum(), \
        [n(size=(2, 4, 5)), pts2, n(size=(7, 2))]
    pts3 = rng.uniform(0.02, 0.98, size=(2, 6, 3))
    yield "trilinear_sample", lambda v, p, w: (ops.grid_sample(v, p) * w).sum(), \
        [n(size=(2, 2, 3, 4, 3)), pts3, n(size=(2, 6, 2))]
    yield "cross_entropy_2d", lambda a: semantic_aux_loss(a, pix), [n(size=(5, 3, 4))]
    yield "ssc_loss", lambda a: ssc_loss(a, lab), [n(size=(3, 2, 2, 4))]
    yield "scal_sem", lambda a: scal_losses(a, lab)[0], [n(size=(3, 2, 2, 4))]
    yield "scal_geo", lambda a: scal_losses(a, lab)[1], [n(size=(3, 2, 2, 4))]
    teacher = Tensor(n(size=(2, 2, 1, 5)))
    yield "distill_kl", lambda s: distill_loss(teacher, s), [n(size=(2, 2, 1, 5))]
    yield "total_loss", lambda a, b, c, d, e: total_loss(
        dict(sem=a * a, distill=b * b, ssc=c * c, scal_sem=d * d, scal_geo=e * e),
        LossWeights()).total, [n(size=()) for _ in range(5)]


def _module_cases(rng):
    """(name, builder) pairs; builder returns (f(store), store)."""
    cfg = DeformAttnConfig(dim=4, heads=2, points=2, offset_scale=0.2)

    def jitter(store):
        for _, t in store.items():
            t.data = t.data + rng.normal(0.0, 0.3, size=t.shape)
        return store

    def dca():
        s = ParameterStore(1)
        q = s.add("q", rng.normal(size=(5, 4)))
        fm = s.add("fmap", rng.normal(size=(4, 4, 5)))
        ref = rng.uniform(0.1, 0.9, size=(5, 2))
        valid = np.array([True, True, False, True, True])
        w = rng.normal(size=(5, 4))
        f = lambda st: (deformable_cross_attention(q, ref, valid, fm, st.scope("dca"), cfg) * w).sum()
        f(s)
        return f, jitter(s)

    def temporal():
        s = ParameterStore(2)
        q = s.add("q", rng.normal(size=(4, 4)))
        fms = [s.add(f"fmap{i}", rng.normal(size=(4, 3, 4))) for i in range(2)]
        refs = [rng.uniform(0.1, 0.9, size=(4, 2)) for _ in range(2)]
        valids = [np.ones(4, bool), np.array([True, False, True, True])]
        w = rng.normal(size=(4, 4))
        f = lambda st: (temporal_aggregate(q, refs, valids, fms, st.scope("dca"), cfg) * w).sum()
        f(s)
        return f, jitter(s)

    def dsa():
        s = ParameterStore(3)
        vol = s.add("vol", rng.normal(size=(3, 2, 2, 4)))
        w = rng.normal(size=(3, 2, 2, 4))
        f = lambda st: (deformable_self_attention(vol, st.scope("dsa"), cfg) * w).sum()
        f(s)
        return f, jitter(s)

    def icca():
        s = ParameterStore(4)
        spec = VoxelGridSpec((0.5, -1.0, -0.5), 0.5, (3, 4, 2))
        cam = CameraModel.from_pose([-0.5, 0.2, 0.3], 0.1, 0.1, 6.0, 6.0, 3.5, 2.5, (6, 8))
        vol = s.add("vol", rng.normal(size=(3, 4, 2, 4)))
        fm = s.add("fmap", rng.normal(size=(4, 6, 8)))
        w = rng.normal(size=(3, 4, 2, 4))
        f = lambda st: (image_conditioned_cross_attention(vol, fm, spec, cam, st.scope("icca"),
                                                          cfg) * w).sum()
        f(s)
        return f, jitter(s)

    def cvt():
        s = ParameterStore(5)
        feats = [s.add(f"f{i}", rng.normal(size=(4, 2, 3))) for i in range(3)]
        w = rng.normal(size=(3, 4, 2, 3))
        pe = SinusoidalPE(4)
        f = lambda st: (ops.stack(cross_view_transform(feats, pe, st.scope("cvt"))) * w).sum()
        f(s)
        return f, jitter(s)

    def backbone():
        s = ParameterStore(6)
        img = rng.uniform(size=(3, 8, 8))
        w = rng.normal(size=(4, 2, 2))
        f = lambda st: (extract_features(img, st.scope("bb"), 1, 4, 2).tensor * w).sum()
        f(s)
        return f, jitter(s)

    def fill():
        s = ParameterStore(7)
        vis = s.add("visible", rng.normal(size=(3, 4)))
        tok = s.add("token", rng.normal(size=(4,)))
        idx = np.array([[0, 1, 0], [2, 0, 1], [1, 1, 1]])
        w = rng.normal(size=(3, 2, 2, 4))
        return (lambda st: (fill_mask_tokens(vis, idx, tok, (3, 2, 2)) * w).sum()), s

    def decode3d():
        s = ParameterStore(8)
        vol = s.add("vol", rng.normal(size=(2, 2, 1, 4)))
        w = rng.normal(size=(4, 4, 2, 5))
        f = lambda st: (decode_semantic_voxels(vol, st.scope("head"), 2, 5).logits * w).sum()
        f(s)
        return f, s

    def decode2d():
        s = ParameterStore(9)
        fm = s.add("fmap", rng.normal(size=(4, 3, 4)))
        w = rng.normal(size=(5, 3, 4))
        f = lambda st: (decode_semantics_2d(fm, st.scope("head"), 5).logits * w).sum()
        f(s)
        return f, jitter(s)

    yield "deformable_cross_attention", dca
    yield "temporal_aggregate", temporal
    yield "deformable_self_attention", dsa
    yield "image_conditioned_cross_attention", icca
    yield "cross_view_transform", cvt
    yield "extract_features", backbone
    yield "fill_mask_tokens", fill
    yield "decode_semantic_voxels", decode3d
    yield "decode_semantics_2d", decode2d


def micro_student_case(seed: int = 0):
    """End-to-end loss of the monocular branch on a micro scene, every toggle on.

    Parameters are jittered away from their initial values so that the
    zero-initialized projections do not hide any gradient path.
    """
    rng = np.random.default_rng(seed)
    scene = generate_scene(seed, "micro")
    cfg = BranchConfig.student("micro", ("aux", "icca", "distill"), dim=4, heads=2, points=2,
                               hidden=2)
    targets = scene_targets(scene)
    teacher = Tensor(rng.normal(size=cfg_feature_shape(cfg)))
    store = ParameterStore(seed)

    def f(st):
        out = run_student(scene, st, cfg)
        return branch_losses(out, targets, cfg, LossWeights(), teacher).total

    f(store)
    for path, t in store.items():
        if not path.startswith("queries/corrector"):
            t.data = t.data + rng.normal(0.0, 0.2, size=t.shape)
    return f, store


def cfg_feature_shape(cfg: BranchConfig):
    return get_preset(cfg.preset).feature_spec.dims + (cfg.dim,)


def run_suite(seed: int = 0, end_to_end: bool = True, progress=None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def note(r):
        results.append(r)
        if progress is not None:
            progress(r)

    for name, f, inputs in _op_cases(rng):
        t = time.perf_counter()
        err = check_function(f, inputs, STEP)
        note(CheckResult(name, err, int(sum(np.size(x) for x in inputs)),
                         time.perf_counter() - t))
    for name, build in _module_cases(rng):
        t = time.perf_counter()
        f, store = build()
        rep = grad_check(f, store, STEP, TOL)
        note(CheckResult(name, max(r.max_error for r in rep.values()),
                         sum(r.checked for r in rep.values()), time.perf_counter() - t))
    if end_to_end:
        t = time.perf_counter()
        f, store = micro_student_case(seed)
        rep = grad_check(f, store, STEP, TOL)
        worst = max(rep.values(), key=lambda r: r.max_error)
        note(CheckResult(f"student_total_loss[micro] (worst: {worst.path})", worst.max_error,
                         sum(r.checked for r in rep.values()), time.perf_counter() - t))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  {'entries':>7}  {'s':>6}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_error:12.3e}  {r.entries:7d}  "
                     f"{r.seconds:6.2f}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
