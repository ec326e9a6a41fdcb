import time

import numpy as np
import pytest

from occforge.attention import SinusoidalPE, temporal_aggregate
from occforge.autodiff import ParameterStore, Tape, Tensor, backward, no_grad
from occforge.geometry import CameraModel, VoxelGridSpec, unproject_depth, voxel_refpoints
from occforge.losses import LossWeights
from occforge.pipeline import (
    BranchConfig, DegenerateSceneError, decode_semantic_voxels, estimate_depth,
    extract_features, fill_mask_tokens, generate_depth_queries, parse_toggles, run_branch,
    run_student, run_teacher,
)
from occforge.scenes import PRESETS, SyntheticScene, generate_scene
from occforge.training import branch_losses, scene_targets

from oracles import dca_naive, params_dict, randomize

SMALL = dict(dim=8, heads=2, points=2, hidden=4)


@pytest.fixture(scope="module")
def toy_scene():
    return generate_scene(3, "toy")


@pytest.fixture(scope="module")
def micro_scene():
    return generate_scene(1, "micro")


# ---------------------------------------------------------------- config

def test_parse_toggles():
    assert parse_toggles("none") == ()
    assert parse_toggles("all") == ("aux", "icca", "distill")
    assert parse_toggles(" aux, icca ,aux") == ("aux", "icca")
    assert parse_toggles(["cvt"]) == ("cvt",)
    with pytest.raises(ValueError):
        parse_toggles("aux,bogus")


def test_branch_config_validation():
    with pytest.raises(ValueError):
        BranchConfig(preset="huge")
    with pytest.raises(ValueError):
        BranchConfig(width=0)
    with pytest.raises(ValueError):
        BranchConfig(dim=7, heads=2)
    t = BranchConfig.teacher("toy", toggles="all")
    assert t.frames == PRESETS["toy"].frames and t.width == 2 and not t.distill
    assert BranchConfig.student("toy", "aux,icca").toggles == ("aux", "icca")


# ---------------------------------------------------------------- stages

def test_backbone_shapes():
    store = ParameterStore(0)
    f = extract_features(np.zeros((3, 48, 64)), store.scope("b"), width=2, dim=16, hidden=4)
    assert f.tensor.shape == (16, 12, 16)
    assert store["b/conv1/w"].shape == (8, 3, 3, 3)
    assert store["b/conv2/w"].shape == (16, 8, 3, 3)


def test_backbone_rejects_indivisible_image():
    with pytest.raises(ValueError):
        extract_features(np.zeros((3, 50, 64)), ParameterStore(0))


def test_backbone_zero_weights_give_zero_features():
    store = ParameterStore(0)
    extract_features(np.ones((3, 8, 8)), store, dim=4, hidden=2)
    for _, t in store.items():
        t.data = np.zeros_like(t.data)
    out = extract_features(np.random.default_rng(0).normal(size=(3, 8, 8)), store, dim=4, hidden=2)
    assert (out.tensor.data == 0).all()


def test_estimate_depth_is_deterministic_and_bounded():
    depth = generate_scene(0, "toy").depths[-1]
    a, b = estimate_depth(depth), estimate_depth(depth)
    np.testing.assert_array_equal(a, b)
    assert a is not depth and not np.array_equal(a, depth)
    assert ((a == 0) | (depth > 0)).all()
    np.testing.assert_array_equal(estimate_depth(depth, 0.0, 0.0), depth)


def test_wall_queries_match_brute_voxelization():
    spec = VoxelGridSpec((0.0, -2.0, -2.0), 0.5, (10, 8, 8))
    cam = CameraModel.from_pose([0.0, 0.0, 0.0], 0.0, 0.0, 8.0, 8.0, 7.5, 5.5, (12, 16))
    depth = np.full((12, 16), 3.2)
    q = generate_depth_queries(depth, cam, spec, ParameterStore(0), dim=4)
    pts = unproject_depth(depth, cam).points
    expected = set()
    for p in pts:
        idx = np.floor((p - np.asarray(spec.origin)) / spec.resolution).astype(int)
        if ((idx >= 0) & (idx < np.asarray(spec.dims))).all():
            expected.add(tuple(idx))
    assert {tuple(i) for i in q.indices} == expected
    assert all(i[0] == 6 for i in q.indices)
    assert q.features.shape == (len(q), 4)


def test_queries_share_the_embedding():
    s = generate_scene(0, "toy")
    store = ParameterStore(0)
    q = generate_depth_queries(s.depths[-1], s.cameras[-1], s.preset.feature_spec, store, dim=6)
    np.testing.assert_array_equal(q.features.data, np.tile(store["embed"].data, (len(q), 1)))


def test_degenerate_depth_raises():
    spec = VoxelGridSpec.micro()
    cam = CameraModel.simple(8.0, 8.0, 7.5, 5.5, (12, 16))
    with pytest.raises(DegenerateSceneError):
        generate_depth_queries(np.zeros((12, 16)), cam, spec, ParameterStore(0))


def test_fill_against_set_oracle():
    rng = np.random.default_rng(0)
    dims = (4, 3, 2)
    idx = np.array([[0, 0, 0], [3, 2, 1], [1, 2, 0]])
    vis = rng.normal(size=(3, 5))
    tok = rng.normal(size=5)
    out = fill_mask_tokens(Tensor(vis), idx, Tensor(tok), dims).data
    lookup = {tuple(i): r for i, r in zip(idx, vis)}
    for v in np.ndindex(dims):
        np.testing.assert_array_equal(out[v], lookup.get(v, tok))


def test_fill_errors():
    tok = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        fill_mask_tokens(Tensor(np.zeros((0, 2))), np.zeros((0, 3)), tok, (2, 2, 2))
    with pytest.raises(ValueError):
        fill_mask_tokens(Tensor(np.zeros((2, 2))), [[0, 0, 0]], tok, (2, 2, 2))
    with pytest.raises(IndexError):
        fill_mask_tokens(Tensor(np.zeros((1, 2))), [[2, 0, 0]], tok, (2, 2, 2))
    with pytest.raises(ValueError):
        fill_mask_tokens(Tensor(np.zeros((2, 2))), [[1, 0, 0], [1, 0, 0]], tok, (2, 2, 2))


def test_fill_gradient_routes_to_token_and_rows():
    vis = Tensor(np.ones((2, 3)), requires_grad=True)
    tok = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        out = fill_mask_tokens(vis, [[0, 0, 0], [1, 1, 1]], tok, (2, 2, 2)).sum()
    backward(out, tape)
    np.testing.assert_array_equal(vis.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(tok.grad, np.full(3, 6.0))


def test_decoder_replicates_blocks():
    rng = np.random.default_rng(1)
    vol = Tensor(rng.normal(size=(3, 2, 2, 4)))
    store = ParameterStore(0)
    sem = decode_semantic_voxels(vol, store, factor=2, num_classes=5)
    assert sem.logits.shape == (6, 4, 4, 5)
    direct = vol.data @ store["w"].data + store["b"].data
    for x, y, z in np.ndindex(6, 4, 4):
        np.testing.assert_array_equal(sem.logits.data[x, y, z], direct[x // 2, y // 2, z // 2])
    same = decode_semantic_voxels(vol, store, factor=1, num_classes=5)
    np.testing.assert_array_equal(same.logits.data, direct)
    with pytest.raises(ValueError):
        decode_semantic_voxels(vol, store, factor=0)


def test_labels_invariant_to_per_voxel_shift():
    rng = np.random.default_rng(2)
    vol = Tensor(rng.normal(size=(2, 2, 2, 3)))
    store = ParameterStore(0)
    a = decode_semantic_voxels(vol, store, num_classes=4)
    shifted = type(a)(Tensor(a.logits.data + rng.normal(size=(2, 2, 2, 1)) * 5))
    np.testing.assert_array_equal(a.labels, shifted.labels)


# ---------------------------------------------------------------- branches

def test_student_output_shapes(toy_scene):
    cfg = BranchConfig.student("toy", "aux,icca", **SMALL)
    with no_grad():
        out = run_student(toy_scene, ParameterStore(0), cfg)
    fspec = PRESETS["toy"].feature_spec
    assert out.initial.shape == fspec.dims + (8,)
    assert out.volume.shape == fspec.dims + (8,)
    assert out.semantic.logits.shape == PRESETS["toy"].spec.dims + (8,)
    assert out.semantic_2d.logits.shape == (8, 12, 16)
    assert out.semantic.labels.shape == PRESETS["toy"].spec.dims


def test_student_identity_at_init(toy_scene):
    cfg = BranchConfig.student("toy", "icca", **SMALL)
    with no_grad():
        out = run_student(toy_scene, ParameterStore(4), cfg)
    np.testing.assert_array_equal(out.refined.data, out.initial.data)
    np.testing.assert_array_equal(out.volume.data, out.initial.data)


def test_toggle_leaves_other_parameters_unchanged(toy_scene):
    a, b = ParameterStore(9), ParameterStore(9)
    with no_grad():
        oa = run_student(toy_scene, a, BranchConfig.student("toy", "none", **SMALL))
        ob = run_student(toy_scene, b, BranchConfig.student("toy", "aux,icca", **SMALL))
    for k in a.names():
        np.testing.assert_array_equal(a[k].data, b[k].data)
    assert set(b.names()) > set(a.names())
    # ICCA and the 2D head are inert at init, so predictions coincide
    np.testing.assert_array_equal(oa.semantic.logits.data, ob.semantic.logits.data)


def test_student_wrong_grid_rejected(micro_scene):
    with pytest.raises(ValueError):
        run_student(micro_scene, ParameterStore(0), BranchConfig.student("toy", **SMALL))


def _static_scene(scene: SyntheticScene, frames: int) -> SyntheticScene:
    """Every frame replaced by a copy of the last one."""
    return SyntheticScene(scene.spec, scene.labels, [scene.cameras[-1]] * frames,
                          [scene.images[-1]] * frames, [scene.depths[-1]] * frames,
                          scene.cloud, dict(scene.meta))


def test_teacher_on_identical_frames_matches_student(toy_scene):
    static = _static_scene(toy_scene, 3)
    store = ParameterStore(5)
    t_cfg = BranchConfig.teacher("toy", "icca", width=1, **SMALL)
    s_cfg = BranchConfig.student("toy", "icca", **SMALL)
    with no_grad():
        run_teacher(static, store, t_cfg)
        randomize(store, np.random.default_rng(1), 0.3, prefix="d")
        randomize(store, np.random.default_rng(2), 0.3, prefix="icca")
        s = run_student(static, store, s_cfg)
        t = run_teacher(static, store, t_cfg)
    assert not np.array_equal(s.volume.data, s.initial.data)
    np.testing.assert_array_equal(t.volume.data, s.volume.data)


def test_teacher_cvt_identity_at_init(toy_scene):
    store = ParameterStore(6)
    with no_grad():
        on = run_teacher(toy_scene, store, BranchConfig.teacher("toy", "cvt", **SMALL))
        off = run_teacher(toy_scene, store, BranchConfig.teacher("toy", "none", **SMALL))
    for a, b in zip(on.features, off.features):
        np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(on.semantic.logits.data, off.semantic.logits.data)


def test_temporal_mean_matches_naive_average(toy_scene):
    cfg = BranchConfig.teacher("toy", "none", **SMALL)
    store = ParameterStore(7)
    with no_grad():
        run_teacher(toy_scene, store, cfg)
    randomize(store, np.random.default_rng(3), 0.4)
    fspec = PRESETS["toy"].feature_spec
    idx = np.argwhere(np.ones(fspec.dims, dtype=bool))[::37]
    q = np.random.default_rng(4).normal(size=(len(idx), 8))
    pe = SinusoidalPE(8).volume(fspec.dims)[tuple(idx.T)]
    fmaps = [extract_features(img, store.scope("backbone"), 2, 8, 4).tensor
             for img in toy_scene.images]
    refs, valids = zip(*(voxel_refpoints(fspec, idx, c) for c in toy_scene.cameras))
    got = temporal_aggregate(Tensor(q), list(refs), list(valids), fmaps, store.scope("dca"),
                             cfg.attention, pe).data
    p = params_dict(store, "dca")
    naive = [dca_naive(q, r, v, f.data, p, 2, 2, pe) for r, v, f in zip(refs, valids, fmaps)]
    np.testing.assert_allclose(got, sum(naive) / 3, atol=1e-10)


def test_teacher_needs_posed_frames(toy_scene):
    short = _static_scene(toy_scene, 1)
    with pytest.raises(ValueError):
        run_teacher(short, ParameterStore(0), BranchConfig.teacher("toy", **SMALL))
    unposed = SyntheticScene(toy_scene.spec, toy_scene.labels,
                             [None] + list(toy_scene.cameras[1:]), toy_scene.images,
                             toy_scene.depths, toy_scene.cloud, toy_scene.meta)
    with pytest.raises(ValueError):
        run_teacher(unposed, ParameterStore(0), BranchConfig.teacher("toy", **SMALL))
    with pytest.raises(ValueError):
        run_student(toy_scene, ParameterStore(0), BranchConfig.teacher("toy", **SMALL))


def test_run_branch_dispatch(toy_scene):
    with no_grad():
        t = run_branch(toy_scene, ParameterStore(0), BranchConfig.teacher("toy", **SMALL))
    assert len(t.features) == 3


def test_micro_student_forward_backward_is_fast(micro_scene):
    cfg = BranchConfig.student("micro", "aux,icca,distill", **SMALL)
    store = ParameterStore(0)
    targets = scene_targets(micro_scene)
    teacher = Tensor(np.random.default_rng(0).normal(size=micro_scene.spec.dims + (8,)))
    start = time.perf_counter()
    with Tape() as tape:
        out = run_student(micro_scene, store, cfg)
        br = branch_losses(out, targets, cfg, LossWeights(), teacher)
    backward(br.total, tape)
    assert time.perf_counter() - start < 5.0
    assert np.isfinite(br.total.item()) and br.distill.item() > 0
    grads = store.grads()
    assert any(np.abs(g).sum() > 0 for k, g in grads.items() if k.startswith("dsa/"))
    assert np.abs(grads["head2d/cls/w"]).sum() > 0
