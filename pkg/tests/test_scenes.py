import struct

import numpy as np
import pytest

from occforge.formats import BadMagicError, TruncatedFileError, UnsupportedVersionError
from occforge.geometry import CameraModel, PointCloud, VoxelGridSpec, unproject_depth, voxelize
from occforge.scenes import (
    IGNORE, PRESETS, ROAD, RARE_VEHICLE, dumps_scene, generate_scene, loads_scene, march,
    project_labels_to_image, read_scene, render_depth, target_labels, write_scene,
)


def brute_depth(labels, spec, cam):
    """Slab-test every occupied voxel against every pixel ray."""
    H, W = cam.image_size
    occ = np.argwhere(labels > 0)
    lo = np.asarray(spec.origin) + occ * spec.resolution
    hi = lo + spec.resolution
    R = cam.rotation
    out = np.zeros((H, W))
    for v in range(H):
        for u in range(W):
            dc = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
            d = R.T @ dc
            best = None
            for a, b in zip(lo, hi):
                tn, tf = -np.inf, np.inf
                for k in range(3):
                    if d[k] == 0:
                        if not a[k] <= cam.center[k] < b[k]:
                            tn = np.inf
                        continue
                    t1, t2 = (a[k] - cam.center[k]) / d[k], (b[k] - cam.center[k]) / d[k]
                    tn, tf = max(tn, min(t1, t2)), min(tf, max(t1, t2))
                tn = max(tn, 0.0)
                if tn < tf and (best is None or tn < best[0]):
                    best = (tn, tf)
            if best is not None:
                out[v, u] = 0.5 * (best[0] + best[1])
    return out


def test_generation_is_deterministic():
    a, b = generate_scene(11, "micro"), generate_scene(11, "micro")
    assert dumps_scene(a) == dumps_scene(b)
    assert dumps_scene(a) != dumps_scene(generate_scene(12, "micro"))


def test_depth_noise_option():
    clean, noisy = generate_scene(4, "micro"), generate_scene(4, "micro", depth_sigma=0.05)
    np.testing.assert_array_equal(clean.images[0], noisy.images[0])
    for a, b in zip(clean.depths, noisy.depths):
        np.testing.assert_array_equal(a == 0, b == 0)
        assert 0 < np.abs(a - b).max() < 0.5
    with pytest.raises(ValueError):
        generate_scene(4, "micro", depth_sigma=-1.0)


def test_unknown_preset():
    with pytest.raises(ValueError):
        generate_scene(0, "huge")


def test_scene_contents():
    s = generate_scene(3, "toy")
    p = PRESETS["toy"]
    assert s.num_frames == p.frames
    assert s.labels.shape == p.spec.dims
    assert all(img.shape == (3,) + p.image_size for img in s.images)
    assert all(d.shape == p.image_size for d in s.depths)
    assert s.preset is p
    # block alignment with the feature grid
    f = p.feature_factor
    blocks = s.labels.reshape(16, f, 16, f, 4, f)
    assert (blocks == blocks[:, :1, :, :1, :, :1]).all()


def test_empty_scene_hits_only_ground_or_sky():
    s = generate_scene(0, "toy", empty=True)
    for cam, depth in zip(s.cameras, s.depths):
        _, hit = march(s.labels, s.spec, cam)
        assert set(np.unique(hit)) <= {0, ROAD}
        assert np.isfinite(depth).all()
        assert (depth[0] == 0).all()  # top row sees sky
    # from frame t, inside the grid, the bottom row looks down at the road
    assert (s.depths[-1][-1] > 0).all()


@pytest.mark.parametrize("preset", ["micro", "toy"])
@pytest.mark.parametrize("seed", range(4))
def test_depth_revoxelizes_onto_occupied_voxels(preset, seed):
    s = generate_scene(seed, preset)
    for cam, depth in zip(s.cameras, s.depths):
        occ, _ = voxelize(unproject_depth(depth, cam), s.spec)
        assert occ.any()
        assert not (occ & (s.labels == 0)).any()


def test_wall_depth():
    spec = VoxelGridSpec((0.0, -10.0, -10.0), 0.2, (30, 100, 100))
    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[25] = 2  # x in [5.0, 5.2)
    cam = CameraModel.from_pose([0.0, 0.0, 0.0], 0.0, 0.0, 20.0, 20.0, 7.5, 5.5, (12, 16))
    depth = render_depth(labels, spec, cam)
    assert np.abs(depth - 5.0).max() <= 0.1 + 1e-12


def test_empty_grid_renders_zeros():
    spec = VoxelGridSpec.micro()
    cam = CameraModel.from_pose([-1, 0, 0], 0, 0, 10, 10, 7.5, 5.5, (12, 16))
    assert (render_depth(np.zeros(spec.dims), spec, cam) == 0).all()


@pytest.mark.parametrize("seed", range(3))
def test_depth_matches_brute_force_rays(seed):
    rng = np.random.default_rng(seed)
    spec = VoxelGridSpec((0.0, -1.0, -1.0), 0.4, (6, 5, 4))
    labels = (rng.uniform(size=spec.dims) < 0.12).astype(np.uint8) * 3
    cam = CameraModel.from_pose([-1.0 - rng.uniform(), rng.uniform(-0.3, 0.3),
                                 rng.uniform(-0.3, 0.3)], rng.uniform(-0.2, 0.2),
                                rng.uniform(-0.2, 0.2), 8.0, 8.0, 4.5, 3.5, (8, 10))
    depth = render_depth(labels, spec, cam)
    assert (depth > 0).any()
    np.testing.assert_allclose(depth, brute_depth(labels, spec, cam), atol=1e-9)


def test_label_projection_principal_point():
    cam = CameraModel.simple(10.0, 10.0, 5.0, 3.0, (8, 12))
    out = project_labels_to_image(PointCloud([[0.0, 0.0, 4.0]], [6]), cam)
    assert (out != IGNORE).sum() == 1 and out[3, 5] == 6


def test_label_projection_nearest_wins():
    cam = CameraModel.simple(10.0, 10.0, 5.0, 3.0, (8, 12))
    pts = [[0.2, 0.1, 4.0], [0.1, 0.05, 2.0], [0.3, 0.15, 6.0]]
    out = project_labels_to_image(PointCloud(pts, [1, 2, 3]), cam)
    assert (out != IGNORE).sum() == 1 and out[3, 6] == 2


@pytest.mark.parametrize("seed", range(3))
def test_label_projection_matches_brute_zbuffer(seed):
    rng = np.random.default_rng(seed)
    cam = CameraModel.from_pose([0, 0, 0], 0.1, 0.05, 6.0, 6.0, 5.5, 3.5, (8, 12))
    pts = rng.uniform([0.5, -3, -2], [6, 3, 2], size=(400, 3))
    lab = rng.integers(0, 8, size=400)
    out = project_labels_to_image(PointCloud(pts, lab), cam)
    expected = np.full((8, 12), IGNORE)
    best = np.full((8, 12), np.inf)
    K, E = cam.intrinsics, cam.extrinsics
    for p, c in zip(pts, lab):
        pc = E[:3, :3] @ p + E[:3, 3]
        if pc[2] <= 0:
            continue
        u, v = K[0, 0] * pc[0] / pc[2] + K[0, 2], K[1, 1] * pc[1] / pc[2] + K[1, 2]
        if not (0 <= u <= 11 and 0 <= v <= 7):
            continue
        iu, iv = int(np.rint(u)), int(np.rint(v))
        if pc[2] < best[iv, iu]:
            best[iv, iu], expected[iv, iu] = pc[2], c
    np.testing.assert_array_equal(out, expected)


def test_target_labels_mask_outside_frustum():
    s = generate_scene(2, "toy")
    t = target_labels(s)
    assert (t == IGNORE).any() and (t != IGNORE).any()
    keep = t != IGNORE
    np.testing.assert_array_equal(t[keep], s.labels[keep])


def test_rare_class_is_rare():
    occ = rare = 0
    for seed in range(120):
        lab = generate_scene(seed, "toy", frames=1).labels
        occ += (lab > 0).sum()
        rare += (lab == RARE_VEHICLE).sum()
    assert 0.0 < rare / occ < 0.01


# ---------------------------------------------------------------- file format

def test_scene_file_round_trip(tmp_path):
    s = generate_scene(5, "toy")
    write_scene(tmp_path / "s.ocsn", s)
    back = read_scene(tmp_path / "s.ocsn")
    assert back == s
    assert dumps_scene(back) == (tmp_path / "s.ocsn").read_bytes()
    np.testing.assert_array_equal(back.images[1], s.images[1])


def test_micro_header_layout():
    s = generate_scene(0, "micro")
    blob = dumps_scene(s)
    expected = b"OCSN" + struct.pack("<I", 1)
    expected += b"SVOX" + struct.pack("<IIII", 1, 8, 8, 4) + struct.pack("<dddd", 0.5, 0.0, -2.0, -1.0)
    assert blob[:len(expected)] == expected
    off = len(expected) + 256
    assert blob[len(expected):off] == s.labels.astype(np.uint8).tobytes(order="F")
    assert blob[off:off + 12] == struct.pack("<III", 2, 16, 24)
    assert blob[off + 12:off + 12 + 72] == s.cameras[0].intrinsics.astype("<f8").tobytes()
    frame = 8 + 8 * (9 + 16 + 3 * 16 * 24 + 16 * 24)
    n = len(s.cloud)
    assert len(blob) == off + 4 + 2 * frame + 4 + 24 * n + n


def test_scene_file_errors():
    blob = dumps_scene(generate_scene(1, "micro"))
    with pytest.raises(BadMagicError):
        loads_scene(b"XXXX" + blob[4:])
    with pytest.raises(UnsupportedVersionError):
        loads_scene(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(TruncatedFileError):
        loads_scene(blob[:-5])
    with pytest.raises(BadMagicError):
        loads_scene(blob[:8] + b"XVOX" + blob[12:])
