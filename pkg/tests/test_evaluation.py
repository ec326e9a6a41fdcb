import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occforge.evaluation import ConfusionMatrix, compute_miou, export_ply, read_ply_counts


def test_hand_counted_example():
    gt = np.array([1, 1, 2, 255]).reshape(4, 1, 1)
    pred = np.array([1, 2, 2, 2]).reshape(4, 1, 1)
    r = compute_miou(pred, gt, num_classes=3)
    assert r.per_class[1] == 0.5 and r.per_class[2] == 0.5
    assert r.miou == 0.5
    assert r.confusion.total == 3 and r.confusion.ignored == 1


def test_perfect_prediction():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 5, size=(4, 4, 2))
    r = compute_miou(gt.copy(), gt, num_classes=6)
    present = np.unique(gt)
    assert (r.per_class[present] == 1.0).all()
    assert np.isnan(r.per_class[5])
    assert r.miou == 1.0 and r.occupancy_iou == 1.0


def test_all_free_prediction():
    gt = np.array([0, 3, 3, 4, 0]).reshape(5, 1, 1)
    r = compute_miou(np.zeros_like(gt), gt, num_classes=5)
    assert r.per_class[3] == 0 and r.per_class[4] == 0
    assert r.miou == 0.0 and r.occupancy_iou == 0.0


def test_predicted_but_absent_class_scores_zero():
    gt = np.array([1, 1, 0]).reshape(3, 1, 1)
    pred = np.array([1, 1, 2]).reshape(3, 1, 1)
    r = compute_miou(pred, gt, num_classes=4)
    assert r.per_class[2] == 0.0 and np.isnan(r.per_class[3])
    assert r.miou == 0.5


def test_occupancy_iou_split():
    gt = np.array([0, 1, 2, 2]).reshape(4, 1, 1)
    pred = np.array([3, 2, 2, 0]).reshape(4, 1, 1)
    # occupied: gt {1,2,3}, pred {0,1,2}; intersection {1,2}
    assert compute_miou(pred, gt, num_classes=4).occupancy_iou == 0.5


def test_shape_mismatch():
    with pytest.raises(ValueError):
        ConfusionMatrix(3).update(np.zeros(4), np.zeros(5))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 7))
def test_properties(seed, C):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, C, size=(5, 4, 3))
    gt[rng.uniform(size=gt.shape) < 0.2] = 255
    pred = rng.integers(0, C, size=gt.shape)
    r = compute_miou(pred, gt, num_classes=C)
    assert r.confusion.total == (gt != 255).sum()
    iou = r.per_class[~np.isnan(r.per_class)]
    assert ((iou >= 0) & (iou <= 1)).all()
    # relabel semantic classes consistently; free stays free
    perm = np.concatenate([[0], 1 + rng.permutation(C - 1)])
    lut = np.append(perm, np.zeros(256 - C, dtype=int))
    lut[255] = 255
    r2 = compute_miou(lut[pred], lut[gt], num_classes=C)
    assert abs(r2.miou - r.miou) < 1e-12
    assert abs(r2.occupancy_iou - r.occupancy_iou) < 1e-12 or np.isnan(r.occupancy_iou)


def test_table_lists_every_semantic_class():
    r = compute_miou(np.array([[[1, 2]]]), np.array([[[1, 1]]]), num_classes=8)
    text = r.table()
    assert "car" in text and "mIoU" in text and "n/a" in text


# ---------------------------------------------------------------- PLY

def test_ply_empty_grid(tmp_path):
    n = export_ply(np.zeros((3, 3, 3), dtype=int), tmp_path / "e.ply")
    assert n == 0
    assert read_ply_counts(tmp_path / "e.ply") == (0, 0)
    assert (tmp_path / "e.ply").read_text().strip().endswith("end_header")


def test_ply_single_voxel(tmp_path):
    grid = np.zeros((2, 2, 2), dtype=int)
    grid[1, 0, 1] = 3
    export_ply(grid, tmp_path / "one.ply", resolution=0.5, origin=(1.0, 0.0, 0.0))
    lines = (tmp_path / "one.ply").read_text().splitlines()
    assert read_ply_counts(tmp_path / "one.ply") == (8, 12)
    body = lines[lines.index("end_header") + 1:]
    verts = np.array([[float(v) for v in l.split()[:3]] for l in body[:8]])
    np.testing.assert_allclose(verts.min(axis=0), [1.5, 0.0, 0.5])
    np.testing.assert_allclose(verts.max(axis=0), [2.0, 0.5, 1.0])
    faces = [l.split() for l in body[8:]]
    assert len(faces) == 12 and all(f[0] == "3" for f in faces)
    # every cube edge is shared by exactly two triangles: closed surface
    edges = {}
    for f in faces:
        a, b, c = map(int, f[1:])
        for e in ((a, b), (b, c), (c, a)):
            key = tuple(sorted(e))
            edges[key] = edges.get(key, 0) + 1
    assert set(edges.values()) == {2}


@pytest.mark.parametrize("seed", range(3))
def test_ply_counts_random(tmp_path, seed):
    rng = np.random.default_rng(seed)
    grid = rng.integers(0, 4, size=(5, 4, 3))
    grid[rng.uniform(size=grid.shape) < 0.1] = 255
    n = export_ply(grid, tmp_path / "r.ply")
    occupied = ((grid != 0) & (grid != 255)).sum()
    assert n == occupied
    assert read_ply_counts(tmp_path / "r.ply") == (8 * occupied, 12 * occupied)
    assert len((tmp_path / "r.ply").read_text().splitlines()) == 13 + 20 * occupied
