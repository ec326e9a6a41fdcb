"""Voxel IoU scoring and PLY export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenes import CLASS_NAMES, IGNORE, PALETTE


class ConfusionMatrix:
    """C x C counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = int(num_classes)
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def update(self, pred, gt, ignore: int = IGNORE) -> "ConfusionMatrix":
        pred = np.asarray(getattr(pred, "labels", pred)).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != ignore
        self.ignored += int((~keep).sum())
        g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
        C = self.num_classes
        if (g >= C).any() or (p >= C).any() or (g < 0).any() or (p < 0).any():
            raise ValueError("class id outside the confusion matrix")
        self.counts += np.bincount(g * C + p, minlength=C * C).reshape(C, C)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both gt and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def occupancy_iou(self) -> float:
        c = self.counts
        tp = c[1:, 1:].sum()
        denom = tp + c[0, 1:].sum() + c[1:, 0].sum()
        return float(tp / denom) if denom else float("nan")


@dataclass
class MIoUResult:
    per_class: np.ndarray
    miou: float
    occupancy_iou: float
    confusion: ConfusionMatrix

    def table(self, names=CLASS_NAMES) -> str:
        lines = ["| class | IoU |", "|---|---|"]
        for c in range(1, len(self.per_class)):
            name = names[c] if c < len(names) else str(c)
            v = self.per_class[c]
            lines.append(f"| {name} | {'n/a' if np.isnan(v) else f'{v:.4f}'} |")
        lines.append(f"| **mIoU** | {self.miou:.4f} |")
        lines.append(f"| occupancy IoU | {self.occupancy_iou:.4f} |")
        return "\n".join(lines)


def summarize(cm: ConfusionMatrix) -> MIoUResult:
    iou = cm.iou()
    sem = iou[1:]
    sem = sem[~np.isnan(sem)]
    miou = float(sem.mean()) if sem.size else float("nan")
    return MIoUResult(iou, miou, cm.occupancy_iou(), cm)


def compute_miou(pred, gt, num_classes: int | None = None, ignore: int = IGNORE) -> MIoUResult:
    """IoU per class over non-ignored voxels.

    The mean runs over semantic classes (class 0, free, excluded) that
    appear in the ground truth or the prediction.
    """
    pred = np.asarray(getattr(pred, "labels", pred))
    gt = np.asarray(gt)
    if num_classes is None:
        labeled = gt[gt != ignore]
        num_classes = int(max(pred.max(initial=0), labeled.max(initial=0))) + 1
    return summarize(ConfusionMatrix(num_classes).update(pred, gt, ignore))


# ---------------------------------------------------------------- PLY export

_CUBE_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                          [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.float64)
_CUBE_FACES = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                        [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])


def export_ply(labels, path, resolution: float = 1.0, origin=(0.0, 0.0, 0.0),
               palette: np.ndarray = PALETTE, ignore: int = IGNORE) -> int:
    """Write occupied voxels as coloured cubes to an ASCII PLY file.

    Free (0) and ignored voxels are skipped. Returns the number of cubes.
    """
    labels = np.asarray(getattr(labels, "labels", labels))
    occ = np.argwhere((labels != 0) & (labels != ignore))
    n = len(occ)
    verts = (origin + (occ[:, None, :] + _CUBE_CORNERS[None]) * resolution).reshape(-1, 3)
    cls = labels[tuple(occ.T)] if n else np.zeros(0, dtype=np.int64)
    rgb = np.clip(np.rint(np.asarray(palette)[cls % len(palette)] * 255), 0, 255).astype(int)
    rgb = np.repeat(rgb, 8, axis=0)
    faces = (_CUBE_FACES[None] + 8 * np.arange(n)[:, None, None]).reshape(-1, 3)
    header = [
        "ply", "format ascii 1.0", "comment occupied voxels",
        f"element vertex {8 * n}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {12 * n}", "property list uchar int vertex_indices", "end_header",
    ]
    with Path(path).open("w") as fh:
        fh.write("\n".join(header) + "\n")
        for (x, y, z), (r, g, b) in zip(verts, rgb):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
        for a, b, c in faces:
            fh.write(f"3 {a} {b} {c}\n")
    return n


def read_ply_counts(path) -> tuple[int, int]:
    """(vertex count, face count) from a PLY header."""
    verts = faces = 0
    with Path(path).open() as fh:
        for line in fh:
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                verts = int(parts[2])
            elif parts[:2] == ["element", "face"]:
                faces = int(parts[2])
            elif parts and parts[0] == "end_header":
                break
    return verts, faces
