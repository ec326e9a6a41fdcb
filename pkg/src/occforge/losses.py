"""Training objectives: 2D auxiliary and 3D semantic cross-entropy, scene-class
affinity terms, feature distillation, and their weighted total."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor

IGNORE = 255
EPS = 1e-12
TERMS = ("sem", "distill", "ssc", "scal_sem", "scal_geo")


def _logits(pred) -> Tensor:
    return getattr(pred, "logits", pred)


def _zero_like(t: Tensor) -> Tensor:
    # connected to the graph so callers always get a gradient (of zeros)
    return t.sum() * 0.0


def cross_entropy(logits: Tensor, targets, ignore: int = IGNORE) -> Tensor:
    """Mean -log softmax over entries whose target is not ``ignore``.

    ``logits`` is [..., C] and ``targets`` has the leading shape.
    """
    targets = np.asarray(targets)
    C = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    flat_t = targets.reshape(-1)
    rows = np.nonzero(flat_t != ignore)[0]
    if rows.size == 0:
        return _zero_like(logits)
    if flat_t[rows].max() >= C or flat_t[rows].min() < 0:
        raise ValueError("target class out of range")
    lsm = ops.log_softmax(logits.reshape(-1, C)[rows], axis=-1)
    picked = ops.index(lsm, (np.arange(rows.size), flat_t[rows]))
    return -picked.mean()


def semantic_aux_loss(pred, sparse_gt) -> Tensor:
    """Cross-entropy of a [C', h, w] map against sparse per-pixel labels."""
    logits = _logits(pred)
    return cross_entropy(logits.transpose(1, 2, 0), sparse_gt)


def ssc_loss(pred, gt) -> Tensor:
    return cross_entropy(_logits(pred), gt)


def _affinity(p: Tensor, g: np.ndarray) -> Tensor:
    """-[log precision + log recall + log specificity] per column of p [M, K]."""
    inter = (p * g).sum(axis=0)
    precision = (inter + EPS) / (p.sum(axis=0) + EPS)
    recall = (inter + EPS) * (1.0 / (g.sum(axis=0) + EPS))
    spec_num = ((1.0 - p) * (1.0 - g)).sum(axis=0)
    specificity = (spec_num + EPS) * (1.0 / ((1.0 - g).sum(axis=0) + EPS))
    return -(ops.log(precision) + ops.log(recall) + ops.log(specificity))


def scal_losses(pred, gt, ignore: int = IGNORE) -> tuple[Tensor, Tensor]:
    """Scene-class affinity over labeled voxels: (semantic, geometric).

    The semantic term averages the per-class affinity over classes present
    in ``gt``; the geometric term scores the occupied side of the
    occupied/free split, with occupied probability 1 - p(free).
    """
    logits = _logits(pred)
    C = logits.shape[-1]
    gt = np.asarray(gt)
    flat_t = gt.reshape(-1)
    rows = np.nonzero(flat_t != ignore)[0]
    if rows.size == 0:
        z = _zero_like(logits)
        return z, z
    probs = ops.softmax(logits.reshape(-1, C)[rows], axis=-1)
    labels = flat_t[rows]
    onehot = np.eye(C)[labels]
    present = np.nonzero(onehot.sum(axis=0) > 0)[0]
    sem = ops.index(_affinity(probs, onehot), present).mean()

    occupied = (labels != 0).astype(np.float64)
    if occupied.sum() == 0:
        return sem, _zero_like(logits)
    p_occ = 1.0 - probs[:, 0:1]
    geo = _affinity(p_occ, occupied[:, None]).sum()
    return sem, geo


def distill_loss(teacher, student) -> Tensor:
    """Mean per-voxel KL(softmax(teacher) || softmax(student)) over channels.

    The teacher side is treated as a constant.
    """
    t = _logits(teacher)
    s = _logits(student)
    if t.shape != s.shape:
        raise ValueError(f"teacher {t.shape} and student {s.shape} volumes differ")
    d = t.shape[-1]
    t_log = ops.log_softmax(Tensor(t.data.reshape(-1, d)), axis=-1).data
    s_log = ops.log_softmax(s.reshape(-1, d), axis=-1)
    kl = (np.exp(t_log) * (t_log - s_log)).sum(axis=-1).mean()
    # rounding can leave a tiny negative value when the distributions agree
    return ops.relu(kl)


@dataclass(frozen=True)
class LossWeights:
    sem: float = 4.0
    distill: float = 3.0
    ssc: float = 2.0
    scal_sem: float = 1.0
    scal_geo: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be a nonnegative number, got {v}")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, t) for t in TERMS)

    @classmethod
    def from_lambdas(cls, *lambdas) -> "LossWeights":
        return cls(*[float(v) for v in lambdas])


@dataclass
class LossBreakdown:
    sem: Tensor
    distill: Tensor
    ssc: Tensor
    scal_sem: Tensor
    scal_geo: Tensor
    total: Tensor

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).item()) for k in TERMS + ("total",)}


def total_loss(terms: dict, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of the five terms; missing or None terms count as zero."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    vals = {}
    for name in TERMS:
        t = terms.get(name)
        t = Tensor(0.0) if t is None else t
        if t.size != 1:
            raise ValueError(f"loss term {name} is not a scalar")
        vals[name] = t.reshape(())
    w = weights.as_tuple()
    total = vals[TERMS[0]] * w[0]
    for name, lam in zip(TERMS[1:], w[1:]):
        total = total + vals[name] * lam
    return LossBreakdown(total=total, **vals)


class LossCurve:
    """Per-step loss rows, written as CSV."""

    header = ("step",) + TERMS + ("total",)

    def __init__(self):
        self.rows: list[tuple] = []

    def append(self, step: int, breakdown: LossBreakdown) -> None:
        d = breakdown.as_dict()
        self.rows.append((int(step),) + tuple(d[k] for k in self.header[1:]))

    def __len__(self) -> int:
        return len(self.rows)

    def write(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for row in self.rows:
                w.writerow([row[0]] + [repr(v) for v in row[1:]])

    @classmethod
    def read(cls, path) -> "LossCurve":
        curve = cls()
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                curve.rows.append((int(row[0]),) + tuple(float(v) for v in row[1:]))
        return curve
