"""Component ablation matrix: each row retrains the student with one toggle set."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import LossWeights
from .pipeline import BranchConfig, parse_toggles
from .training import Teacher, evaluate, train

log = logging.getLogger(__name__)

DEFAULT_ROWS = (
    ("baseline", ()),
    ("+aux", ("aux",)),
    ("+icca", ("icca",)),
    ("+aux+icca", ("aux", "icca")),
    ("all", ("aux", "icca", "distill")),
)


@dataclass
class AblationRow:
    name: str
    toggles: tuple
    mious: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.mious))

    @property
    def sd(self) -> float:
        """Sample standard deviation; NaN with a single seed."""
        return float(np.std(self.mious, ddof=1)) if len(self.mious) > 1 else math.nan


@dataclass
class AblationTable:
    seeds: list
    rows: list
    teacher: list = field(default_factory=list)

    def __getitem__(self, name: str) -> AblationRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "toggles", "mean", "sd"] + [f"seed{s}" for s in self.seeds])
        for r in self.rows:
            w.writerow([r.name, "+".join(r.toggles) or "none", repr(r.mean), repr(r.sd)]
                       + [repr(m) for m in r.mious])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| row | aux | icca | distill | mIoU (mean ± sd) |",
                 "|---|:-:|:-:|:-:|---|"]
        for r in self.rows:
            marks = ["x" if t in r.toggles else "" for t in ("aux", "icca", "distill")]
            lines.append(f"| {r.name} | " + " | ".join(marks)
                         + f" | {100 * r.mean:.2f} ± {100 * r.sd:.2f} |")
        if self.teacher:
            sd = np.std(self.teacher, ddof=1) if len(self.teacher) > 1 else math.nan
            lines.append(f"\nprivileged branch: {100 * np.mean(self.teacher):.2f} ± {100 * sd:.2f}")
        return "\n".join(lines) + "\n"


def run_ablation(train_scenes: list, val_scenes: list, seeds=(0, 1, 2), rows=DEFAULT_ROWS,
                 preset: str = "toy", epochs: int = 5, lr: float = 5e-3,
                 weights: LossWeights = LossWeights(), teacher_epochs: int | None = None,
                 model: dict | None = None) -> AblationTable:
    """Train every row for every seed under identical settings and score it on ``val_scenes``.

    Rows that distill share one privileged branch per seed, trained first on
    the same scenes.
    """
    if not seeds:
        raise ValueError("at least one seed is required")
    model = dict(model or {})
    rows = [AblationRow(name, parse_toggles(t)) for name, t in rows]
    table = AblationTable(list(seeds), rows)
    needs_teacher = any("distill" in r.toggles for r in rows)
    for seed in seeds:
        teacher = None
        if needs_teacher:
            t_cfg = BranchConfig.teacher(preset, **model)
            t = train(train_scenes, t_cfg, seed, teacher_epochs or epochs, lr, weights)
            teacher = Teacher(t.store, t_cfg)
            table.teacher.append(evaluate(t.store, t_cfg, val_scenes).miou)
        for row in rows:
            cfg = BranchConfig.student(preset, row.toggles, **model)
            result = train(train_scenes, cfg, seed, epochs, lr, weights,
                           teacher if cfg.distill else None)
            row.mious.append(evaluate(result.store, cfg, val_scenes).miou)
            log.info("seed %d  %-10s mIoU %.4f", seed, row.name, row.mious[-1])
    return table
