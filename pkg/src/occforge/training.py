"""Training loops for the two branches and two-phase distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, ParameterStore, Tape, backward, no_grad
from .evaluation import ConfusionMatrix, MIoUResult, summarize
from .losses import (
    LossBreakdown, LossCurve, LossWeights, distill_loss, scal_losses, semantic_aux_loss,
    ssc_loss, total_loss,
)
from .pipeline import BranchConfig, BranchOutput, run_branch
from .scenes import SyntheticScene, project_labels_to_image, target_labels

log = logging.getLogger(__name__)


@dataclass
class SceneTargets:
    voxels: np.ndarray
    pixels: np.ndarray


def scene_targets(scene: SyntheticScene) -> SceneTargets:
    cam = scene.cameras[-1]
    return SceneTargets(target_labels(scene), project_labels_to_image(scene.cloud, cam.scaled(4)))


def branch_losses(out: BranchOutput, targets: SceneTargets, cfg: BranchConfig,
                  weights: LossWeights, teacher_volume=None) -> LossBreakdown:
    sem, geo = scal_losses(out.semantic, targets.voxels)
    terms = {"ssc": ssc_loss(out.semantic, targets.voxels), "scal_sem": sem, "scal_geo": geo}
    if cfg.aux_loss:
        terms["sem"] = semantic_aux_loss(out.semantic_2d, targets.pixels)
    if cfg.distill and teacher_volume is not None:
        terms["distill"] = distill_loss(teacher_volume, out.volume)
    return total_loss(terms, weights)


@dataclass
class Teacher:
    store: ParameterStore
    cfg: BranchConfig

    def volume(self, scene: SyntheticScene):
        with no_grad():
            return run_branch(scene, self.store, self.cfg).volume.detach()


@dataclass
class TrainResult:
    store: ParameterStore
    cfg: BranchConfig
    curve: LossCurve = field(default_factory=LossCurve)


def init_store(scene: SyntheticScene, cfg: BranchConfig, seed: int) -> ParameterStore:
    """Materialize every parameter the branch uses, without recording."""
    store = ParameterStore(seed)
    with no_grad():
        run_branch(scene, store, cfg)
    return store


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    frac = step / max(total - 1, 1)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


def train(scenes: list, cfg: BranchConfig, seed: int = 0, epochs: int = 10, lr: float = 5e-3,
          weights: LossWeights = LossWeights(), teacher: Teacher | None = None,
          store: ParameterStore | None = None, on_step=None) -> TrainResult:
    """Adam over ``scenes`` for ``epochs`` passes in a seed-determined order.

    With ``cfg.distill`` a frozen ``teacher`` supplies per-scene target
    volumes, computed once up front. ``on_step(step, store)`` runs after
    every update; returning True stops training early.
    """
    if not scenes:
        raise ValueError("no training scenes")
    if cfg.distill and teacher is None:
        raise ValueError("distillation needs a trained teacher")
    store = store if store is not None else init_store(scenes[0], cfg, seed)
    targets = [scene_targets(s) for s in scenes]
    teacher_vols = [teacher.volume(s) for s in scenes] if cfg.distill else [None] * len(scenes)
    opt = Adam(store, lr=lr)
    rng = np.random.default_rng(seed)
    result = TrainResult(store, cfg)
    step = 0
    total = epochs * len(scenes)
    for epoch in range(epochs):
        for i in rng.permutation(len(scenes)):
            opt.lr = cosine_lr(lr, step, total)
            with Tape() as tape:
                out = run_branch(scenes[i], store, cfg)
                br = branch_losses(out, targets[i], cfg, weights, teacher_vols[i])
            store.zero_grad()
            backward(br.total, tape)
            opt.step()
            result.curve.append(step, br)
            step += 1
            if on_step is not None and on_step(step, store):
                return result
        log.info("epoch %d/%d  loss %.4f", epoch + 1, epochs, result.curve.rows[-1][-1])
    return result


def train_distilled(scenes: list, student_cfg: BranchConfig, teacher_cfg: BranchConfig,
                    seed: int = 0, epochs: int = 10, lr: float = 5e-3,
                    weights: LossWeights = LossWeights(),
                    teacher_epochs: int | None = None) -> tuple[TrainResult, TrainResult]:
    """Phase 1 trains the privileged branch; phase 2 the student against it."""
    t = train(scenes, teacher_cfg, seed, teacher_epochs or epochs, lr, weights)
    s = train(scenes, student_cfg, seed, epochs, lr, weights, Teacher(t.store, teacher_cfg))
    return s, t


def evaluate(store: ParameterStore, cfg: BranchConfig, scenes: list) -> MIoUResult:
    """Dataset-level IoU from a confusion matrix accumulated over ``scenes``."""
    cm = ConfusionMatrix(cfg.num_classes)
    with no_grad():
        for scene in scenes:
            out = run_branch(scene, store, cfg)
            cm.update(out.semantic.labels, target_labels(scene))
    return summarize(cm)
