"""Toy-scale differentiable monocular semantic occupancy prediction."""

__version__ = "0.1.0"

from .ablation import AblationTable, run_ablation
from .evaluation import ConfusionMatrix, MIoUResult, compute_miou, export_ply
from .losses import LossWeights, distill_loss, scal_losses, semantic_aux_loss, ssc_loss, total_loss
from .pipeline import BranchConfig, run_branch, run_student, run_teacher
from .scenes import PRESETS, SyntheticScene, generate_scene, read_scene, write_scene
from .training import Teacher, evaluate, train, train_distilled

__all__ = [
    "AblationTable", "BranchConfig", "ConfusionMatrix", "LossWeights", "MIoUResult", "PRESETS",
    "SyntheticScene", "Teacher", "compute_miou", "distill_loss", "evaluate", "export_ply",
    "generate_scene", "read_scene", "run_ablation", "run_branch", "run_student", "run_teacher",
    "scal_losses", "semantic_aux_loss", "ssc_loss", "total_loss", "train", "train_distilled",
    "write_scene",
]
