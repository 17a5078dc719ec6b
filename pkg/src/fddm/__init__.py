"""Unpaired cross-modal distillation for multi-label classification.

A fundus-trained teacher supervises an OCT student through two class-level
losses: class prototype matching (CPM) on per-class mean features and class
similarity alignment (CSA) on the cosine structure of per-class mean logits.
No per-sample pairing between the modalities is needed.
"""

__version__ = "0.1.0"

from .kernels import IMPLEMENTATION as KERNEL_IMPLEMENTATION
from .losses import LossWeights, loss_cpm, loss_csa, loss_total, student_objective
from .model import BackboneConfig, init_params
from .training import TrainConfig, run_ablation, train_baseline, train_student, train_teacher

__all__ = [
    "KERNEL_IMPLEMENTATION",
    "BackboneConfig",
    "LossWeights",
    "TrainConfig",
    "init_params",
    "loss_cpm",
    "loss_csa",
    "loss_total",
    "run_ablation",
    "student_objective",
    "train_baseline",
    "train_student",
    "train_teacher",
]
