"""Finite-difference check of every loss against all student parameters."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .losses import LossWeights, student_objective, teacher_targets
from .model import BackboneConfig, init_params
from .numeric import grad_check

LOSS_ROWS = (("L_CLS", "cls", "l_cls"), ("L_CPM", "cpm", "l_cpm"),
             ("L_CSA", "csa", "l_csa"), ("L_OCT", None, "l_total"))
TOLERANCE = 1e-5


def _labels(rng: np.random.Generator, B: int, C: int) -> np.ndarray:
    # every class at least once, so every term has gradient to check
    Y = (rng.random((B, C)) < 0.5).astype(np.float64)
    for c in range(C):
        Y[rng.integers(0, B), c] = 1.0
    return Y


def gradient_suite(
    seed: int = 0,
    instances: int = 20,
    batch: int = 4,
    num_classes: int = 3,
    feature_dim: int = 5,
    input_dim: int = 6,
    corrupt: str | None = None,
    eps: float = 1e-6,
) -> dict[str, float]:
    """Max relative gradient error per loss over random student/teacher pairs.

    ``corrupt`` names a loss row (e.g. ``'L_CPM'``) whose analytic gradient
    is deliberately perturbed; used as a negative control.
    """
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name, _, _ in LOSS_ROWS}
    weights = LossWeights()
    for k in range(instances):
        hidden = (int(rng.integers(3, 8)),)
        student_cfg = BackboneConfig(input_dim, hidden, feature_dim, num_classes)
        teacher_dim = int(rng.integers(3, 8))
        teacher_cfg = BackboneConfig(input_dim, hidden, teacher_dim, num_classes)
        student = init_params(student_cfg, int(rng.integers(1 << 30)), projector_dim=teacher_dim)
        teacher = init_params(teacher_cfg, int(rng.integers(1 << 30)))
        # move weights away from their tiny init scale so tanh is not near-linear
        for a in student.arrays.values():
            a += rng.normal(scale=0.3, size=a.shape)
        X = rng.normal(size=(batch, input_dim))
        Y = _labels(rng, batch, num_classes)
        targets = teacher_targets(teacher, rng.normal(size=(batch, input_dim)), _labels(rng, batch, num_classes))
        lb = student_objective(student, X, Y, targets, weights, per_component=True)
        names = student.names()
        for row, comp, attr in LOSS_ROWS:
            g = lb.grads if comp is None else lb.component_grads[comp]
            analytic = np.concatenate([g.get(n, np.zeros_like(student.arrays[n])).ravel() for n in names])
            if corrupt == row:
                analytic = analytic.copy()
                analytic[k % analytic.size] += 1.0

            f: Callable[[np.ndarray], float] = (
                lambda x, attr=attr: getattr(student_objective(student.with_flat(x), X, Y, targets, weights), attr)
            )
            worst[row] = max(worst[row], grad_check(f, student.flatten(), eps, analytic=analytic))
    return worst
