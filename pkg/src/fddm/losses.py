"""Classification, prototype-matching and similarity-alignment losses.

Distillation losses return gradients with respect to the *student* side only;
teacher quantities are constants. Per-class KL terms are averaged over the
classes that are usable in the current pair of batches, so a batch with no
usable classes contributes exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError
from .model import ModelParams, backward, forward, project, project_backward
from .numeric import NORM_EPS, bce_with_logits


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    beta: float = 1.0
    tau: float = 4.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")


@dataclass
class PrototypeSet:
    """Per-class mean feature vectors; ``counts`` keeps the divisors for backprop."""

    prototypes: np.ndarray  # C x D
    present: np.ndarray  # C, int8
    counts: np.ndarray  # C, float64


@dataclass
class ClassLogitProfile:
    """Row ``c`` is the mean logit vector over samples positive for class ``c``."""

    rows: np.ndarray  # C x C
    present: np.ndarray
    counts: np.ndarray


def _class_means(values: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    values = np.ascontiguousarray(values, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    if values.ndim != 2 or labels.ndim != 2 or values.shape[0] != labels.shape[0]:
        raise ShapeError(f"incompatible shapes {values.shape} and labels {labels.shape}")
    M, counts = kernels.masked_mean(values, labels)
    return M, (counts > 0).astype(np.int8), counts


def build_prototypes(features, labels, projector: ModelParams | None = None) -> PrototypeSet:
    """Class prototypes of ``features``, projected first when ``projector`` is given."""
    if projector is not None:
        features, _ = project(projector, features)
    M, present, counts = _class_means(features, labels)
    return PrototypeSet(M, present, counts)


def build_class_logit_profile(logits, labels) -> ClassLogitProfile:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} differ")
    M, present, counts = _class_means(logits, labels)
    return ClassLogitProfile(M, present, counts)


def class_mean_backward(grad_rows: np.ndarray, labels, counts: np.ndarray) -> np.ndarray:
    """Map a gradient on class-mean rows back onto the per-sample rows."""
    return kernels.masked_mean_backward(
        np.ascontiguousarray(grad_rows, dtype=np.float64),
        np.ascontiguousarray(labels, dtype=np.float64),
        np.ascontiguousarray(counts, dtype=np.float64),
    )


@dataclass
class DistillResult:
    value: float
    grad: np.ndarray  # gradient w.r.t. the student's class rows (prototypes or profile)
    included: np.ndarray  # bool mask of classes that contributed
    flag: str | None = None
    dropped_zero_norm: int = 0


def loss_cpm(teacher: PrototypeSet, student: PrototypeSet, tau: float) -> DistillResult:
    """Mean over mutually present classes of ``KL(softmax(e_t/tau) || softmax(e_s/tau))``."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    T, S = teacher.prototypes, student.prototypes
    if T.shape != S.shape:
        raise ShapeError(f"teacher prototypes {T.shape} vs student {S.shape}")
    included = (teacher.present > 0) & (student.present > 0)
    grad = np.zeros_like(S)
    n = int(included.sum())
    if n == 0:
        return DistillResult(0.0, grad, included, flag="no-overlap")
    kl, g = kernels.softmax_kl_rows(
        np.ascontiguousarray(T[included]), np.ascontiguousarray(S[included]), float(tau)
    )
    grad[included] = g / n
    return DistillResult(float(kl.sum() / n), grad, included)


def loss_csa(teacher: ClassLogitProfile, student: ClassLogitProfile, tau: float) -> DistillResult:
    """Alignment of the inter-class cosine-similarity structure of class-mean logits.

    For the set ``S`` of classes present on both sides (with nonzero rows),
    row ``c`` of each side's cosine matrix restricted to ``S`` is softened by
    ``softmax(./tau)``; the loss is the mean row-wise KL, teacher first.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    Tq, Sq = teacher.rows, student.rows
    if Tq.shape != Sq.shape:
        raise ShapeError(f"teacher profile {Tq.shape} vs student {Sq.shape}")
    both = (teacher.present > 0) & (student.present > 0)
    nonzero = (np.linalg.norm(Tq, axis=1) > NORM_EPS) & (np.linalg.norm(Sq, axis=1) > NORM_EPS)
    included = both & nonzero
    dropped = int((both & ~nonzero).sum())
    grad = np.zeros_like(Sq)
    n = int(included.sum())
    if n < 2:
        return DistillResult(0.0, grad, np.zeros_like(included), flag="insufficient-classes",
                             dropped_zero_norm=dropped)
    Ts = np.ascontiguousarray(Tq[included])
    Ss = np.ascontiguousarray(Sq[included])
    Kt, _ = kernels.cosine_matrix(Ts)
    Ks, norms = kernels.cosine_matrix(Ss)
    kl, gK = kernels.softmax_kl_rows(Kt, Ks, float(tau))
    gK = np.ascontiguousarray(gK / n)
    grad[included] = kernels.cosine_matrix_backward(gK, Ss, Ks, norms)
    return DistillResult(float(kl.sum() / n), grad, included, dropped_zero_norm=dropped)


@dataclass
class LossBreakdown:
    l_cls: float
    l_cpm: float
    l_csa: float
    l_total: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    component_grads: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    cpm_flag: str | None = None
    csa_flag: str | None = None
    cpm_classes: int = 0
    csa_classes: int = 0
    csa_dropped_zero_norm: int = 0


def _add_grads(acc: dict[str, np.ndarray], g: dict[str, np.ndarray], w: float) -> None:
    for k, v in g.items():
        acc[k] = acc[k] + w * v if k in acc else w * v


def loss_total(
    l_cls: tuple[float, dict[str, np.ndarray]],
    l_cpm: tuple[float, dict[str, np.ndarray]],
    l_csa: tuple[float, dict[str, np.ndarray]],
    weights: LossWeights,
) -> LossBreakdown:
    """``l_cls + alpha * l_cpm + beta * l_csa`` for values and parameter gradients.

    Terms with zero weight are skipped, so ``alpha = beta = 0`` reproduces the
    classification gradient bit-for-bit.
    """
    if weights.alpha < 0 or weights.beta < 0:
        raise ParameterError("loss weights must be non-negative")
    grads = {k: v.copy() for k, v in l_cls[1].items()}
    if weights.alpha:
        _add_grads(grads, l_cpm[1], weights.alpha)
    if weights.beta:
        _add_grads(grads, l_csa[1], weights.beta)
    total = l_cls[0] + weights.alpha * l_cpm[0] + weights.beta * l_csa[0]
    return LossBreakdown(l_cls[0], l_cpm[0], l_csa[0], total, grads)


@dataclass
class TeacherTargets:
    """Teacher-side constants for one fundus batch."""

    prototypes: PrototypeSet
    profile: ClassLogitProfile


def teacher_targets(teacher: ModelParams, X, Y) -> TeacherTargets:
    V, Z, _ = forward(teacher, X)
    return TeacherTargets(build_prototypes(V, Y), build_class_logit_profile(Z, Y))


def student_objective(
    student: ModelParams,
    X,
    Y,
    targets: TeacherTargets | None,
    weights: LossWeights,
    per_component: bool = False,
) -> LossBreakdown:
    """Forward the student on an OCT batch, evaluate every loss and backprop.

    ``grads`` always holds the gradient of the weighted total. With
    ``per_component=True`` the parameter gradients of each individual loss
    are also returned under ``component_grads['cls'|'cpm'|'csa']``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    V, Z, cache = forward(student, X)
    l_cls, dZ_cls = bce_with_logits(Z, Y)

    l_cpm = l_csa = 0.0
    dP = dZ_csa = None
    pcache = None
    cpm = csa = None
    need_distill = targets is not None and (weights.alpha or weights.beta or per_component)
    if need_distill:
        P, pcache = project(student, V)
        student_protos = build_prototypes(P, Y)
        cpm = loss_cpm(targets.prototypes, student_protos, weights.tau)
        l_cpm = cpm.value
        dP = class_mean_backward(cpm.grad, Y, student_protos.counts)
        profile = build_class_logit_profile(Z, Y)
        csa = loss_csa(targets.profile, profile, weights.tau)
        l_csa = csa.value
        dZ_csa = class_mean_backward(csa.grad, Y, profile.counts)

    def param_grads(dZ, dPw) -> dict[str, np.ndarray]:
        dV = None
        pg: dict[str, np.ndarray] = {}
        if dPw is not None:
            dV, pg = project_backward(student, pcache, dPw)
        g = backward(student, cache, dV, dZ)
        g.update(pg)
        return g

    dZ = dZ_cls
    if need_distill and weights.beta:
        dZ = dZ_cls + weights.beta * dZ_csa
    dPw = weights.alpha * dP if (need_distill and weights.alpha) else None
    grads = param_grads(dZ, dPw)
    total = l_cls + weights.alpha * l_cpm + weights.beta * l_csa
    out = LossBreakdown(l_cls, l_cpm, l_csa, total, grads)
    if cpm is not None:
        out.cpm_flag, out.cpm_classes = cpm.flag, int(cpm.included.sum())
        out.csa_flag, out.csa_classes = csa.flag, int(csa.included.sum())
        out.csa_dropped_zero_norm = csa.dropped_zero_norm
    if per_component:
        comp = {"cls": param_grads(dZ_cls, None)}
        if need_distill:
            comp["cpm"] = param_grads(np.zeros_like(Z), dP)
            comp["csa"] = param_grads(dZ_csa, None)
        out.component_grads = comp
    return out

