"""Teacher pretraining, distilled student training and the ablation grid."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .data import FUNDUS, OCT, BatchStream, DatasetManifest, stream_seed
from .errors import ConfigError, TrainingError
from .evaluation import EvalReport, evaluate
from .losses import LossWeights, student_objective, teacher_targets
from .model import (
    BackboneConfig,
    ModelParams,
    OptimizerState,
    backward,
    forward,
    init_params,
    sgd_step,
)
from .numeric import bce_with_logits

log = logging.getLogger(__name__)

NO_OVERLAP_WARN_FRACTION = 0.9


@dataclass
class ArchConfig:
    """Backbone shape without the data-dependent input/class dimensions."""

    hidden_dims: tuple[int, ...] = (32,)
    feature_dim: int = 8
    activation: str = "tanh"

    def build(self, input_dim: int, num_classes: int) -> BackboneConfig:
        return BackboneConfig(input_dim, tuple(self.hidden_dims), self.feature_dim, num_classes, self.activation)


@dataclass
class TrainConfig:
    epochs: int = 60
    teacher_epochs: int | None = None  # None: same as ``epochs``
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    tau: float = 4.0
    alpha: float = 2.0
    beta: float = 1.0
    init_seed: int = 0
    data_seed: int = 0
    teacher_arch: ArchConfig = field(default_factory=ArchConfig)
    student_arch: ArchConfig = field(default_factory=ArchConfig)
    eval_every: int = 0  # 0: evaluate only after the final epoch

    def __post_init__(self) -> None:
        if isinstance(self.teacher_arch, dict):
            self.teacher_arch = ArchConfig(**self.teacher_arch)
        if isinstance(self.student_arch, dict):
            self.student_arch = ArchConfig(**self.student_arch)
        if self.epochs < 1 or (self.teacher_epochs is not None and self.teacher_epochs < 1):
            raise ConfigError("epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")
        self.weights  # validates alpha, beta, tau

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.tau)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.lr, self.momentum, self.weight_decay)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["teacher_arch"]["hidden_dims"] = list(self.teacher_arch.hidden_dims)
        d["student_arch"]["hidden_dims"] = list(self.student_arch.hidden_dims)
        return d


@dataclass
class TrainLog:
    steps: list[dict[str, Any]] = field(default_factory=list)
    epochs: list[dict[str, Any]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def cpm_skipped(self) -> int:
        return sum(1 for s in self.steps if s.get("cpm_skipped"))

    @property
    def csa_skipped(self) -> int:
        return sum(1 for s in self.steps if s.get("csa_skipped"))

    def warn(self, message: str) -> None:
        self.warnings.append(message)
        log.warning(message)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "meta", **self.meta})]
        lines += [json.dumps({"type": "step", **s}) for s in self.steps]
        lines += [json.dumps({"type": "epoch", **e}) for e in self.epochs]
        lines += [json.dumps({"type": "warning", "message": w}) for w in self.warnings]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "TrainLog":
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                kind = obj.pop("type")
                if kind == "meta":
                    out.meta = obj
                elif kind == "step":
                    out.steps.append(obj)
                elif kind == "epoch":
                    out.epochs.append(obj)
                elif kind == "warning":
                    out.warnings.append(obj["message"])
        return out


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    log: TrainLog
    report: EvalReport | None = None


def _summary(report: EvalReport) -> dict[str, Any]:
    return {k: v for k, v in report.aggregates().items()}


def _should_eval(cfg_eval_every: int, epoch: int, last: int) -> bool:
    return epoch == last or (cfg_eval_every > 0 and (epoch + 1) % cfg_eval_every == 0)


def train_classifier(
    train: DatasetManifest,
    modality: str,
    arch: ArchConfig,
    cfg: TrainConfig,
    role: str,
    epochs: int | None = None,
    eval_data: DatasetManifest | None = None,
) -> TrainResult:
    """Plain BCE training on one modality.

    ``role`` picks the independent data stream: ``'teacher'`` for fundus
    pretraining, ``'oct'`` for the single-modal baseline (the same stream the
    distilled student consumes).
    """
    epochs = cfg.epochs if epochs is None else epochs
    stream = BatchStream(train, modality, cfg.batch_size, stream_seed(cfg.data_seed, role))
    config = arch.build(stream.X.shape[1], train.num_classes)
    params = init_params(config, cfg.init_seed)
    state = cfg.optimizer()
    tlog = TrainLog(meta={"role": role, "modality": modality, "config": cfg.to_dict(),
                          "batches_per_epoch": stream.batches_per_epoch})
    result = TrainResult(params, state, tlog)
    for epoch in range(epochs):
        for batch in stream.epoch_batches():
            _, Z, cache = forward(params, batch.X)
            loss, dZ = bce_with_logits(Z, batch.Y)
            if not np.isfinite(loss):
                raise TrainingError("classification loss is not finite", step=state.step)
            grads = backward(params, cache, None, dZ)
            tlog.steps.append({"step": state.step, "epoch": epoch, "l_cls": loss, "l_total": loss,
                               "batch": batch.indices.tolist()})
            sgd_step(params, grads, state)
        _end_epoch(result, epoch, epochs, cfg, eval_data, modality)
    return result


def _end_epoch(result: TrainResult, epoch: int, epochs: int, cfg: TrainConfig,
               eval_data: DatasetManifest | None, modality: str) -> None:
    tlog = result.log
    ep = [s for s in tlog.steps if s["epoch"] == epoch]
    summary: dict[str, Any] = {"epoch": epoch,
                               "mean_l_total": float(np.mean([s["l_total"] for s in ep])),
                               "mean_l_cls": float(np.mean([s["l_cls"] for s in ep]))}
    if eval_data is not None and _should_eval(cfg.eval_every, epoch, epochs - 1):
        report = evaluate(result.params, eval_data, modality)
        summary["eval"] = _summary(report)
        result.report = report
    tlog.epochs.append(summary)


def train_teacher(fundus_train: DatasetManifest, cfg: TrainConfig,
                  eval_data: DatasetManifest | None = None) -> TrainResult:
    return train_classifier(fundus_train, FUNDUS, cfg.teacher_arch, cfg, "teacher",
                            epochs=cfg.teacher_epochs or cfg.epochs, eval_data=eval_data)


def train_baseline(oct_train: DatasetManifest, cfg: TrainConfig,
                   eval_data: DatasetManifest | None = None) -> TrainResult:
    """Single-modal OCT model: the student architecture trained with BCE only."""
    return train_classifier(oct_train, OCT, cfg.student_arch, cfg, "oct", eval_data=eval_data)


def train_student(
    oct_train: DatasetManifest,
    fundus_train: DatasetManifest,
    teacher: ModelParams,
    cfg: TrainConfig,
    eval_data: DatasetManifest | None = None,
) -> TrainResult:
    """Distill a frozen fundus teacher into an OCT student.

    Each step draws one OCT batch and, independently, one fundus batch; the
    fundus stream reshuffles on its own schedule when exhausted.
    """
    if teacher.config.num_classes != oct_train.num_classes or fundus_train.num_classes != oct_train.num_classes:
        raise ConfigError(
            f"class count mismatch: teacher {teacher.config.num_classes}, "
            f"OCT {oct_train.num_classes}, fundus {fundus_train.num_classes}"
        )
    weights = cfg.weights
    oct_stream = BatchStream(oct_train, OCT, cfg.batch_size, stream_seed(cfg.data_seed, "oct"))
    fundus_stream = BatchStream(fundus_train, FUNDUS, cfg.batch_size, stream_seed(cfg.data_seed, "fundus"))
    if fundus_stream.X.shape[1] != teacher.config.input_dim:
        raise ConfigError("fundus feature width does not match the teacher input_dim")
    fundus_iter = iter(fundus_stream)
    config = cfg.student_arch.build(oct_stream.X.shape[1], oct_train.num_classes)
    params = init_params(config, cfg.init_seed, projector_dim=teacher.config.feature_dim)
    state = cfg.optimizer()
    tlog = TrainLog(meta={"role": "student", "modality": OCT, "config": cfg.to_dict(),
                          "batches_per_epoch": oct_stream.batches_per_epoch,
                          "teacher_fingerprint": teacher.fingerprint()})
    result = TrainResult(params, state, tlog)
    n_no_distill = 0
    for epoch in range(cfg.epochs):
        for batch in oct_stream.epoch_batches():
            fb = next(fundus_iter)
            targets = teacher_targets(teacher, fb.X, fb.Y)
            lb = student_objective(params, batch.X, batch.Y, targets, weights)
            if not np.isfinite(lb.l_total):
                raise TrainingError("student loss is not finite", step=state.step)
            cpm_skipped = bool(weights.alpha) and lb.cpm_classes == 0
            csa_skipped = bool(weights.beta) and lb.csa_classes == 0
            if weights.alpha or weights.beta:
                n_no_distill += (cpm_skipped or not weights.alpha) and (csa_skipped or not weights.beta)
            tlog.steps.append({
                "step": state.step, "epoch": epoch,
                "l_cls": lb.l_cls, "l_cpm": lb.l_cpm, "l_csa": lb.l_csa, "l_total": lb.l_total,
                "cpm_classes": lb.cpm_classes, "csa_classes": lb.csa_classes,
                "cpm_skipped": cpm_skipped, "csa_skipped": csa_skipped,
                "csa_zero_norm_dropped": lb.csa_dropped_zero_norm,
                "oct_batch": batch.indices.tolist(),
                "fundus_batch": fb.indices.tolist(), "fundus_epoch": fb.epoch,
            })
            sgd_step(params, lb.grads, state)
        _end_epoch(result, epoch, cfg.epochs, cfg, eval_data, OCT)
    if tlog.steps and n_no_distill / len(tlog.steps) > NO_OVERLAP_WARN_FRACTION:
        tlog.warn(f"{n_no_distill} of {len(tlog.steps)} steps had no class overlap for distillation")
    return result


ABLATION_VARIANTS = (
    ("baseline", False, False),
    ("CSA-only", False, True),
    ("CPM-only", True, False),
    ("FDDM", True, True),
)

ABLATION_COLUMNS = ("MAP", "MAP_majority", "MAP_minority", "F1", "AUC")


@dataclass
class AblationResult:
    rows: list[dict[str, Any]]
    reports: dict[str, list[EvalReport]]
    seeds: list[int]

    def table_csv(self) -> str:
        header = ["method", "CPM", "CSA"] + [f"{c}_mean" for c in ABLATION_COLUMNS] + \
                 [f"{c}_std" for c in ABLATION_COLUMNS]
        out = [",".join(header)]
        for r in self.rows:
            vals = [r["method"], str(int(r["CPM"])), str(int(r["CSA"]))]
            vals += [_fmt(r["mean"][c]) for c in ABLATION_COLUMNS]
            vals += [_fmt(r["std"][c]) for c in ABLATION_COLUMNS]
            out.append(",".join(vals))
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict[str, Any]:
        return {"schema": "fddm-ablation/1", "seeds": self.seeds, "rows": self.rows}


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def _stats(values: Sequence[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def run_ablation(
    train: DatasetManifest,
    test: DatasetManifest,
    cfg: TrainConfig,
    seeds: Sequence[int] = (0,),
) -> AblationResult:
    """Baseline / CSA-only / CPM-only / full grid with shared seeds.

    One teacher is trained per seed and shared by the four students.
    """
    reports: dict[str, list[EvalReport]] = {name: [] for name, _, _ in ABLATION_VARIANTS}
    for seed in seeds:
        scfg = replace(cfg, init_seed=seed, data_seed=seed)
        teacher = train_teacher(train, scfg).params
        for name, use_cpm, use_csa in ABLATION_VARIANTS:
            vcfg = replace(scfg, alpha=cfg.alpha if use_cpm else 0.0, beta=cfg.beta if use_csa else 0.0)
            res = train_student(train, train, teacher, vcfg)
            reports[name].append(evaluate(res.params, test, OCT))
    rows = []
    for name, use_cpm, use_csa in ABLATION_VARIANTS:
        aggs = [r.aggregates() for r in reports[name]]
        mean, std = {}, {}
        for col in ABLATION_COLUMNS:
            mean[col], std[col] = _stats([a[col] for a in aggs])
        rows.append({"method": name, "CPM": use_cpm, "CSA": use_csa, "mean": mean, "std": std,
                     "per_seed": [{c: a[c] for c in ABLATION_COLUMNS} for a in aggs]})
    return AblationResult(rows, reports, list(seeds))
