"""Synthetic two-modality multi-label data, persistence, splitting and batching.

Each eye gets one label vector drawn through a Gaussian copula (so label
co-occurrence is controllable); every image of that eye, in either modality,
carries the same labels. Image features are a sum of per-class signature
directions plus isotropic noise. Each modality has its own signatures, built
from a component shared across modalities plus a modality-specific one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Any, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError, SplitError

FUNDUS = "FUNDUS"
OCT = "OCT"
MODALITIES = (FUNDUS, OCT)


@dataclass(frozen=True)
class ImageRecord:
    record_id: str
    eye_id: str
    patient_id: str
    modality: str
    labels: tuple[int, ...]
    features: tuple[float, ...]

    def to_json(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "eye_id": self.eye_id,
            "patient_id": self.patient_id,
            "modality": self.modality,
            "labels": list(self.labels),
            "features": list(self.features),
        }


@dataclass(eq=False)
class DatasetManifest:
    records: list[ImageRecord]
    num_classes: int
    class_names: list[str]
    provenance: str = ""
    _cache: dict[str, tuple[np.ndarray, np.ndarray, list[ImageRecord]]] = field(
        default_factory=dict, repr=False
    )

    def __post_init__(self) -> None:
        if len(self.class_names) != self.num_classes:
            raise SchemaError(f"{len(self.class_names)} class names for {self.num_classes} classes")
        seen: set[str] = set()
        eye_labels: dict[str, tuple[int, ...]] = {}
        for r in self.records:
            if r.record_id in seen:
                raise SchemaError(f"duplicate record_id {r.record_id!r}")
            seen.add(r.record_id)
            if len(r.labels) != self.num_classes:
                raise SchemaError(f"record {r.record_id!r} has {len(r.labels)} labels, expected {self.num_classes}")
            prev = eye_labels.setdefault(r.eye_id, r.labels)
            if prev != r.labels:
                raise SchemaError(f"eye {r.eye_id!r} has inconsistent labels across images")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.class_names == other.class_names
            and self.records == other.records
        )

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, modality: str) -> tuple[np.ndarray, np.ndarray, list[ImageRecord]]:
        """``(features, labels, records)`` for one modality, in file order."""
        if modality not in self._cache:
            recs = [r for r in self.records if r.modality == modality]
            if recs:
                X = np.array([r.features for r in recs], dtype=np.float64)
                Y = np.array([r.labels for r in recs], dtype=np.float64)
            else:
                X = np.zeros((0, 0))
                Y = np.zeros((0, self.num_classes))
            self._cache[modality] = (X, Y, recs)
        return self._cache[modality]

    def select(self, keep) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if keep(r)], self.num_classes,
                               list(self.class_names), self.provenance)

    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.records})

    def eyes(self) -> list[str]:
        return sorted({r.eye_id for r in self.records})

    def input_dim(self, modality: str) -> int:
        X, _, _ = self.subset(modality)
        return X.shape[1] if X.size else 0

    def class_counts(self, modality: str | None = None, level: str = "image") -> np.ndarray:
        """Positive counts per class, per image or per eye."""
        recs = [r for r in self.records if modality is None or r.modality == modality]
        if level == "eye":
            by_eye = {r.eye_id: r.labels for r in recs}
            rows = list(by_eye.values())
        else:
            rows = [r.labels for r in recs]
        if not rows:
            return np.zeros(self.num_classes, dtype=np.int64)
        return np.asarray(rows, dtype=np.int64).sum(axis=0)


# -- generation --------------------------------------------------------------

DEFAULT_CLASS_NAMES = ("Normal", "AMD", "DR", "FLD", "EXU", "RVO")


def default_correlation() -> list[list[float]]:
    # Normal is anti-correlated with every disease; fluid/exudation co-occur
    # with AMD and DR; RVO loosely tracks DR.
    return [
        [1.00, -0.50, -0.50, -0.50, -0.50, -0.30],
        [-0.50, 1.00, 0.00, 0.45, 0.40, 0.00],
        [-0.50, 0.00, 1.00, 0.35, 0.45, 0.30],
        [-0.50, 0.45, 0.35, 1.00, 0.50, 0.15],
        [-0.50, 0.40, 0.45, 0.50, 1.00, 0.10],
        [-0.30, 0.00, 0.30, 0.15, 0.10, 1.00],
    ]


@dataclass
class GeneratorConfig:
    num_patients: int = 200
    eyes_per_patient: int = 2
    images_per_eye_per_modality: int = 3
    num_classes: int = 6
    input_dim: int = 32
    class_prevalence: list[float] = field(default_factory=lambda: [0.4, 0.3, 0.25, 0.08, 0.06, 0.05])
    label_correlation: list[list[float]] = field(default_factory=default_correlation)
    # Scalar per modality, or one strength per class.
    modality_signal_strength: dict[str, Any] = field(
        default_factory=lambda: {
            FUNDUS: [2.0, 2.0, 2.0, 2.0, 2.0, 2.0],
            OCT: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        }
    )
    shared_fraction: float = 0.5
    noise_std: float = 1.0
    class_names: list[str] | None = None
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def resolved_class_names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        if self.num_classes == len(DEFAULT_CLASS_NAMES):
            return list(DEFAULT_CLASS_NAMES)
        return [f"class{c}" for c in range(self.num_classes)]

    def strengths(self, modality: str) -> np.ndarray:
        raw = self.modality_signal_strength[modality]
        arr = np.broadcast_to(np.asarray(raw, dtype=np.float64), (self.num_classes,)).copy()
        return arr

    def validate(self) -> np.ndarray:
        """Check every field; returns a factor ``L`` with ``L @ L.T == correlation``."""
        for name in ("num_patients", "eyes_per_patient", "images_per_eye_per_modality", "input_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        C = self.num_classes
        if C < 2:
            raise ConfigError("num_classes must be >= 2")
        prev = np.asarray(self.class_prevalence, dtype=np.float64)
        if prev.shape != (C,) or not ((prev > 0) & (prev < 1)).all():
            raise ConfigError(f"class_prevalence must hold {C} values in (0, 1)")
        R = np.asarray(self.label_correlation, dtype=np.float64)
        if R.shape != (C, C):
            raise ConfigError(f"label_correlation must be {C}x{C}, got {R.shape}")
        if not np.allclose(R, R.T, atol=1e-12):
            raise ConfigError("label_correlation must be symmetric")
        if not np.allclose(np.diag(R), 1.0, atol=1e-12):
            raise ConfigError("label_correlation must have a unit diagonal")
        try:
            L = np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(R)
            if w.min() < -1e-10:
                raise ConfigError(
                    f"label_correlation is not positive semidefinite (min eigenvalue {w.min():.3g})"
                ) from None
            L = V * np.sqrt(np.clip(w, 0.0, None))
        if set(self.modality_signal_strength) != set(MODALITIES):
            raise ConfigError(f"modality_signal_strength needs keys {MODALITIES}")
        for m in MODALITIES:
            try:
                s = self.strengths(m)
            except ValueError:
                raise ConfigError(f"modality_signal_strength[{m}] must be a scalar or {C} values") from None
            if (s < 0).any():
                raise ConfigError(f"modality_signal_strength[{m}] must be non-negative")
        if not 0 <= self.shared_fraction <= 1:
            raise ConfigError("shared_fraction must lie in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if len(self.resolved_class_names()) != C:
            raise ConfigError("class_names must have num_classes entries")
        return L


def _unit_rows(A: np.ndarray) -> np.ndarray:
    return A / np.linalg.norm(A, axis=1, keepdims=True)


def sample_labels(config: GeneratorConfig, n: int, rng: np.random.Generator, factor=None) -> np.ndarray:
    """Copula draw of ``n`` label vectors (n x C, int)."""
    L = config.validate() if factor is None else factor
    z = rng.standard_normal((n, config.num_classes)) @ L.T
    nd = NormalDist()
    thresholds = np.array([nd.inv_cdf(1.0 - p) for p in config.class_prevalence])
    return (z > thresholds).astype(np.int64)


def generate_synthetic(config: GeneratorConfig) -> DatasetManifest:
    L = config.validate()
    C, d = config.num_classes, config.input_dim
    rng = np.random.default_rng(config.seed)
    shared = _unit_rows(rng.standard_normal((C, d)))
    signatures = {}
    for m in MODALITIES:
        own = _unit_rows(rng.standard_normal((C, d)))
        sf = config.shared_fraction
        signatures[m] = _unit_rows(np.sqrt(sf) * shared + np.sqrt(1.0 - sf) * own)
    n_eyes = config.num_patients * config.eyes_per_patient
    labels = sample_labels(config, n_eyes, rng, factor=L)
    strengths = {m: config.strengths(m) for m in MODALITIES}
    k = config.images_per_eye_per_modality
    records: list[ImageRecord] = []
    for e in range(n_eyes):
        pid = f"P{e // config.eyes_per_patient:04d}"
        eid = f"{pid}-E{e % config.eyes_per_patient}"
        y = labels[e]
        for m in MODALITIES:
            mean = (y * strengths[m]) @ signatures[m]
            feats = mean + config.noise_std * rng.standard_normal((k, d))
            for i in range(k):
                records.append(ImageRecord(
                    record_id=f"{eid}-{m}-{i}",
                    eye_id=eid,
                    patient_id=pid,
                    modality=m,
                    labels=tuple(int(v) for v in y),
                    features=tuple(float(v) for v in feats[i]),
                ))
    return DatasetManifest(records, C, config.resolved_class_names(),
                           provenance=f"synthetic:{config.hash()}")


# -- persistence -------------------------------------------------------------

def save_dataset(manifest: DatasetManifest, path) -> None:
    """One JSON header line, then one record per line (UTF-8, LF)."""
    lines = [json.dumps({"num_classes": manifest.num_classes, "class_names": manifest.class_names})]
    lines.extend(json.dumps(r.to_json()) for r in manifest.records)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


_RECORD_KEYS = {"record_id", "eye_id", "patient_id", "modality", "labels", "features"}


def load_dataset(path) -> DatasetManifest:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
        C = int(header["num_classes"])
        names = list(header["class_names"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad header ({exc})", line=1) from exc
    if len(names) != C:
        raise SchemaError(f"header lists {len(names)} class names for {C} classes", line=1)
    records = []
    seen_eyes: dict[str, tuple[int, ...]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON ({exc.msg})", line=lineno) from exc
        if not isinstance(obj, dict) or set(obj) != _RECORD_KEYS:
            raise SchemaError("record keys do not match the schema", line=lineno)
        labels = tuple(int(v) for v in obj["labels"])
        if len(labels) != C:
            raise SchemaError(f"labels have length {len(labels)}, header says {C}", line=lineno)
        if any(v not in (0, 1) for v in labels):
            raise SchemaError("labels must be 0/1", line=lineno)
        if obj["modality"] not in MODALITIES:
            raise SchemaError(f"unknown modality {obj['modality']!r}", line=lineno)
        feats = tuple(float(v) for v in obj["features"])
        if not all(np.isfinite(feats)):
            raise SchemaError("non-finite feature value", line=lineno)
        prev = seen_eyes.setdefault(obj["eye_id"], labels)
        if prev != labels:
            raise SchemaError(f"eye {obj['eye_id']!r} has inconsistent labels", line=lineno)
        records.append(ImageRecord(obj["record_id"], obj["eye_id"], obj["patient_id"],
                                   obj["modality"], labels, feats))
    try:
        return DatasetManifest(records, C, names, provenance=str(path))
    except SchemaError as exc:
        raise SchemaError(str(exc)) from exc


# -- splitting and batching --------------------------------------------------

def split_by_patient(
    manifest: DatasetManifest, test_fraction: float = 0.2, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Patient-disjoint ``(train, test)``.

    Patients are shuffled by ``seed`` and moved to the test side until the
    test share of eyes reaches ``test_fraction``.
    """
    if not 0 < test_fraction < 1:
        raise SplitError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    patients = manifest.patients()
    if len(patients) < 2:
        raise SplitError("need at least two patients to split")
    eyes_of: dict[str, set[str]] = {}
    for r in manifest.records:
        eyes_of.setdefault(r.patient_id, set()).add(r.eye_id)
    total = sum(len(v) for v in eyes_of.values())
    order = np.random.default_rng(seed).permutation(len(patients))
    test: set[str] = set()
    n_test = 0
    for idx in order:
        if n_test / total >= test_fraction:
            break
        pid = patients[idx]
        test.add(pid)
        n_test += len(eyes_of[pid])
    if len(test) == len(patients):
        raise SplitError("test_fraction leaves no training patients")
    train = manifest.select(lambda r: r.patient_id not in test)
    test_m = manifest.select(lambda r: r.patient_id in test)
    return train, test_m


@dataclass
class Batch:
    indices: np.ndarray  # rows into the modality subset
    X: np.ndarray
    Y: np.ndarray
    epoch: int


class BatchStream:
    """Epoch-wise shuffled full batches from one modality.

    ``epoch_batches()`` yields one epoch; iterating the stream itself cycles
    forever, reshuffling at each epoch boundary. Streams built from different
    seeds are independent: nothing here looks at eye or patient identity.
    """

    def __init__(self, manifest: DatasetManifest, modality: str, batch_size: int, seed) -> None:
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        X, Y, recs = manifest.subset(modality)
        if not recs:
            raise DataError(f"no {modality} records in manifest")
        if len(recs) < batch_size:
            raise DataError(f"{len(recs)} {modality} records is fewer than one batch of {batch_size}")
        self.X, self.Y, self.records = X, Y, recs
        self.modality = modality
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.epoch = 0

    @property
    def batches_per_epoch(self) -> int:
        return len(self.records) // self.batch_size

    def epoch_batches(self) -> Iterator[Batch]:
        perm = self.rng.permutation(len(self.records))
        epoch = self.epoch
        self.epoch += 1
        b = self.batch_size
        for k in range(self.batches_per_epoch):
            idx = perm[k * b:(k + 1) * b]
            yield Batch(idx, self.X[idx], self.Y[idx], epoch)

    def __iter__(self) -> Iterator[Batch]:
        while True:
            yield from self.epoch_batches()


def batch_stream(manifest: DatasetManifest, modality: str, batch_size: int, seed) -> Iterator[Batch]:
    """Infinite iterator of shuffled full batches; see :class:`BatchStream`."""
    return iter(BatchStream(manifest, modality, batch_size, seed))


def stream_seed(data_seed: int, role: str) -> np.random.SeedSequence:
    """Independent seed sequence per stream role ('teacher', 'oct', 'fundus')."""
    tags = {"teacher": 0, "oct": 1, "fundus": 2}
    return np.random.SeedSequence([int(data_seed), tags[role]])


def eye_groups(records: Sequence[ImageRecord]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.eye_id, []).append(i)
    return groups
