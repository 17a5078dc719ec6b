"""Small MLP backbone, projector head and SGD optimizer with manual backprop.

Layout of a model's parameters (all float64, ``y = x @ W + b``):

* ``enc{k}.W`` / ``enc{k}.b`` -- encoder layers, activation after each; the
  output of the last one is the feature vector ``V``.
* ``head.W`` / ``head.b`` -- linear multi-label head producing logits ``Z``.
* ``proj0.*`` / ``proj1.*`` -- student-only projector mapping ``V`` into the
  teacher's feature space (activation between the two layers only).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CapabilityError, ConfigError, DataError, ShapeError, TrainingError

CHECKPOINT_FORMAT = "fddm-checkpoint/1"

ACTIVATIONS = ("tanh", "identity")


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad(name: str, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation expressed through its output."""
    if name == "tanh":
        return 1.0 - out * out
    return np.ones_like(out)


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    feature_dim: int
    num_classes: int
    activation: str = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be non-empty and positive, got {self.hidden_dims}")
        if self.feature_dim < 2:
            raise ConfigError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def encoder_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.feature_dim]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BackboneConfig":
        return cls(**d)


@dataclass
class ModelParams:
    config: BackboneConfig
    arrays: dict[str, np.ndarray]
    projector_dim: int | None = None
    projector_activation: str | None = None
    seed: int | None = None

    @property
    def has_projector(self) -> bool:
        return self.projector_dim is not None

    @property
    def n_encoder_layers(self) -> int:
        return len(self.config.encoder_dims) - 1

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.arrays.items()},
            self.projector_dim,
            self.projector_activation,
            self.seed,
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        out = self.copy()
        pos = 0
        for k, a in out.arrays.items():
            n = a.size
            out.arrays[k] = np.asarray(flat[pos:pos + n], dtype=np.float64).reshape(a.shape).copy()
            pos += n
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays.values())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, a in self.arrays.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(
    config: BackboneConfig,
    seed: int,
    projector_dim: int | None = None,
    projector_activation: str | None = None,
) -> ModelParams:
    """Glorot-uniform weights, zero biases; fully determined by ``seed``.

    The projector draws from an independent child stream, so adding one does
    not change the backbone weights for a given seed.
    """
    if projector_dim is not None and projector_dim < 1:
        raise ConfigError(f"projector_dim must be positive, got {projector_dim}")
    root = np.random.SeedSequence(int(seed))
    backbone_ss, projector_ss = root.spawn(2)
    rng = np.random.default_rng(backbone_ss)
    arrays: dict[str, np.ndarray] = {}
    dims = config.encoder_dims
    for k in range(len(dims) - 1):
        arrays[f"enc{k}.W"] = _glorot(rng, dims[k], dims[k + 1])
        arrays[f"enc{k}.b"] = np.zeros(dims[k + 1])
    arrays["head.W"] = _glorot(rng, config.feature_dim, config.num_classes)
    arrays["head.b"] = np.zeros(config.num_classes)
    if projector_dim is not None:
        prng = np.random.default_rng(projector_ss)
        arrays["proj0.W"] = _glorot(prng, config.feature_dim, projector_dim)
        arrays["proj0.b"] = np.zeros(projector_dim)
        arrays["proj1.W"] = _glorot(prng, projector_dim, projector_dim)
        arrays["proj1.b"] = np.zeros(projector_dim)
        projector_activation = projector_activation or config.activation
        if projector_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown projector activation {projector_activation!r}")
    else:
        projector_activation = None
    return ModelParams(config, arrays, projector_dim, projector_activation, int(seed))


@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # input followed by each encoder layer output
    features: np.ndarray


def forward(params: ModelParams, X) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Returns ``(V, Z, cache)``: features, logits and what backward needs."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.config.input_dim:
        raise ShapeError(f"expected (B, {params.config.input_dim}) input, got {X.shape}")
    act = params.config.activation
    h = X
    acts = [h]
    for k in range(params.n_encoder_layers):
        h = _act(act, h @ params.arrays[f"enc{k}.W"] + params.arrays[f"enc{k}.b"])
        acts.append(h)
    Z = h @ params.arrays["head.W"] + params.arrays["head.b"]
    return h, Z, ForwardCache(acts, h)


def backward(
    params: ModelParams,
    cache: ForwardCache,
    dV: np.ndarray | None,
    dZ: np.ndarray | None,
) -> dict[str, np.ndarray]:
    """Gradients of encoder and head parameters given upstream ``dV`` / ``dZ``.

    ``dV`` is any gradient arriving at the features other than through the
    head (e.g. from the projector).
    """
    grads: dict[str, np.ndarray] = {}
    V = cache.features
    if dZ is None:
        dZ = np.zeros((V.shape[0], params.config.num_classes))
    grads["head.W"] = V.T @ dZ
    grads["head.b"] = dZ.sum(axis=0)
    g = dZ @ params.arrays["head.W"].T
    if dV is not None:
        g = g + dV
    act = params.config.activation
    for k in reversed(range(params.n_encoder_layers)):
        out = cache.activations[k + 1]
        g = g * _act_grad(act, out)
        grads[f"enc{k}.W"] = cache.activations[k].T @ g
        grads[f"enc{k}.b"] = g.sum(axis=0)
        if k > 0:
            g = g @ params.arrays[f"enc{k}.W"].T
    return grads


@dataclass
class ProjectorCache:
    inputs: np.ndarray
    hidden: np.ndarray


def project(params: ModelParams, V) -> tuple[np.ndarray, ProjectorCache]:
    """Two-layer MLP projector; raises :class:`CapabilityError` on a teacher."""
    if not params.has_projector:
        raise CapabilityError("model has no projector (teacher models cannot project)")
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != params.config.feature_dim:
        raise ShapeError(f"expected (B, {params.config.feature_dim}) features, got {V.shape}")
    a = params.arrays
    H = _act(params.projector_activation, V @ a["proj0.W"] + a["proj0.b"])
    P = H @ a["proj1.W"] + a["proj1.b"]
    return P, ProjectorCache(V, H)


def project_backward(
    params: ModelParams, cache: ProjectorCache, dP: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    a = params.arrays
    grads = {
        "proj1.W": cache.hidden.T @ dP,
        "proj1.b": dP.sum(axis=0),
    }
    dH = (dP @ a["proj1.W"].T) * _act_grad(params.projector_activation, cache.hidden)
    grads["proj0.W"] = cache.inputs.T @ dH
    grads["proj0.b"] = dH.sum(axis=0)
    return dH @ a["proj0.W"].T, grads


def set_identity_projector(params: ModelParams) -> ModelParams:
    """Copy of ``params`` whose projector is the exact identity map.

    Requires ``projector_dim == feature_dim``; switches the projector to a
    linear activation.
    """
    if not params.has_projector:
        raise CapabilityError("model has no projector")
    d = params.config.feature_dim
    if params.projector_dim != d:
        raise ShapeError("identity projector needs projector_dim == feature_dim")
    out = params.copy()
    out.projector_activation = "identity"
    out.arrays["proj0.W"] = np.eye(d)
    out.arrays["proj1.W"] = np.eye(d)
    out.arrays["proj0.b"] = np.zeros(d)
    out.arrays["proj1.b"] = np.zeros(d)
    return out


@dataclass
class OptimizerState:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")


def _is_weight(name: str) -> bool:
    return name.endswith(".W")


def sgd_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """In-place SGD with momentum; weight decay on weight matrices only.

    ``v <- momentum * v + grad + wd * param``; ``param <- param - lr * v``.
    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if name not in params.arrays:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params.arrays[name].shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, expected {params.arrays[name].shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}", step=state.step)
    for name, p in params.arrays.items():
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        g = grads.get(name)
        v = state.momentum * v
        if g is not None:
            v = v + g
        if state.weight_decay and _is_weight(name):
            v = v + state.weight_decay * p
        state.velocity[name] = v
        if state.lr:
            params.arrays[name] = p - state.lr * v
    state.step += 1
    return params, state


# -- checkpoints -------------------------------------------------------------

def _array_to_json(a: np.ndarray) -> dict[str, Any]:
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _array_from_json(d: dict[str, Any]) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_dict(
    params: ModelParams,
    state: OptimizerState | None = None,
    extra: dict[str, Any] | None = None,
) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "projector_dim": params.projector_dim,
        "projector_activation": params.projector_activation,
        "seed": params.seed,
        "params": {k: _array_to_json(v) for k, v in params.arrays.items()},
        "optimizer": None,
        "extra": extra or {},
    }
    if state is not None:
        doc["optimizer"] = {
            "lr": state.lr,
            "momentum": state.momentum,
            "weight_decay": state.weight_decay,
            "step": state.step,
            "velocity": {k: _array_to_json(v) for k, v in state.velocity.items()},
        }
    return doc


def save_checkpoint(
    path,
    params: ModelParams,
    state: OptimizerState | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    """Write a JSON checkpoint. Floats use shortest round-trip repr, so
    :func:`load_checkpoint` restores every array bit-for-bit."""
    text = json.dumps(checkpoint_dict(params, state, extra), sort_keys=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, OptimizerState | None, dict[str, Any]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a valid checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    config = BackboneConfig.from_dict(doc["config"])
    arrays = {k: _array_from_json(v) for k, v in doc["params"].items()}
    params = ModelParams(config, arrays, doc["projector_dim"], doc["projector_activation"], doc["seed"])
    state = None
    if doc.get("optimizer") is not None:
        o = doc["optimizer"]
        state = OptimizerState(
            lr=o["lr"],
            momentum=o["momentum"],
            weight_decay=o["weight_decay"],
            velocity={k: _array_from_json(v) for k, v in o["velocity"].items()},
            step=o["step"],
        )
    return params, state, doc.get("extra", {})
