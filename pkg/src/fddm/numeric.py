"""Numeric primitives with analytic gradients.

Everything here is float64 and pure. The vector-level functions validate
their inputs and are the public surface; the batched work inside the losses
goes through :mod:`fddm.kernels`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import kernels
from .errors import (
    DegenerateVectorError,
    DomainError,
    InputError,
    ParameterError,
    ShapeError,
)

NORM_EPS = 1e-12


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise InputError(f"{name} contains NaN")
    return arr


def softmax_tau(v, tau: float) -> np.ndarray:
    """Temperature softmax ``exp(v/tau) / sum(exp(v/tau))``, max-stabilized."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    x = _as_vector(v, "v") / tau
    if not np.isfinite(x).all():
        raise InputError("v contains non-finite values")
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax_tau(v, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    x = _as_vector(v, "v") / tau
    x = x - x.max()
    return x - np.log(np.exp(x).sum())


def kl_div(p, q) -> float:
    """``sum p*log(p/q)`` with ``0*log(0/q) = 0``.

    Raises :class:`DomainError` when some ``q`` entry is zero where ``p`` is not.
    """
    p = _as_vector(p, "p")
    q = _as_vector(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch: {p.size} vs {q.size}")
    for name, arr in (("p", p), ("q", q)):
        if (arr < 0).any() or abs(arr.sum() - 1.0) > 1e-6:
            raise InputError(f"{name} is not a probability vector")
    support = p > 0
    if (q[support] <= 0).any():
        raise DomainError("q has zero mass where p is positive")
    out = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    return max(out, 0.0)


def cosine_sim(u, v) -> float:
    u = _as_vector(u, "u")
    v = _as_vector(v, "v")
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= NORM_EPS or nv <= NORM_EPS:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(u / nu, v / nv), -1.0, 1.0))


def masked_class_mean(X, Y) -> tuple[np.ndarray, np.ndarray]:
    """Class-wise mean of the rows of ``X`` (B x D) under mask ``Y`` (B x C).

    Returns ``(M, present)``: ``M`` is C x D, with zero rows and
    ``present == 0`` for classes that have no positive row.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"incompatible shapes X{X.shape} and Y{Y.shape}")
    M, counts = kernels.masked_mean(X, Y)
    return M, (counts > 0).astype(np.int8)


def log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(z, y) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all entries, and its gradient in ``z``."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and targets {y.shape} differ")
    # -[y log s(z) + (1-y) log s(-z)] = softplus(z) - y z
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    grad = (sigmoid(z) - y) / z.size
    return loss, grad


def grad_check(
    f: Callable[[np.ndarray], float],
    x,
    eps: float = 1e-6,
    analytic: np.ndarray | None = None,
    grad: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    Either pass ``analytic`` directly or a ``grad`` callable evaluated at
    ``x``. The relative error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = np.array(x, dtype=np.float64)
    f0 = f(x.copy())
    if not np.isfinite(f0):
        raise InputError("f(x) is not finite")
    if analytic is None:
        if grad is None:
            raise ParameterError("need either analytic or grad")
        analytic = grad(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(x.copy())
        flat[k] = orig - eps
        fm = f(x.copy())
        flat[k] = orig
        num_flat[k] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
