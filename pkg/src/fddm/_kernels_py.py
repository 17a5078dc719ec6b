"""Pure numpy implementation of the hot per-class kernels.

Used when the compiled extension ``fddm._kernels`` is unavailable or when
``FDDM_PURE_PYTHON=1`` is set. Signatures and semantics match the Cython
module exactly; results agree to rounding (~1e-15).

All arrays are float64. No input validation happens here; callers in
:mod:`fddm.numeric` and :mod:`fddm.losses` validate shapes first.
"""

from __future__ import annotations

import numpy as np

IMPLEMENTATION = "python"


def masked_mean(X, Y):
    """Per-class mean of rows of ``X`` selected by the binary mask ``Y``.

    Returns ``(M, counts)`` with ``M`` of shape ``(C, D)``. Rows of absent
    classes (count 0) are zero.
    """
    counts = Y.sum(axis=0)
    sums = Y.T @ X
    M = np.zeros_like(sums)
    present = counts > 0
    M[present] = sums[present] / counts[present, None]
    return M, counts


def masked_mean_backward(G, Y, counts):
    """Pull a ``(C, D)`` gradient on the class means back onto the ``B`` rows."""
    scale = np.zeros_like(counts)
    present = counts > 0
    scale[present] = 1.0 / counts[present]
    return (Y * scale[None, :]) @ G


def _log_softmax(A):
    shifted = A - A.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_kl_rows(T, S, tau):
    """Row-wise ``KL(softmax(T/tau) || softmax(S/tau))`` and its gradient in ``S``.

    Returns ``(kl, grad)`` where ``kl`` has one entry per row and
    ``grad[k] = (softmax(S[k]/tau) - softmax(T[k]/tau)) / tau``.
    """
    log_p = _log_softmax(T / tau)
    log_q = _log_softmax(S / tau)
    p = np.exp(log_p)
    kl = (p * (log_p - log_q)).sum(axis=1)
    grad = (np.exp(log_q) - p) / tau
    return kl, grad


def cosine_matrix(Q):
    """Pairwise cosine similarities between rows of ``Q``.

    Returns ``(K, norms)``; rows must have nonzero norm. Entries are clamped
    to ``[-1, 1]``.
    """
    norms = np.sqrt((Q * Q).sum(axis=1))
    N = Q / norms[:, None]
    K = np.clip(N @ N.T, -1.0, 1.0)
    return K, norms


def cosine_matrix_backward(G, Q, K, norms):
    """Gradient of ``sum(G * cosine_matrix(Q))`` with respect to ``Q``.

    Uses ``d cos(q_a, q_b) / d q_a = (n_b - cos_ab * n_a) / |q_a|``; the clamp
    is treated as inactive.
    """
    N = Q / norms[:, None]
    Gs = G + G.T
    out = Gs @ N - (Gs * K).sum(axis=1)[:, None] * N
    return out / norms[:, None]
