"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times each kernel at training-batch shapes (B=8 samples, C=6 classes) and at
a larger shape, plus one full student objective evaluation, for both
backends. Results also confirm the two backends agree numerically.
"""

from __future__ import annotations

import argparse
import importlib
import timeit

import numpy as np

from fddm import _kernels_py

try:
    _compiled = importlib.import_module("fddm._kernels")
except ImportError:  # extension not built
    _compiled = None


def _cases(rng, B, C, D):
    X = rng.normal(size=(B, D))
    Y = (rng.random((B, C)) < 0.4).astype(np.float64)
    Y[0] = 1.0
    M, counts = _kernels_py.masked_mean(X, Y)
    G = rng.normal(size=(C, D))
    T, S = rng.normal(size=(C, D)), rng.normal(size=(C, D))
    Q = rng.normal(size=(C, C))
    K, norms = _kernels_py.cosine_matrix(Q)
    GK = rng.normal(size=(C, C))
    return {
        "masked_mean": lambda k: k.masked_mean(X, Y),
        "masked_mean_backward": lambda k: k.masked_mean_backward(G, Y, counts),
        "softmax_kl_rows": lambda k: k.softmax_kl_rows(T, S, 4.0),
        "cosine_matrix": lambda k: k.cosine_matrix(Q),
        "cosine_matrix_backward": lambda k: k.cosine_matrix_backward(GK, Q, K, norms),
    }


def _check_parity(cases):
    for name, fn in cases.items():
        a, b = fn(_kernels_py), fn(_compiled)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        for x, y in zip(a, b):
            np.testing.assert_allclose(np.asarray(x), np.asarray(y), rtol=1e-12, atol=1e-14, err_msg=name)


def _time(fn, repeat):
    n = 200
    best = min(timeit.repeat(fn, number=n, repeat=repeat))
    return best / n * 1e6  # microseconds per call


def _objective_bench(backend, repeat):
    import fddm.losses as losses
    from fddm.losses import LossWeights, student_objective, teacher_targets
    from fddm.model import BackboneConfig, init_params

    rng = np.random.default_rng(0)
    student = init_params(BackboneConfig(32, (32,), 8, 6), 0, projector_dim=8)
    teacher = init_params(BackboneConfig(32, (32,), 8, 6), 1)
    X, Xf = rng.normal(size=(8, 32)), rng.normal(size=(8, 32))
    Y = (rng.random((8, 6)) < 0.4).astype(float)
    Yf = (rng.random((8, 6)) < 0.4).astype(float)
    saved = losses.kernels
    losses.kernels = backend
    try:
        targets = teacher_targets(teacher, Xf, Yf)
        return _time(lambda: student_objective(student, X, Y, targets, LossWeights()), repeat)
    finally:
        losses.kernels = saved


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'shape':>12s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for B, C, D in ((8, 6, 8), (256, 32, 64)):
        cases = _cases(rng, B, C, D)
        _check_parity(cases)
        for name, fn in cases.items():
            t_py = _time(lambda: fn(_kernels_py), args.repeat)
            t_cy = _time(lambda: fn(_compiled), args.repeat)
            print(f"{name:24s} {f'{B}x{C}x{D}':>12s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.2f}x")

    t_py = _objective_bench(_kernels_py, args.repeat)
    t_cy = _objective_bench(_compiled, args.repeat)
    print(f"{'student_objective':24s} {'8x6x8':>12s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.2f}x")


if __name__ == "__main__":
    main()
