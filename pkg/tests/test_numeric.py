import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fddm.errors import (
    DegenerateVectorError,
    DomainError,
    InputError,
    ParameterError,
    ShapeError,
)
from fddm.numeric import (
    bce_with_logits,
    cosine_sim,
    grad_check,
    kl_div,
    masked_class_mean,
    softmax_tau,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def vectors(min_size=1, max_size=8):
    return arrays(np.float64, st.integers(min_size, max_size), elements=finite)


# -- softmax_tau -------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(softmax_tau([0.0, 0.0], 1.0), [0.5, 0.5])


def test_softmax_worked_example():
    # mpmath, 40 digits: 1/(1+e), e/(1+e)
    np.testing.assert_allclose(
        softmax_tau([1.0, 3.0], 2.0),
        [0.2689414213699951207, 0.7310585786300048793],
        rtol=0, atol=1e-15,
    )


def test_softmax_high_temperature_is_uniform():
    out = softmax_tau([5.0, 1.0, 1.0], 1e6)
    assert np.all(np.abs(out - 1 / 3) < 1e-5)


def test_softmax_large_inputs_do_not_overflow():
    out = softmax_tau([1e4, -1e4, 0.0], 1.0)
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(1.0)


def test_softmax_errors():
    with pytest.raises(ParameterError):
        softmax_tau([1.0], 0.0)
    with pytest.raises(InputError):
        softmax_tau([1.0, float("nan")], 1.0)


@given(vectors(), st.floats(0.1, 10))
def test_softmax_sums_to_one_and_nonnegative(v, tau):
    p = softmax_tau(v, tau)
    assert abs(p.sum() - 1) < 1e-9
    # entries may underflow to exactly 0 for large spreads, never below
    assert (p >= 0).all() and p.max() > 0


@given(vectors(2, 8), st.floats(0.1, 10), st.randoms(use_true_random=False))
def test_softmax_permutation_equivariant(v, tau, rnd):
    perm = list(range(v.size))
    rnd.shuffle(perm)
    np.testing.assert_allclose(softmax_tau(v[perm], tau), softmax_tau(v, tau)[perm], atol=1e-15)


@given(vectors(), st.floats(0.1, 10), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(v, tau, c):
    np.testing.assert_allclose(softmax_tau(v + c, tau), softmax_tau(v, tau), atol=1e-12)


@given(vectors(2, 8), st.floats(0.1, 10))
def test_softmax_monotone(v, tau):
    p = softmax_tau(v, tau)
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(p[order]) >= -1e-15)


# -- kl_div ------------------------------------------------------------------

def test_kl_identical_is_zero():
    assert kl_div([0.3, 0.7], [0.3, 0.7]) == 0.0


def test_kl_closed_form():
    assert kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)


def test_kl_errors():
    with pytest.raises(ShapeError):
        kl_div([0.5, 0.5], [1.0])
    with pytest.raises(DomainError):
        kl_div([0.5, 0.5], [1.0, 0.0])


def test_kl_gibbs_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = rng.dirichlet(np.ones(5))
        q = rng.dirichlet(np.ones(5))
        assert kl_div(p, q) >= 0
        assert kl_div(p, p) == 0.0


# -- cosine_sim --------------------------------------------------------------

def test_cosine_examples():
    assert cosine_sim([2, 1], [2, 1]) == pytest.approx(1.0)
    assert cosine_sim([1, 0], [0, 3]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cosine_zero_vector():
    with pytest.raises(DegenerateVectorError):
        cosine_sim([0, 0], [1, 0])


@settings(max_examples=200)
@given(
    arrays(np.float64, 4, elements=st.floats(-10, 10)),
    arrays(np.float64, 4, elements=st.floats(-10, 10)),
    st.floats(1e-3, 1e3),
    st.floats(1e-3, 1e3),
)
def test_cosine_scale_invariant(u, v, a, b):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    assert cosine_sim(a * u, b * v) == pytest.approx(cosine_sim(u, v), abs=1e-12)
    assert -1 <= cosine_sim(u, v) <= 1


# -- masked_class_mean -------------------------------------------------------

def test_masked_mean_worked_example():
    M, present = masked_class_mean([[1, 3], [3, 5]], [[1, 0], [1, 1]])
    np.testing.assert_array_equal(M, [[2, 4], [3, 5]])
    np.testing.assert_array_equal(present, [1, 1])


def test_masked_mean_absent_and_singleton():
    X = np.array([[1.5, -2.0], [3.0, 4.0]])
    M, present = masked_class_mean(X, [[0, 1, 0], [0, 0, 0]])
    np.testing.assert_array_equal(M[0], [0, 0])
    np.testing.assert_array_equal(M[2], [0, 0])
    np.testing.assert_array_equal(M[1], X[0])
    np.testing.assert_array_equal(present, [0, 1, 0])


def test_masked_mean_shape_error():
    with pytest.raises(ShapeError):
        masked_class_mean(np.zeros((3, 2)), np.zeros((2, 2)))


def _brute_class_mean(X, Y):
    C, D = Y.shape[1], X.shape[1]
    M = np.zeros((C, D))
    present = np.zeros(C, dtype=int)
    for c in range(C):
        rows = [X[i] for i in range(X.shape[0]) if Y[i, c] == 1]
        if rows:
            acc = np.zeros(D)
            for r in rows:
                acc = acc + r
            M[c] = acc / len(rows)
            present[c] = 1
    return M, present


def test_masked_mean_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        B, C, D = rng.integers(1, 17), rng.integers(1, 9), rng.integers(1, 9)
        X = rng.normal(size=(B, D))
        Y = (rng.random((B, C)) < 0.4).astype(float)
        M, present = masked_class_mean(X, Y)
        Mb, pb = _brute_class_mean(X, Y)
        np.testing.assert_allclose(M, Mb, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(present, pb)


# -- bce_with_logits ---------------------------------------------------------

def test_bce_examples():
    loss, _ = bce_with_logits(np.array([[0.0]]), np.array([[1.0]]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    loss, _ = bce_with_logits(np.array([[30.0]]), np.array([[1.0]]))
    assert loss < 1e-9


def test_bce_extreme_logits_are_finite():
    loss, grad = bce_with_logits(np.array([[800.0, -800.0]]), np.array([[0.0, 1.0]]))
    assert loss == pytest.approx(800.0)
    assert np.isfinite(grad).all()


def test_bce_shape_error():
    with pytest.raises(ShapeError):
        bce_with_logits(np.zeros((2, 3)), np.zeros((3, 2)))


def test_bce_gradient_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(10):
        z = rng.normal(size=(4, 3)) * 2
        y = (rng.random((4, 3)) < 0.5).astype(float)
        _, g = bce_with_logits(z, y)
        err = grad_check(lambda x: bce_with_logits(x, y)[0], z, 1e-6, analytic=g)
        assert err < 1e-6


# -- grad_check --------------------------------------------------------------

def test_grad_check_quadratic():
    x = np.array([1.0, 2.0])
    assert grad_check(lambda v: float(np.sum(v ** 2)), x, 1e-5, analytic=np.array([2.0, 4.0])) < 1e-8


def test_grad_check_bce_2x2():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(2, 2))
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    err = grad_check(lambda x: bce_with_logits(x, y)[0], z, grad=lambda x: bce_with_logits(x, y)[1])
    assert err < 1e-6


def test_grad_check_kl_softmax():
    rng = np.random.default_rng(4)
    q = rng.dirichlet(np.ones(5))
    x = rng.normal(size=5)
    tau = 4.0

    def f(v):
        return kl_div(softmax_tau(v, tau), q)

    def g(v):
        # d/dv sum p log(p/q) with p = softmax(v/tau)
        p = softmax_tau(v, tau)
        s = np.log(p) - np.log(q) + 1.0
        return (p * (s - np.dot(p, s))) / tau

    assert grad_check(f, x, 1e-6, grad=g) < 1e-6


def test_grad_check_detects_wrong_gradient():
    x = np.array([1.0, 2.0])
    assert grad_check(lambda v: float(np.sum(v ** 2)), x, analytic=np.array([2.0, 5.0])) > 0.1


def test_grad_check_errors():
    with pytest.raises(ParameterError):
        grad_check(lambda v: 0.0, np.zeros(2), eps=1.0, analytic=np.zeros(2))
    with pytest.raises(InputError):
        grad_check(lambda v: float("inf"), np.zeros(2), analytic=np.zeros(2))
