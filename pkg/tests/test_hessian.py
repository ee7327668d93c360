import numpy as np
import pytest

from mqproxy import hessian
from mqproxy import tensor as T


def quadratic_hvp(a):
    loss = lambda t: T.sum_(T.mul(T.Tensor(a), T.square(t)))
    theta = np.linspace(-1, 1, a.size)
    return lambda v: T.hvp(loss, theta, v)


@pytest.mark.parametrize("scale", [1.0, 10.0, 0.01])
def test_hutchinson_trace_on_quadratic(scale):
    a = scale * np.array([1.0, 2.0, 3.0])
    est = hessian.hutchinson_trace(quadratic_hvp(a), (3,), 64, np.random.default_rng(0))
    assert est == pytest.approx(2 * a.sum(), rel=0.05)


def test_hutchinson_diagonal_exact_for_diagonal_hessian():
    # v * (D v) = D v^2 = diag(D) for Rademacher v, so one probe suffices
    a = np.array([1.0, 2.0, 3.0])
    d = hessian.hutchinson_diagonal(quadratic_hvp(a), (3,), 1, np.random.default_rng(0))
    np.testing.assert_allclose(d, 2 * a, rtol=1e-6)


@pytest.mark.parametrize("scale", [1.0, 10.0, 0.01])
def test_power_iteration_on_quadratic(scale):
    a = scale * np.array([1.0, 2.0, 3.0])
    eig, ok = hessian.power_iteration(quadratic_hvp(a), (3,), np.random.default_rng(0), n_iter=200, tol=1e-10)
    assert ok
    assert eig == pytest.approx(6 * scale, rel=1e-3)


def test_power_iteration_warns_when_not_converged():
    m = np.diag([1.0, 0.999, 0.998])
    with pytest.warns(hessian.ConvergenceWarning):
        eig, ok = hessian.power_iteration(lambda v: m @ v, (3,), np.random.default_rng(0), n_iter=2, tol=1e-14)
    assert not ok and np.isfinite(eig)


def test_spectrum_dominates_mean_eigenvalue():
    a = np.array([0.5, 1.0, 4.0])
    hvp = quadratic_hvp(a)
    eig, _ = hessian.power_iteration(hvp, (3,), np.random.default_rng(1), n_iter=100, tol=1e-10)
    tr = hessian.hutchinson_trace(hvp, (3,), 64, np.random.default_rng(2))
    assert eig >= tr / 3


def test_rademacher_values():
    v = hessian.rademacher(np.random.default_rng(0), (1000,))
    assert set(np.unique(v)) == {-1.0, 1.0}
