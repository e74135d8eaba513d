import numpy as np
import pytest

from respox.gradcheck import (
    CheckResult,
    grad_check,
    relative_error,
    run_all,
    run_model_suite,
    run_suite,
)
from respox.tensor import Tensor, tanh


def test_relative_error_normalizes_by_magnitude():
    assert relative_error([1.0], [1.0]) == 0.0
    assert relative_error([100.0], [101.0]) == pytest.approx(1.0 / 101.0)
    # small magnitudes fall back to an absolute scale
    assert relative_error([0.001], [0.002]) == pytest.approx(0.001)
    assert relative_error([], []) == 0.0


def test_check_result_pass_logic():
    assert CheckResult("x", "float64", 1e-9, 1e-6).passed
    assert not CheckResult("x", "float64", 1e-3, 1e-6).passed
    assert not CheckResult("x", "float64", float("nan"), 1e-6).passed


def test_grad_check_accepts_correct_gradient():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True, dtype=np.float64)

    def fn(a, b):
        return tanh(a @ b)

    assert grad_check(fn, [a, b]) < 1e-7


def test_grad_check_catches_sabotaged_gradient():
    """A wrong derivative must produce a large error, or the suite proves nothing."""
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(5,)), requires_grad=True, dtype=np.float64)

    def wrong(a):
        return tanh(a) + a * 0.5  # analytic graph computes d/dx [tanh + x/2]

    def truth(a):
        return tanh(a)  # FD oracle sees plain tanh

    shadow = Tensor(a.data.copy(), requires_grad=True, dtype=np.float64)
    err = grad_check(wrong, [a], numeric_fn=truth, numeric_inputs=[shadow])
    assert err > 0.1


def test_run_suite_fast_slice_green():
    results = run_suite(seed=0, instances=2)
    assert results
    failures = [r for r in results if not r.passed]
    assert failures == []
    dtypes = {r.dtype for r in results}
    assert dtypes == {"float64", "float32"}


def test_run_suite_deterministic():
    a = run_suite(seed=0, instances=2)
    b = run_suite(seed=0, instances=2)
    assert [(r.name, r.dtype, r.error) for r in a] == [(r.name, r.dtype, r.error) for r in b]


def test_run_model_suite_green():
    results = run_model_suite(seed=0)
    assert results
    assert all(r.passed for r in results)


def test_run_all_returns_results_and_elapsed():
    results, elapsed = run_all(seed=0, instances=1)
    assert elapsed > 0.0
    assert all(r.passed for r in results)
    assert {r.dtype for r in results} == {"float64", "float32"}
