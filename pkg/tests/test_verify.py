import numpy as np
import pytest

from hivesdf import tape as T
from hivesdf.verify import (GRAD_TOL, CheckResult, gradient_checks, oracle_checks, perturbed_vjp, run_battery,
                            sparse_dense_errors, two_crossing_weights, weight_closed_form)


@pytest.fixture(scope="module")
def battery():
    return run_battery(seed=0)


def test_battery_passes_and_is_fast(battery):
    results, elapsed = battery
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
    assert elapsed < 60.0


def test_battery_covers_every_primitive(battery):
    names = {r.name for r in battery[0]}
    assert {f"grad:{p}" for p in T.PRIMITIVES} <= names


def test_perturbation_is_scoped():
    before = T.PRIMITIVES["exp"]
    with perturbed_vjp("exp", 1.5):
        assert T.PRIMITIVES["exp"] is not before
    assert T.PRIMITIVES["exp"] is before
    with pytest.raises(KeyError):
        with perturbed_vjp("nonexistent"):
            pass


@pytest.mark.parametrize("name", ["exp", "gather_rows", "trilinear", "cumprod_exclusive"])
def test_perturbed_primitive_is_caught(name):
    with perturbed_vjp(name):
        results = gradient_checks(np.random.default_rng(0), 50)
    failed = {r.name for r in results if not r.passed}
    assert f"grad:{name}" in failed


def test_grad_tolerance_leaves_margin(battery):
    errs = [r.error for r in battery[0] if r.name.startswith("grad:")]
    # passing checks sit clearly below the threshold, while a 1% vjp error lands near 1e-2
    assert max(errs) < GRAD_TOL / 2


def test_oracles():
    full, partial = sparse_dense_errors(np.random.default_rng(1))
    assert full <= 1e-12 and partial <= 1e-12
    total, closed = weight_closed_form()
    assert abs(total - closed) <= 1e-12
    first, second = two_crossing_weights()
    assert first > 0.9 and second < 0.05


def test_oracle_checks_named(rng):
    results = oracle_checks(rng)
    names = [r.name for r in results]
    assert len(names) == len(set(names)) and not any(n.startswith("grad:") for n in names)
    assert all(r.passed for r in results)


def test_check_result_line():
    assert CheckResult("x", 2e-6, 1e-5).line().startswith("PASS")
    bad = CheckResult("y", float("nan"), 1e-5)
    assert not bad.passed and bad.line().startswith("FAIL")
