"""The checker itself: analytic baseline, sensitivity to corruption, errors."""

import numpy as np
import pytest

from cfnet.gradcheck import format_report_table, grad_check, relative_error


def quadratic(params):
    x = params["x"]
    return float((x ** 2).sum()), {"x": 2.0 * x}


def test_quadratic_analytic_gradient():
    params = {"x": np.array([1.0, -2.0, 0.5])}
    report = grad_check(quadratic, params, threshold=1e-9)
    assert report.passed
    assert report.max_rel_error < 1e-9


def test_corrupted_backward_detected():
    """A 10% error on one coordinate must surface loudly."""

    def corrupted(params):
        loss, grads = quadratic(params)
        g = grads["x"].copy()
        g[1] *= 1.10
        return loss, {"x": g}

    params = {"x": np.array([1.0, -2.0, 0.5])}
    report = grad_check(corrupted, params)
    assert not report.passed
    assert report.max_rel_error > 1e-2


def test_nonfinite_loss_raises():
    def bad(params):
        return float("nan"), {"x": np.zeros_like(params["x"])}

    with pytest.raises(FloatingPointError):
        grad_check(bad, {"x": np.zeros(2)})


def test_requires_float64():
    with pytest.raises(ValueError, match="float64"):
        grad_check(quadratic, {"x": np.zeros(2, dtype=np.float32)})


def test_relative_error_metric():
    # denominator is max(1, |a|, |n|)
    assert relative_error(np.array(2.0), np.array(2.0)) == 0.0
    assert relative_error(np.array(0.0), np.array(1e-7)) == pytest.approx(1e-7)
    assert relative_error(np.array(100.0), np.array(101.0)) == pytest.approx(1 / 101)


def test_table_formatting():
    params = {"x": np.array([1.0, 2.0])}
    report = grad_check(quadratic, params)
    table = format_report_table([("quadratic", report)])
    assert "quadratic" in table
    assert "PASS" in table
