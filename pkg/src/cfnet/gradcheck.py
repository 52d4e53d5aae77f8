"""Central-difference gradient verification.

``grad_check`` takes a function mapping a name -> float64 tensor dict to a
``(scalar loss, name -> gradient dict)`` pair, perturbs every coordinate by
+/- eps, and reports the per-parameter maximum of

    |g_analytic - g_numeric| / max(1, |g_analytic|, |g_numeric|).

Checks always run in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-5
DEFAULT_THRESHOLD = 1e-6


@dataclass(frozen=True)
class GradCheckRow:
    param: str
    max_rel_error: float

    def passed(self, threshold):
        return self.max_rel_error < threshold


@dataclass(frozen=True)
class GradCheckReport:
    rows: tuple
    threshold: float

    @property
    def passed(self):
        return all(r.passed(self.threshold) for r in self.rows)

    @property
    def max_rel_error(self):
        return max((r.max_rel_error for r in self.rows), default=0.0)


def relative_error(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def grad_check(f, params, eps=DEFAULT_EPS, threshold=DEFAULT_THRESHOLD):
    """Compare analytic gradients of ``f`` against central differences.

    ``params`` arrays are perturbed in place and restored; they must be
    float64.  Raises on non-finite losses or gradients.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params, {name} is {p.dtype}")
    loss0, analytic = f(params)
    if not math.isfinite(loss0):
        raise FloatingPointError(f"non-finite loss {loss0} at the unperturbed point")
    rows = []
    for name, p in params.items():
        g = analytic[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
        numeric = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            lp, _ = f(params)
            flat_p[i] = orig - eps
            lm, _ = f(params)
            flat_p[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise FloatingPointError(
                    f"non-finite loss while perturbing {name}[{i}]")
            flat_n[i] = (lp - lm) / (2.0 * eps)
        err = relative_error(g, numeric)
        rows.append(GradCheckRow(name, float(err.max())))
    return GradCheckReport(tuple(rows), threshold)


def format_report_table(named_reports):
    """Render ``(op name, report)`` pairs as an aligned pass/fail table."""
    lines = []
    header = f"{'op':<14} {'parameter':<20} {'max rel err':>12}  status"
    lines.append(header)
    lines.append("-" * len(header))
    for op_name, report in named_reports:
        for row in report.rows:
            status = "PASS" if row.passed(report.threshold) else "FAIL"
            lines.append(
                f"{op_name:<14} {row.param:<20} {row.max_rel_error:>12.3e}  {status}")
    return "\n".join(lines)
