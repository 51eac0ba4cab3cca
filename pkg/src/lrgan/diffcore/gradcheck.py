"""Finite-difference gradient verification.

Runs in float64: central differences with eps=1e-6 are meaningless at
float32 precision. The report carries the max relative error per checked
input so callers (and the CLI gradcheck command) can print one line per op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, reset_graph


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_errors: list[float] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_errors) if self.max_rel_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradient_check(fn, inputs, tolerance: float = 1e-4, eps: float = 1e-6,
                   seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    ``fn`` maps Tensors to one Tensor of any shape; the output is reduced to
    a scalar through a fixed random projection so a single backward pass
    yields every gradient. All inputs must be float64.
    """
    tensors = []
    for x in inputs:
        if isinstance(x, Tensor):
            t = x
        else:
            t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        if t.dtype != np.float64:
            raise ValueError("gradient_check requires float64 inputs (64-bit mode)")
        t.requires_grad = True
        t.grad = None
        tensors.append(t)

    proj_rng = np.random.default_rng(seed)

    def scalar(*ts):
        out = fn(*ts)
        nonlocal projection
        if projection is None:
            projection = proj_rng.normal(size=out.shape)
        return (out * Tensor(projection)).sum()

    projection = None
    reset_graph()
    loss = scalar(*tensors)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    reset_graph()

    report = GradCheckReport(tolerance=tolerance)
    for t, ana in zip(tensors, analytic):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = scalar(*tensors).item()
            reset_graph()
            flat[i] = orig - eps
            lo = scalar(*tensors).item()
            reset_graph()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        report.max_rel_errors.append(_rel_error(ana, numeric))
    return report
