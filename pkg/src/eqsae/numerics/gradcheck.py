"""Central-difference gradient checking (double precision only)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Precision, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)
    message: str = ""

    @property
    def passed(self) -> bool:
        return not self.message and self.max_rel_error < self.tolerance


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tolerance: float = 1e-6,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``fn(*inputs)`` to central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). Never raises
    for a failing check; problems are reported in ``message``.
    """
    if any(t.precision is not Precision.DOUBLE for t in inputs):
        return GradCheckReport(np.inf, tolerance, message="grad_check requires double precision")
    try:
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        out = fn(*inputs)
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    except Exception as exc:  # report, never propagate
        return GradCheckReport(np.inf, tolerance, message=f"{type(exc).__name__}: {exc}")

    per_input = []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(*inputs).item()
            flat[i] = orig - eps
            f_minus = fn(*inputs).item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * eps)
        a = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        per_input.append(float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0)
    for t in inputs:
        t.grad = None
    return GradCheckReport(max(per_input, default=0.0), tolerance, per_input)
