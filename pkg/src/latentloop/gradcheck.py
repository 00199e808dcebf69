"""Finite-difference gradient oracle.

`grad_check` compares reverse-mode gradients against central finite
differences of the same scalar function.  The function must be pure and
deterministic: it is re-evaluated ~2x(number of elements) times, so keep
test shapes small.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import GradTape, Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    step: float
    tol: float
    per_input: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel error {self.max_rel_error:.3e} (tol {self.tol:.1e}, step {self.step:.1e})"


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Check df/dx for every element of every input against central differences.

    The relative error per input is max|analytic - numeric| divided by the
    larger of the two gradients' max magnitude (floored at 1e-12), i.e. the
    worst absolute discrepancy measured against the gradient's own scale.
    Raises NumericError naming the offending op if any forward value is
    non-finite.
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
        if not np.all(np.isfinite(t.data)):
            raise NumericError("non-finite values in grad_check input")

    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.data.shape}")
    tape = GradTape(out)
    tape.check_finite()
    tape.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def eval_at(perturbed: Sequence[np.ndarray]) -> float:
        originals = [t.data for t in inputs]
        try:
            for t, d in zip(inputs, perturbed):
                t.data = d
            with no_grad():
                val = f(*inputs)
            return float(val.data)
        finally:
            for t, d in zip(inputs, originals):
                t.data = d

    max_rel = 0.0
    per_input = []
    datas = [t.data.copy() for t in inputs]
    for i, t in enumerate(inputs):
        numeric = np.zeros_like(t.data)
        flat = numeric.reshape(-1)
        base = datas[i].reshape(-1)
        for j in range(base.size):
            bumped = [d.copy() for d in datas]
            bumped[i].reshape(-1)[j] = base[j] + step
            up = eval_at(bumped)
            bumped[i].reshape(-1)[j] = base[j] - step
            down = eval_at(bumped)
            flat[j] = (up - down) / (2.0 * step)
        if not np.all(np.isfinite(numeric)):
            raise NumericError(f"non-finite finite-difference estimate for input {i}")
        diff = float(np.max(np.abs(analytic[i] - numeric))) if numeric.size else 0.0
        scale = max(float(np.max(np.abs(analytic[i]), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
        rel = diff / scale
        per_input.append({"input": i, "max_abs_diff": diff, "rel_error": rel})
        max_rel = max(max_rel, rel)

    return GradCheckReport(max_rel_error=max_rel, passed=max_rel < tol, step=step, tol=tol, per_input=per_input)
