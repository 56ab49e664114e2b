"""Central finite-difference checks of the tape's gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ParameterError
from .tensor import Tensor, check_finite


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_input: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_error:.3e} (tol {self.tol:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    # floor keeps exactly-zero gradients (e.g. key bias under softmax) from
    # turning O(1e-11) difference noise into a spurious failure
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(f, inputs, h: float = 1e-5, tol: float = 1e-4, max_elements: int | None = None,
               rng=None) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f(*inputs)`` with central differences.

    ``inputs`` must be float64 tensors with ``requires_grad``.  With
    ``max_elements`` only a random subset of coordinates per input is probed.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for x in inputs:
        if x.dtype != np.float64:
            raise ParameterError("grad_check needs float64 inputs")
        x.grad = None
    rng = rng if rng is not None else np.random.default_rng(0)

    with check_finite():
        out = f(*inputs)
        if out.data.size != 1:
            raise ParameterError("grad_check needs a scalar-valued function")
        out.backward()

    per_input = []
    worst = 0.0
    for x in inputs:
        analytic = np.zeros(x.shape) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value while perturbing element {i}")
            numeric[n] = (fp - fm) / (2 * h)
        err = float(relative_error(analytic.reshape(-1)[idx], numeric).max()) if len(idx) else 0.0
        per_input.append(err)
        worst = max(worst, err)
    return GradCheckReport(worst, worst <= tol, tol, per_input)
