"""Central-difference gradient checking: the oracle for every trained block."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tape, Tensor, backward, recording


def grad_check(f: Callable[[Tensor], Tensor], theta: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a parameter tensor to a scalar tensor and must be smooth near
    `theta`. Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"eps {eps} outside [1e-6, 1e-3]")
    theta.requires_grad = True
    theta.grad = None
    tape = Tape()
    with recording(tape):
        out = f(theta)
    backward(out, tape)
    if theta.grad is None:
        raise ContractError("parameter not reached by f: no gradient recorded")
    analytic = theta.grad.copy()

    flat = theta.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(theta).item()
        flat[i] = orig - eps
        lo = f(theta).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"f(theta +/- eps) non-finite at coordinate {i}")
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(rel.max())
