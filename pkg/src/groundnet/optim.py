"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float, beta2: float, eps: float):
    """One bias-corrected Adam update; mutates param/m/v in place, t is 1-based."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError(f"adam_step: shapes differ {param.shape}/{grad.shape}/{m.shape}/{v.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Tracks first/second moments per named parameter; deterministic."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        """Apply one update using each parameter's accumulated grad (missing -> no-op)."""
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[name], self.v[name],
                      self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of optimizer state for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = arrays[f"adam.m.{name}"].astype(self.m[name].dtype).reshape(self.m[name].shape)
            self.v[name] = arrays[f"adam.v.{name}"].astype(self.v[name].dtype).reshape(self.v[name].shape)
