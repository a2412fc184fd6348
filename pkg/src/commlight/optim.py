"""RMSProp-style adaptive optimizer with global gradient-norm clipping."""

from __future__ import annotations

import numpy as np

from .diffcore import ParameterSet

__all__ = ["RMSProp", "clip_grad_norm"]


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Scale all gradients so the joint L2 norm is at most `max_norm`.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in params.grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in params.grads.values():
            g *= scale
    return norm


class RMSProp:
    """lr 5e-4, smoothing 0.99, eps 1e-5 — the fixed defaults of this repo.

    v <- a*v + (1-a)*g^2 ; x <- x - lr * g / (sqrt(v) + eps)
    """

    def __init__(self, params: ParameterSet, lr: float = 5e-4,
                 smoothing: float = 0.99, eps: float = 1e-5):
        self.params = params
        self.lr = lr
        self.smoothing = smoothing
        self.eps = eps
        self.square_avg = {n: np.zeros(t.shape) for n, t in params.tensors.items()}

    def step(self) -> None:
        a = self.smoothing
        for name, t in self.params.tensors.items():
            g = self.params.grads[name]
            v = self.square_avg[name]
            v *= a
            v += (1.0 - a) * g * g
            t.data -= self.lr * g / (np.sqrt(v) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"sqavg.{n}": v for n, v in self.square_avg.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.square_avg:
            self.square_avg[n][...] = arrays[f"sqavg.{n}"]
