from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


def adam_update(theta, grad, m, v, step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8):
    """One bias-corrected Adam update; returns (theta, m, v) as new arrays."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


class Adam:
    """Adam over a named parameter set.

    Parameters named in ``frozen`` (or with ``requires_grad`` off) are never
    updated, even if a gradient is present.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 frozen=()):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.frozen = set(frozen)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items() if self._trainable(k)}
        self.v = {k: np.zeros_like(self.params[k].data) for k in self.m}

    def _trainable(self, name: str) -> bool:
        return name not in self.frozen and self.params[name].requires_grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        dtype = next(iter(self.params.values())).data.dtype if self.params else np.float32
        for name in self.m:
            p = self.params[name]
            if p.grad is None:
                continue
            theta, m, v = adam_update(p.data, p.grad, self.m[name], self.v[name], self.step_count, self.lr,
                                      self.beta1, self.beta2, self.eps)
            p.data = theta.astype(dtype, copy=False)
            self.m[name] = m.astype(dtype, copy=False)
            self.v[name] = v.astype(dtype, copy=False)
