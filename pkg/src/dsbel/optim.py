from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class SGD:
    """Heavy-ball momentum: ``v <- mu*v - lr*g``; ``w <- w + v``.

    Parameters whose ``grad`` is ``None`` after a backward pass are skipped.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, momentum: float = 0.95):
        if lr < 0 or not 0 <= momentum < 1:
            raise ValueError(f"invalid SGD settings lr={lr} momentum={momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v -= self.lr * p.grad.astype(v.dtype, copy=False)
            p.data += v
