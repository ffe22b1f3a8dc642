"""Plain-numpy optimizers operating in place on :class:`Tensor` leaves."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor


class SGD:
    """SGD with classical momentum: ``v = m*v + g; p -= lr*v``."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._vel = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._vel):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction.  Each parameter group carries its own learning rate."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(ps), float(lr)) for ps, lr in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros(p.shape) for ps, _ in self.groups for p in ps}
        self._v = {id(p): np.zeros(p.shape) for ps, _ in self.groups for p in ps}

    def set_lr(self, group: int, lr: float) -> None:
        ps, _ = self.groups[group]
        self.groups[group] = (ps, float(lr))

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for ps, lr in self.groups:
            if lr == 0.0:
                continue
            for p in ps:
                if p.grad is None:
                    continue
                m, v = self._m[id(p)], self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * p.grad * p.grad
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for ps, _ in self.groups:
            for p in ps:
                p.grad = None
