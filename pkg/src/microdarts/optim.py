"""Gradient-step rules: SGD with momentum and Adam.

Weight decay is decoupled in both rules: the decay shrinks the parameter
directly instead of being folded into the gradient. ``expected_tag``
guards gradient provenance; a step refuses gradients whose ``grad_tag``
does not match (the bilevel loop tags validation and training passes).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["Optimizer", "SGD", "Adam"]


class Optimizer:
    def __init__(self, params, lr: float, weight_decay: float = 0.0, expected_tag=None):
        self.params: list[Tensor] = list(params)
        if not all(p.requires_grad for p in self.params):
            raise ValueError("optimizer received a parameter without requires_grad")
        self.lr = float(lr)
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        self.weight_decay = float(weight_decay)
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        self.expected_tag = expected_tag

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """Apply one update to every parameter, then zero the gradients."""
        for p in self.params:
            if p.grad is None:
                raise ValueError("optimizer step with a missing gradient (run backward first)")
            if self.expected_tag is not None and p.grad_tag != self.expected_tag:
                raise ValueError(
                    f"gradient tagged {p.grad_tag!r} but this optimizer expects "
                    f"{self.expected_tag!r}"
                )
        for i, p in enumerate(self.params):
            if self.weight_decay:
                p.value = p.value - self.lr * self.weight_decay * p.value
            p.value = p.value - self.lr * self._direction(i, p)
        self.zero_grad()

    def _direction(self, i: int, p: Tensor) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params, lr, momentum: float = 0.0, weight_decay: float = 0.0,
                 expected_tag=None):
        super().__init__(params, lr, weight_decay, expected_tag)
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.value) for p in self.params]

    def _direction(self, i, p):
        v = self.momentum * self._velocity[i] + p.grad
        self._velocity[i] = v
        return v


class Adam(Optimizer):
    """Adam with bias correction; epsilon is added after the square root."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, expected_tag=None):
        super().__init__(params, lr, weight_decay, expected_tag)
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]
        self._t = 0

    def step(self):
        self._t += 1
        super().step()

    def _direction(self, i, p):
        b1, b2 = self.betas
        self._m[i] = b1 * self._m[i] + (1.0 - b1) * p.grad
        self._v[i] = b2 * self._v[i] + (1.0 - b2) * p.grad * p.grad
        m_hat = self._m[i] / (1.0 - b1 ** self._t)
        v_hat = self._v[i] / (1.0 - b2 ** self._t)
        return m_hat / (np.sqrt(v_hat) + self.eps)
