"""AdamW with decoupled weight decay and bias-corrected moments."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, NumericalError
from .tensor import Tensor


class AdamW:
    """Update rule per parameter p with gradient g at step t:

        m <- b1*m + (1-b1)*g
        v <- b2*v + (1-b2)*g^2
        p <- p - lr * ( m/(1-b1^t) / (sqrt(v/(1-b2^t)) + eps) + wd*p )

    The decay term multiplies the raw parameter, not the gradient, so
    it is unaffected by the moment rescaling.  Parameters are visited
    in sorted name order, which keeps update order independent of dict
    construction history.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0.0:
            raise ConfigError(f"weight decay must be >= 0, got {weight_decay}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = {name: np.zeros_like(p.values) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.values) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def fill_missing_grads(self) -> None:
        """Give parameters that took no part in the loss an explicit zero
        gradient, so `step` still applies weight decay to them."""
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.values)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                raise NumericalError(
                    f"parameter '{name}' has no gradient; run backward first "
                    "or call fill_missing_grads")
            if p.grad.shape != p.values.shape:
                raise NumericalError(
                    f"parameter '{name}' gradient shape {p.grad.shape} "
                    f"does not match value shape {p.values.shape}")
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.values -= self.lr * (update + self.weight_decay * p.values)
            if not np.all(np.isfinite(p.values)):
                raise NumericalError(f"parameter '{name}' became non-finite")
