"""Finite-difference verification of backpropagated gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError
from .tensor import Tensor, backward


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    """|a - n| / max(|a|, |n|, floor).

    The floor sets the scale below which agreement is judged absolutely
    rather than relatively: central differences on an O(1) scalar resolve
    gradients only to about machine_eps * |f| / eps (~4e-10 for |f| ~ 1,
    eps 1e-6), so coordinates much smaller than the floor would otherwise
    report pure roundoff noise as error.  At 1e-5 a vanished-but-nonzero
    gradient still has to agree with the numeric estimate to 1e-9 before
    a 1e-4 check passes, which no broken backward rule survives.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-6, floor: float = 1e-5) -> float:
    """Compare backpropagated gradients of the scalar `fn()` against
    central finite differences over every coordinate of `params`.

    `fn` must rebuild its graph from the current parameter values on
    each call and must be deterministic between calls.  Returns the
    maximum relative error over all coordinates.
    """
    if eps <= 0.0:
        raise NumericalError(f"finite-difference step must be positive, got {eps}")
    for p in params:
        if not p.requires_grad:
            raise NumericalError("grad_check parameters must require gradients")
        p.grad = None

    loss = fn()
    if loss.values.shape != ():
        raise NumericalError("grad_check needs a scalar-valued function")
    backward(loss)

    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.values))
        else:
            analytic.append(p.grad.copy())

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.values.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = fn().item()
            flat[i] = saved - eps
            down = fn().item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(gflat[i], numeric, floor))
    return worst
