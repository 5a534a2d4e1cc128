"""Adam optimizer over :class:`~despeckle.autodiff.Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _check_finite
from .errors import StateError


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates and the shared step count."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_param(cls, param: Tensor) -> "AdamState":
        return cls(
            m=np.zeros_like(param.data),
            v=np.zeros_like(param.data),
        )


@dataclass
class AdamHyperparams:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[Tensor], states: list[AdamState], hp: AdamHyperparams) -> None:
    """Apply one bias-corrected Adam update in place and clear gradients.

    Every parameter must carry a gradient from a completed backward pass;
    a missing gradient raises :class:`~despeckle.errors.StateError`. With a
    zero gradient or a zero learning rate the parameter values are unchanged.
    """
    for i, (p, s) in enumerate(zip(params, states)):
        if p.grad is None:
            raise StateError(f"adam_step: parameter {i} has no gradient")
        g = p.grad
        s.t += 1
        s.m *= hp.beta1
        s.m += (1.0 - hp.beta1) * g
        s.v *= hp.beta2
        s.v += (1.0 - hp.beta2) * (g * g)
        m_hat = s.m / (1.0 - hp.beta1**s.t)
        v_hat = s.v / (1.0 - hp.beta2**s.t)
        update = hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
        _check_finite(p.data, "adam_step")
        p.grad = None


class Adam:
    """Convenience wrapper binding parameters to their Adam state."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.hp = AdamHyperparams(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.states = [AdamState.for_param(p) for p in self.params]

    def step(self) -> None:
        adam_step(self.params, self.states, self.hp)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
