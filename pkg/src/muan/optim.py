"""Adam with bias correction.

State lives outside the parameters so the same step function serves any
parameter list, and so checkpoints can stay optimiser-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingDivergenceError
from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    names: list[str] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, names=None, beta1: float = 0.9, beta2: float = 0.99,
                   epsilon: float = 1e-8) -> "AdamState":
        m = [np.zeros_like(p.data) for p in params]
        v = [np.zeros_like(p.data) for p in params]
        names = list(names) if names is not None else [f"param[{i}]" for i in range(len(m))]
        return cls(m=m, v=v, beta1=beta1, beta2=beta2, epsilon=epsilon, names=names)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float):
    """One in-place Adam update; returns ``(params, state)``.

    Rejects non-finite gradients before touching any buffer, naming the
    offending parameter, so a diverged step cannot poison the state.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, {len(state.m)} state slots"
        )
    for i, g in enumerate(grads):
        if g is None:
            raise ContractError(f"adam_step: missing gradient for '{state.names[i]}'")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter '{state.names[i]}'")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / correction1
        vhat = v / correction2
        p.data -= lr * mhat / (np.sqrt(vhat) + state.epsilon)
    return params, state
