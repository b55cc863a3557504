"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import ValidationError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState):
    """Apply one Adam update in place to every tensor in ``params``.

    Every parameter must carry a gradient; a missing one raises naming it.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValidationError(f"adam_step: no gradient for parameter(s) {', '.join(missing)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        if g.shape != p.shape:
            raise ValidationError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    """Adam over a fixed, named parameter set."""

    def __init__(self, params: Dict[str, Tensor], lr=2e-4, betas=(0.5, 0.999), eps=1e-8):
        self.params = dict(params)
        self.state = AdamState(lr, betas[0], betas[1], eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        adam_step(self.params, self.state)
