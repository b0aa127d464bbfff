"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .nn import Parameter


class OptimState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]


def adamw_step(params: list[Parameter], grads, state: OptimState):
    """One decoupled-weight-decay update; mutates params in place.

    Decay is applied first (w *= 1 - lr*wd), then the bias-corrected Adam
    step. A zero-grad step therefore shrinks weights by exactly lr*wd.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient for parameter '{p.label}'")
        if g.shape != p.values.shape:
            raise NumericError(
                f"gradient shape {g.shape} does not match parameter "
                f"'{p.label}' shape {p.values.shape}")
        if state.weight_decay:
            p.values *= (1.0 - state.lr * state.weight_decay)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.values -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.values.dtype, copy=False)
    return params


class AdamW:
    """Stateful wrapper used by the training loops."""

    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimState(self.params, lr, weight_decay, betas, eps)

    def step(self):
        grads = [p.grad for p in self.params]
        adamw_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
