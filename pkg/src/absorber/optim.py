"""AdamW over dicts of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 0.0,
               step_index: int | None = None, eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update, in place. ``step_index`` is 1-based; defaults to state.step + 1.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` before the Adam step.
    Parameters without a gradient entry are left alone.
    """
    t = state.step + 1 if step_index is None else int(step_index)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    state.step = t
    return params, state


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999),
                 weight_decay: float = 0.0, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        adamw_step(self.params, grads, self.state, self.lr if lr is None else lr, self.betas[0], self.betas[1],
                   self.weight_decay, eps=self.eps)
