"""AdamW with decoupled weight decay over dicts of numpy parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    frozen: frozenset[str] = frozenset(),
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update; returns new parameter arrays and the advanced state.

    The decay ``p *= 1 - lr * weight_decay`` is applied before the
    bias-corrected adaptive step, independently of the gradient.
    """
    b1, b2 = betas
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    m_out: dict[str, np.ndarray] = {}
    v_out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if name in frozen or name not in grads:
            new_params[name] = p
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        decayed = p * (1 - lr * weight_decay)
        new_params[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_out[name], v_out[name] = m, v
    return new_params, AdamWState(step=t, m={**state.m, **m_out}, v={**state.v, **v_out})


class AdamW:
    """Stateful convenience wrapper around :func:`adamw_step`."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, frozen=()):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.frozen = frozenset(frozen)
        self.state = AdamWState()

    def step(self, params, grads):
        params, self.state = adamw_step(
            params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay, self.frozen
        )
        return params
