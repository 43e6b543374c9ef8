"""AdamW with decoupled weight decay."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def __post_init__(self):
        b1, b2 = self.betas
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError(f"invalid AdamW hyperparameters lr={self.lr} eps={self.eps} wd={self.weight_decay}")
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"AdamW betas must lie in [0, 1), got {self.betas}")


def adamw_step(params, state, lr=None):
    """Apply one AdamW update in place to every named parameter that has a grad.

    ``params`` maps names to tensors. Parameters whose ``grad`` is ``None``
    were not reached by the last backward pass and are left untouched,
    including their moment buffers. ``lr`` overrides ``state.lr`` for this
    step only (used by warmup schedules).
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
