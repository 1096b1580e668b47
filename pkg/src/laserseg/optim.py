"""Adam with bias correction, operating in place on numpy parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update of every array in ``params``.

    Parameters are modified in place. A missing or ``None`` gradient counts as
    zero, so moments keep decaying for parameters that received no signal.
    """
    lr = state.learning_rate if lr is None else lr
    for name, g in grads.items():
        # one reduction pass; the elementwise scan only runs when the sum is suspicious
        if g is not None and not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step_size = lr / (1.0 - b1 ** t)
    # p -= step_size * m / (sqrt(v) / sqrt(1 - b2^t) + eps), folded into one denominator
    root_scale = 1.0 / (np.sqrt(1.0 - b2 ** t) * step_size)
    eps_scale = state.epsilon / step_size

    for name, p in params.items():
        g = grads.get(name)
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        if m.shape != p.shape:
            raise DimensionError(f"moment shape {m.shape} does not match parameter '{name}' {p.shape}")
        m *= b1
        v *= b2
        buf = np.empty_like(p)
        if g is not None:
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
            np.multiply(g, 1.0 - b1, out=buf)
            m += buf
            np.multiply(g, g, out=buf)
            buf *= 1.0 - b2
            v += buf
        np.sqrt(v, out=buf)
        buf *= root_scale
        buf += eps_scale
        np.divide(m, buf, out=buf)
        p -= buf


class Adam:
    """Thin wrapper keeping an :class:`AdamState` for a named parameter group."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def step(self, grads: dict[str, np.ndarray | None], lr: float | None = None) -> None:
        adam_step(self.params, grads, self.state, lr)
