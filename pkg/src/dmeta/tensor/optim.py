"""Adam with bias correction, operating on dicts of named arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dmeta.errors import InvalidArgumentError, NumericError


@dataclass
class AdamState:
    """Per-parameter moment buffers for :func:`adam_step`.

    ``beta1 == 0`` disables momentum (the usual setting for task-level
    training in Reptile-style meta-learning).
    """

    learning_rate: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidArgumentError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise InvalidArgumentError("epsilon must be > 0")


def adam_step(params, grads, state):
    """Apply one Adam update in place to ``params[name]`` for every name in ``grads``.

    Returns ``(params, state)`` for convenience.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    eps_t = state.epsilon * np.sqrt(1.0 - b2**t)
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g if b1 else g.astype(p.dtype, copy=True)
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        # lr*m_hat/(sqrt(v_hat)+eps), folded into a single scale per step
        p -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(p.dtype)
    return params, state
