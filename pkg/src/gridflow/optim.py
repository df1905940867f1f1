"""Adam with bias correction, operating on named numpy parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np

from .tensor import NonFiniteError, ShapeError


@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], learning_rate: float = 3e-4, **kwargs) -> "AdamState":
        """Fresh state with zero moments shaped like ``params``."""
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        state = cls(learning_rate=learning_rate, **kwargs)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        return state


def adam_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Raises:
        ShapeError: if a gradient or moment buffer does not match its parameter,
            or the parameter/gradient name sets differ.
        NonFiniteError: if any gradient contains NaN or Inf. Nothing is
            updated in that case.
    """
    if set(grads) != set(params):
        raise ShapeError("gradient names do not match parameter names")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if state.first_moment[name].shape != p.shape or state.second_moment[name].shape != p.shape:
            raise ShapeError(f"{name}: optimizer moment shape mismatch")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)
