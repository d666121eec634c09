"""Bias-corrected Adam over named parameter collections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class AdamState:
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0 or self.learning_rate < 0:
            raise ValueError("Adam needs epsilon > 0 and learning_rate >= 0")


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, Tensor], AdamState]:
    """Apply one Adam update and return fresh parameters and state.

    Inputs are left untouched. A non-finite gradient rejects the whole step.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r} at Adam step {state.t + 1}; step rejected")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        v = state.v.get(name)
        if g is None:
            new_params[name] = p
            if m is not None:
                new_m[name], new_v[name] = m, v
            continue
        g = np.asarray(g, dtype=p.data.dtype)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        update = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        new_params[name] = Tensor(p.data - update, requires_grad=p.requires_grad, name=p.name)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(state.learning_rate, b1, b2, state.epsilon, t, new_m, new_v)
    return new_params, new_state


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of every parameter; parameters untouched by backward get zeros."""
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
