"""Adam with bias correction and the inverse-square-root warmup schedule."""
from dataclasses import dataclass, field

import numpy as np

from stcl.errors import ContractError, NumericalError


def noam_lr(step, d_model, warmup):
    """``d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)``; peaks at ``step == warmup``."""
    if step < 1:
        raise ContractError(f"noam_lr is defined for step >= 1, got {step}")
    if warmup < 1:
        raise ContractError(f"warmup must be >= 1, got {warmup}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr, grads=None):
    """One bias-corrected Adam update, in place.

    ``params`` maps names to tensors. Gradients come from ``grads`` when given,
    otherwise from each tensor's ``.grad``; parameters without a gradient are
    left untouched.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state

