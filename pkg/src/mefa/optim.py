"""LAMB optimizer and the linear warmup schedule.

LAMB keeps Adam-style first/second moment estimates per parameter block
and rescales each block's update by the trust ratio ||w|| / ||update||,
so the relative step size of every layer is the learning rate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor


@dataclass
class LambState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kwargs) -> "LambState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def lamb_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: LambState, lr: float) -> None:
    """One LAMB update over named parameter blocks, in place.

    Rejects the whole step if any gradient block is non-finite; no block is
    touched in that case.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise ValueError(
                f"non-finite gradient in block {name!r} at step {state.step}; "
                f"step rejected"
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        w_norm = float(np.linalg.norm(p.data))
        u_norm = float(np.linalg.norm(update))
        trust = w_norm / u_norm if (w_norm > 0.0 and u_norm > 0.0) else 1.0
        p.data = p.data - (lr * trust) * update.astype(p.dtype)


def lr_schedule(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Linear ramp from lr_start at step 0 to lr_end at total_steps."""
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    if total_steps < 1:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if step > total_steps:
        warnings.warn(
            f"step {step} beyond schedule end {total_steps}; clamping to lr_end",
            stacklevel=2,
        )
        return lr_end
    return lr_start + (lr_end - lr_start) * step / total_steps
