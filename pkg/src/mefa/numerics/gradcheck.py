"""Finite-difference verification of analytic gradients.

The checker is the referee for every differentiable operation and loss in
the package: central differences, computed coordinate by coordinate, are
compared against one reverse-mode backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


class GradientProbeError(RuntimeError):
    """The probed function returned a non-finite value near x."""


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def check_gradient(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    tol: float = 1e-5,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare the backward-pass gradient of ``f`` at ``x`` to central differences.

    Per coordinate i the numeric estimate is (f(x+h e_i) - f(x-h e_i)) / 2h.
    The relative error divides |analytic - numeric| by
    max(|analytic|, |numeric|, floor); the floor keeps finite-difference noise
    on near-zero coordinates from registering as disagreement. Passes iff the
    maximum relative error is at most ``tol``.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    x0 = np.array(x.data, copy=True)

    leaf = Tensor(x0, requires_grad=True)
    value = f(leaf)
    if value.data.shape != ():
        raise ValueError(f"gradient check needs a scalar-valued function, got shape {value.shape}")
    if not np.isfinite(value.data):
        raise GradientProbeError(f"function is not finite at x: {value.item()}")
    value.backward()
    analytic = np.zeros_like(x0) if leaf.grad is None else np.array(leaf.grad, copy=True)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(Tensor(x0)).item()
            flat[i] = orig - h
            f_minus = f(Tensor(x0)).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradientProbeError(
                    f"function is not finite at probe {i}: f+={f_plus}, f-={f_minus}"
                )
            num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        max_rel_err=max_rel,
        passed=max_rel <= tol,
        analytic=analytic,
        numeric=numeric,
    )
