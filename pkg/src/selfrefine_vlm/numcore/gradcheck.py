"""Central finite differences against tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d fn / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = fn()
        flat[i] = keep - eps
        down = fn()
        flat[i] = keep
        out[i] = (up - down) / (2.0 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-9) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|), with entries under ``atol`` treated as agreeing.

    ``atol`` sits at the round-off floor of an eps=1e-5 central difference on O(1) losses.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = diff <= atol
    rel = np.where(ok, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


def check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    atol: float = 1e-9,
) -> dict[str, float]:
    """Backprop ``loss_fn()`` once, then finite-difference every entry of every parameter.

    Returns the worst relative error per parameter name.
    """
    for p in params.values():
        p.zero_grad()
    root = loss_fn()
    root.tape.backward(root)
    report = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = numerical_grad(lambda: loss_fn().item(), p.data, eps)
        report[name] = max_rel_error(analytic, numeric, atol)
    return report
