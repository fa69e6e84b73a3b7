"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], float], p: Tensor, h: float = 1e-4,
                   coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``p.data`` (flat ``coords`` only)."""
    flat = p.data.reshape(-1)
    out = np.zeros(flat.size)
    idx = np.arange(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(p.shape)


ABS_FLOOR = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf, floor)``.

    Normalising by the tensor-wide scale instead of per entry keeps entries
    whose true gradient is ~0 from dominating through round-off.  ``floor``
    covers tensors whose gradient is identically zero (e.g. attention key
    biases, which every softmax row is invariant to); there the central
    difference is pure round-off of order ``1e-12 / h``.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-4,
                    max_coords: int | None = None, rng: np.random.Generator | None = None
                    ) -> dict[str, float]:
    """Compare ``backward`` gradients with central differences for each parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values.  When
    ``max_coords`` is set, a random subset of entries is checked per tensor.
    Returns the relative error per parameter name.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        n = p.data.size
        coords = None
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        numeric = numerical_grad(lambda: loss_fn().item(), p, h, coords)
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        errors[name] = relative_error(analytic, numeric)
    return errors
