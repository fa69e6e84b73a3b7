"""Sparsemax: Euclidean projection onto the probability simplex.

Forward uses sort-and-threshold; the backward is the exact Jacobian-vector
product of the projection restricted to the support.  Rows are projected
independently along the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NEG_LARGE, NonFiniteError, Tensor, _make


@dataclass
class SparsemaxResult:
    probs: np.ndarray
    support: np.ndarray   # bool, probs > 0
    tau: np.ndarray       # threshold per row in the input's frame (shape = probs.shape[:-1])

    @property
    def support_size(self) -> np.ndarray:
        return self.support.sum(axis=-1)


def sparsemax_np(z) -> SparsemaxResult:
    """Project each row of ``z`` (last axis) onto the simplex."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("sparsemax needs a non-empty vector")
    if not np.isfinite(z).all():
        raise NonFiniteError("sparsemax input contains NaN/Inf; mask with a finite constant")
    # subtracting the row max keeps the projection exactly shift invariant
    # whenever z + c is itself exact
    zmax = z.max(axis=-1, keepdims=True)
    z = z - zmax
    n = z.shape[-1]
    zs = -np.sort(-z, axis=-1)
    cums = np.cumsum(zs, axis=-1)
    k = np.arange(1, n + 1, dtype=np.float64)
    # strict rule; margins within round-off of zero count as equality
    tol = 8 * np.finfo(np.float64).eps * (1.0 + k * np.abs(zs) + np.abs(cums))
    cond = 1.0 + k * zs - cums > tol
    kstar = n - np.argmax(cond[..., ::-1], axis=-1)   # largest k meeting the rule
    csum_k = np.take_along_axis(cums, (kstar - 1)[..., None], axis=-1)[..., 0]
    tau = (csum_k - 1.0) / kstar
    # support from the sort rank, so entries below the k*-th value are exactly 0
    # even when z_i - tau rounds to a tiny positive number
    kth = np.take_along_axis(zs, (kstar - 1)[..., None], axis=-1)
    p = np.where(z >= kth, np.maximum(z - tau[..., None], 0.0), 0.0)
    return SparsemaxResult(p, p > 0, tau + zmax[..., 0])


def sparsemax_backward_np(upstream, result: SparsemaxResult) -> np.ndarray:
    """Gradient w.r.t. the input: upstream minus its support mean, zero off support."""
    g = np.asarray(upstream, dtype=np.float64)
    s = result.support
    size = s.sum(axis=-1, keepdims=True)
    if (size == 0).any():
        raise ValueError("sparsemax result has an empty support")
    mean = (g * s).sum(axis=-1, keepdims=True) / size
    return np.where(s, g - mean, 0.0)


def sparsemax(z: Tensor, axis: int = -1) -> Tensor:
    """Differentiable sparsemax along ``axis``."""
    moved = axis not in (-1, z.ndim - 1)
    data = np.moveaxis(z.data, axis, -1) if moved else z.data
    res = sparsemax_np(data)
    out = np.moveaxis(res.probs, -1, axis) if moved else res.probs

    def backward(g):
        gm = np.moveaxis(g, axis, -1) if moved else g
        gi = sparsemax_backward_np(gm, res)
        z._accumulate(np.moveaxis(gi, -1, axis) if moved else gi)

    return _make(out, (z,), backward, "sparsemax")


def masked_sparsemax_np(z, mask) -> SparsemaxResult:
    """Row-wise sparsemax with ``mask`` (true = excluded) mapped to a large negative."""
    z = np.where(np.asarray(mask, dtype=bool), NEG_LARGE, np.asarray(z, dtype=np.float64))
    return sparsemax_np(z)
