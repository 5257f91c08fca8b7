"""Interpolation stencils on the phase grid.

A stencil expresses the value of a grid field at an off-grid phase point as a
weighted sum of cell values, ``f(x, v) ~ sum_k w_k f[idx_k]``, with ``idx`` a
flat index into the raveled ``(n_x, n_v)`` array.  Position axes are periodic
on the torus and clamped otherwise; velocity axes are always clamped (values
beyond the outermost cell centre are extended constantly).
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ConfigurationError
from .geometry import PhaseGrid

__all__ = ["axis_weights", "stencil", "interpolate"]


def axis_weights(s: np.ndarray, n: int, periodic: bool, order: str = "linear"):
    """One-dimensional stencil for fractional node coordinates ``s``.

    Parameters
    ----------
    s : ndarray
        Coordinates in units of the node spacing, node ``j`` sitting at ``j``.
    n : int
        Number of nodes.
    periodic : bool
    order : {'linear', 'cubic'}
        Two-point linear or four-point Lagrange stencil.

    Returns
    -------
    idx, w : ndarray, shape (N, p)
    """
    if not periodic:
        s = np.clip(s, 0.0, n - 1.0)
    i0 = np.floor(s).astype(np.int64)
    t = s - i0
    if order == "linear":
        offs = np.array([0, 1])
        w = np.stack([1.0 - t, t], axis=1)
    elif order == "cubic":
        offs = np.array([-1, 0, 1, 2])
        w = np.stack([
            -t * (t - 1.0) * (t - 2.0) / 6.0,
            (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
            -(t + 1.0) * t * (t - 2.0) / 2.0,
            (t + 1.0) * t * (t - 1.0) / 6.0,
        ], axis=1)
    else:
        raise ConfigurationError(f"unknown interpolation order {order!r}")
    idx = i0[:, None] + offs[None, :]
    if periodic:
        idx = np.mod(idx, n)
    else:
        # nodes beyond the edge are replaced by the edge node (constant extension)
        idx = np.clip(idx, 0, n - 1)
    return idx, w


def stencil(grid: PhaseGrid, x: np.ndarray, v: np.ndarray, order: str = "linear"):
    """Tensor-product stencil for phase points ``(x, v)`` of shape ``(N, d)``.

    Returns
    -------
    idx : ndarray of int, shape (N, P)
        Flat indices into the raveled ``(n_x, n_v)`` field.
    w : ndarray, shape (N, P)
        Weights summing to one per point.
    """
    d = grid.dim
    periodic = grid.domain.periodic
    axes = []
    for i in range(d):
        s = (x[:, i] - grid.x_lo[i]) / grid.dx[i] - 0.5
        axes.append(axis_weights(s, grid.nx[i], periodic, order))
    for i in range(d):
        s = (v[:, i] + grid.v_max) / grid.dv[i] - 0.5
        axes.append(axis_weights(s, grid.nv[i], False, order))
    shape = tuple(grid.nx) + tuple(grid.nv)
    strides = np.array([int(np.prod(shape[k + 1:])) for k in range(len(shape))], dtype=np.int64)
    N = len(x)
    p = axes[0][0].shape[1]
    P = p ** len(axes)
    idx = np.zeros((N, P), dtype=np.int64)
    w = np.ones((N, P))
    for col, combo in enumerate(itertools.product(range(p), repeat=len(axes))):
        for ax, c in enumerate(combo):
            idx[:, col] += axes[ax][0][:, c] * strides[ax]
            w[:, col] *= axes[ax][1][:, c]
    return idx, w


def interpolate(field: np.ndarray, grid: PhaseGrid, x: np.ndarray, v: np.ndarray,
                order: str = "linear") -> np.ndarray:
    """Interpolate a grid field at phase points."""
    idx, w = stencil(grid, x, v, order)
    return np.sum(w * field.ravel()[idx], axis=1)
