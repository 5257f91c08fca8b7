"""Distribution fields on a :class:`~linboltz.geometry.PhaseGrid`."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, NumericError
from .geometry import PhaseGrid

__all__ = ["DistributionField", "as_values", "like"]


@dataclass(frozen=True, eq=False)
class DistributionField:
    """Values ``f(x-cell, v-cell)`` on a phase grid.

    Attributes
    ----------
    grid : PhaseGrid
    values : ndarray, shape (n_x, n_v)
        Cells outside a bounded domain are held at zero.
    time : float
    meta : dict
        Free-form metadata (scheme, kernel id, ...).
    """

    grid: PhaseGrid
    values: np.ndarray
    time: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ContractError(f"field shape {vals.shape} does not match grid shape {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise NumericError("distribution field contains non-finite values")
        object.__setattr__(self, "values", vals)

    def with_values(self, values: np.ndarray, **changes) -> "DistributionField":
        return replace(self, values=values, **changes)

    @property
    def mass(self) -> float:
        return float(np.sum(self.grid.cell_weights * self.values))


def as_values(f, grid: PhaseGrid) -> np.ndarray:
    """Return the value array of ``f`` (field or array), checking its shape."""
    if isinstance(f, DistributionField):
        if f.grid is not grid and f.grid.shape != grid.shape:
            raise ContractError("field lives on a different grid")
        return f.values
    arr = np.asarray(f, dtype=float)
    if arr.shape != grid.shape:
        raise ContractError(f"field shape {arr.shape} does not match grid shape {grid.shape}")
    return arr


def like(template, values: np.ndarray, grid: PhaseGrid):
    """Wrap ``values`` like ``template``: a field if the template was a field."""
    if isinstance(template, DistributionField):
        return template.with_values(values)
    return values
