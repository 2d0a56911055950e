"""Uniform Cartesian grids on a centered box.

Cell centers live at ``-extent/2 + (i + 1/2) * spacing``.  The same layout is
used for periodic (torus) fixtures, where the box is identified edge-to-edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform grid on a box ``[-extent/2, extent/2]^dim``."""

    dim: int
    extent: float
    cells: int
    periodic: bool = False

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.cells < 8:
            raise ValueError(f"cells_per_axis must be >= 8, got {self.cells}")
        if self.extent <= 0:
            raise ValueError("extent must be positive")

    @property
    def spacing(self) -> float:
        return self.extent / self.cells

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.cells,) * self.dim

    @property
    def n_cells(self) -> int:
        return self.cells**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        """Cell-center coordinates along one axis."""
        h = self.spacing
        return -0.5 * self.extent + h * (np.arange(self.cells) + 0.5)

    @cached_property
    def centers(self) -> np.ndarray:
        """Cell-center coordinates, shape ``(*shape, dim)``."""
        grids = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack(grids, axis=-1)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(np.abs(x) <= 0.5 * self.extent))

    def cell_index(self, x) -> tuple[int, ...]:
        """Index of the cell whose center is nearest to ``x``."""
        x = np.asarray(x, dtype=float)
        idx = np.floor((x + 0.5 * self.extent) / self.spacing).astype(int)
        if self.periodic:
            idx = idx % self.cells
        else:
            idx = np.clip(idx, 0, self.cells - 1)
        return tuple(int(i) for i in idx)

    def flat_index(self, idx: tuple[int, ...]) -> int:
        return int(np.ravel_multi_index(idx, self.shape))

    def displacement(self, a, b) -> np.ndarray:
        """Vector from ``a`` to ``b``; shortest representative on a torus."""
        d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
        if self.periodic:
            d = (d + 0.5 * self.extent) % self.extent - 0.5 * self.extent
        return d

    def wrap(self, x) -> np.ndarray:
        """Map a point back into the fundamental box (periodic grids)."""
        x = np.asarray(x, dtype=float)
        if self.periodic:
            return (x + 0.5 * self.extent) % self.extent - 0.5 * self.extent
        return x
