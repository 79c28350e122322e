"""Product splitting of a torus into base and fibre coordinates.

The first ``base_dim`` complex coordinates span the base, the rest the fibre.
"""
from dataclasses import dataclass

import numpy as np

from .lattice import HermitianField, Mode, PeriodicGrid, ScalarField, _off_index


@dataclass(frozen=True)
class Fibration:
    base_dim: int

    def fiber_dim(self, grid):
        return grid.n_complex - self.base_dim

    def _check(self, grid):
        if not 0 < self.base_dim < grid.n_complex:
            raise ValueError(f"base dimension {self.base_dim} does not split n={grid.n_complex}")

    def base_axes(self, grid):
        self._check(grid)
        axes = [grid.x_axis(j) for j in range(self.base_dim)]
        if grid.mode is Mode.FULL:
            axes += [grid.y_axis(j) for j in range(self.base_dim)]
        return tuple(axes)

    def fiber_axes(self, grid):
        self._check(grid)
        axes = [grid.x_axis(j) for j in range(self.base_dim, grid.n_complex)]
        if grid.mode is Mode.FULL:
            axes += [grid.y_axis(j) for j in range(self.base_dim, grid.n_complex)]
        return tuple(axes)

    def base_grid(self, grid):
        res = tuple(grid.resolution[a] for a in self.base_axes(grid))
        return PeriodicGrid(self.base_dim, grid.mode, res)

    def fiber_grid(self, grid):
        res = tuple(grid.resolution[a] for a in self.fiber_axes(grid))
        return PeriodicGrid(self.fiber_dim(grid), grid.mode, res)

    def base_index(self, grid, base_node):
        """Index tuple selecting the fibre slice over ``base_node``."""
        idx = [slice(None)] * grid.ndim
        for a, i in zip(self.base_axes(grid), base_node):
            idx[a] = int(i)
        return tuple(idx)

    def fiber_slice(self, phi, base_node):
        """Scalar field restricted to the fibre over a base node."""
        return ScalarField(self.fiber_grid(phi.grid), phi.values[self.base_index(phi.grid, base_node)])

    def fiber_mean(self, phi):
        """Fibre average as a field on the base grid."""
        return ScalarField(self.base_grid(phi.grid), phi.values.mean(axis=self.fiber_axes(phi.grid)))

    def pullback(self, base_field, grid):
        """Extend a base scalar field constantly along the fibres."""
        shape = [1] * grid.ndim
        for a in self.base_axes(grid):
            shape[a] = grid.resolution[a]
        vals = np.broadcast_to(base_field.values.reshape(shape), grid.shape)
        return ScalarField(grid, vals)

    def fiber_block(self, f, base_node=None):
        """Fibre block of a Hermitian field, on the fibre grid over one base node
        or, with ``base_node`` None, over the whole grid."""
        grid = f.grid
        k = self.base_dim
        m = grid.n_complex - k
        idx = self.base_index(grid, base_node) if base_node is not None else (slice(None),) * grid.ndim
        target = self.fiber_grid(grid) if base_node is not None else None
        diag = np.stack([f.diag[k + j][idx] for j in range(m)])
        off = [f.off[_off_index(k + j, k + i)][idx] for j in range(m) for i in range(j)]
        shape = diag.shape[1:]
        off = np.stack(off) if off else np.zeros((0,) + shape, complex)
        if target is None:
            return diag, off
        return HermitianField(target, diag, off)

    def base_block_constant(self, matrix):
        k = self.base_dim
        return np.asarray(matrix)[:k, :k]
