"""Uniform 2D grids with a five-point Neumann Laplacian and discrete norms.

Nodes are vertex-centered and include the boundary: a rectangle of extent
(Lx, Ly) at mesh width h carries (Lx/h + 1) x (Ly/h + 1) nodes. Fields are
plain 2D arrays of shape (ny, nx), row-major, and serialize to headerless
CSV rasters (ny rows, nx columns).

The Laplacian uses the symmetric zero-flux closure: the second difference
at an edge node keeps only the interior neighbor, which realizes the
operator as a symmetric negative-semidefinite matrix whose kernel is the
constants. Interior rows are the standard centered stencil and are
second-order consistent. The discrete H1 seminorm is the quadratic form of
the negated operator, |z|_1^2 = h^2 (-Lap z)' z, which equals the sum of
squared one-sided differences and is therefore exactly nonnegative.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .exceptions import SolverError


class Grid2D:
    """Vertex-centered uniform grid on [0, Lx] x [0, Ly] with spacing h."""

    def __init__(self, h: float, extent=(1.0, 1.0)):
        if h <= 0:
            raise ValueError(f"mesh width must be positive, got {h}")
        lx, ly = float(extent[0]), float(extent[1])
        nx = int(round(lx / h)) + 1
        ny = int(round(ly / h)) + 1
        for n, ell in ((nx, lx), (ny, ly)):
            if n < 2 or abs((n - 1) * h - ell) > 1e-12 * max(1.0, ell):
                raise ValueError(f"extent {ell} is not a multiple of h={h}")
        self.h = float(h)
        self.extent = (lx, ly)
        self.nx = nx
        self.ny = ny
        self.xs = np.linspace(0.0, lx, nx)
        self.ys = np.linspace(0.0, ly, ny)
        self._lap = None
        self._hminus1_solve = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def num_nodes(self) -> int:
        return self.nx * self.ny

    def mesh(self):
        """Coordinate arrays (X1, X2), each of shape (ny, nx)."""
        return np.meshgrid(self.xs, self.ys)

    def check_field(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != self.shape:
            raise ValueError(f"field shape {z.shape} does not match grid {self.shape}")
        return z

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def constant(self, value: float) -> np.ndarray:
        return np.full(self.shape, float(value))

    def __repr__(self):
        return f"Grid2D(h={self.h}, extent={self.extent}, shape={self.shape})"


def _lap1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / (h * h)


def laplacian_matrix(grid: Grid2D) -> sp.csr_matrix:
    """Sparse symmetric Neumann Laplacian on flattened (row-major) fields."""
    if grid._lap is None:
        lx = _lap1d(grid.nx, grid.h)
        ly = _lap1d(grid.ny, grid.h)
        ix = sp.identity(grid.nx, format="csr")
        iy = sp.identity(grid.ny, format="csr")
        grid._lap = (sp.kron(iy, lx) + sp.kron(ly, ix)).tocsr()
    return grid._lap


def laplacian_apply(grid: Grid2D, z: np.ndarray) -> np.ndarray:
    """Apply the discrete Laplacian (consistent with Delta, not -Delta)."""
    z = grid.check_field(z)
    return kernels.laplacian_stencil(z, grid.h)


def operator_matrix(grid: Grid2D, diag) -> sp.csr_matrix:
    """Assemble -Lap + diag(a) for linear solves; symmetric sparse matrix."""
    if np.isscalar(diag):
        a = np.full(grid.num_nodes, float(diag))
    else:
        a = grid.check_field(diag).ravel()
    return (-laplacian_matrix(grid) + sp.diags(a)).tocsr()


class DiscreteNorms:
    """Container for the discrete L2 norm, H1 seminorm and sup norm."""

    __slots__ = ("l2", "h1_semi", "linf")

    def __init__(self, l2: float, h1_semi: float, linf: float):
        self.l2 = l2
        self.h1_semi = h1_semi
        self.linf = linf

    def __repr__(self):
        return f"DiscreteNorms(l2={self.l2:.6g}, h1_semi={self.h1_semi:.6g}, linf={self.linf:.6g})"


def norms(grid: Grid2D, z: np.ndarray) -> DiscreteNorms:
    z = grid.check_field(z)
    l2 = grid.h * float(np.linalg.norm(z.ravel()))
    quad = -float(np.dot(laplacian_apply(grid, z).ravel(), z.ravel()))
    h1 = grid.h * np.sqrt(max(quad, 0.0))
    linf = float(np.max(np.abs(z))) if z.size else 0.0
    return DiscreteNorms(l2, h1, linf)


def l2_norm(grid: Grid2D, z: np.ndarray) -> float:
    return grid.h * float(np.linalg.norm(np.asarray(z).ravel()))


def hminus1_norm(grid: Grid2D, r: np.ndarray) -> float:
    """Dual norm realized through the solve (-Lap + Id) w = r."""
    r = grid.check_field(r)
    if grid._hminus1_solve is None:
        mat = operator_matrix(grid, grid.constant(1.0)).tocsc()
        try:
            grid._hminus1_solve = spla.factorized(mat)
        except RuntimeError as exc:  # pragma: no cover - SPD by construction
            raise SolverError(f"H^-1 factorization failed: {exc}") from exc
    w = grid._hminus1_solve(r.ravel())
    val = grid.h * grid.h * float(np.dot(r.ravel(), w))
    return float(np.sqrt(max(val, 0.0)))


def restrict(z: np.ndarray, fine: Grid2D, coarse_step: float):
    """Subsample a field at the nodes of a coarser commensurate mesh.

    Returns (points, values): coordinates of shape (n, 2) and the sampled
    values, ordered row-major over the coarse nodes.
    """
    z = fine.check_field(z)
    ratio = coarse_step / fine.h
    k = int(round(ratio))
    if k < 1 or abs(coarse_step - k * fine.h) > 1e-9 * max(1.0, coarse_step):
        raise ValueError(
            f"coarse step {coarse_step} is not an integer multiple of h={fine.h}"
        )
    xi = np.arange(0, fine.nx, k)
    yi = np.arange(0, fine.ny, k)
    xx, yy = np.meshgrid(fine.xs[xi], fine.ys[yi])
    points = np.column_stack([xx.ravel(), yy.ravel()])
    values = z[np.ix_(yi, xi)].ravel()
    return points, values


def save_field(path, z: np.ndarray) -> None:
    """Write a field as a headerless CSV raster at full precision."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2:
        raise ValueError("expected a 2D field")
    np.savetxt(path, z, fmt="%.17g", delimiter=",")


def load_field(path, grid: Grid2D | None = None) -> np.ndarray:
    """Read a CSV raster; validates the shape when a grid is given."""
    z = np.loadtxt(path, delimiter=",", ndmin=2)
    if grid is not None:
        z = grid.check_field(z)
    if not np.all(np.isfinite(z)):
        raise ValueError(f"non-finite values in field file {path}")
    return z
