"""Semilinear elliptic solver: -lap(y) + f(x, y) = u with zero-flux closure.

The nonlinearity is pluggable: analytic formulas, trained networks taking
(x1, x2, y) or y alone, and the scaled double-well term (y^3 - y)/eta. Newton
linearizations and adjoint-type solves share one sparse direct factorization
path. Also hosts the empirical surrogate-error sampler used by the error
budget harness.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse.linalg import splu

from .exceptions import DivergenceError, SolverError
from .grid import Grid2D, hminus1_norm, l2_norm, laplacian_apply, norms, operator_matrix
from .mlp import (Mlp, MinMaxScaler, forward_batch, input_jacobian_batch,
                  input_second_partial_batch)


class AnalyticNonlinearity:
    """f given by closures for the value and its first two y-derivatives."""

    def __init__(self, f, fy, fyy, name: str = "analytic"):
        self._f = f
        self._fy = fy
        self._fyy = fyy
        self.name = name

    def value(self, x1, x2, y):
        return np.broadcast_to(self._f(x1, x2, y), np.shape(y)).astype(float)

    def deriv_y(self, x1, x2, y):
        return np.broadcast_to(self._fy(x1, x2, y), np.shape(y)).astype(float)

    def deriv_yy(self, x1, x2, y):
        return np.broadcast_to(self._fyy(x1, x2, y), np.shape(y)).astype(float)


class AllenCahnNonlinearity:
    """Double-well derivative (y^3 - y)/eta."""

    def __init__(self, eta: float):
        if eta <= 0:
            raise ValueError("eta must be positive")
        self.eta = float(eta)
        self.name = f"allen_cahn(eta={eta:g})"

    def value(self, x1, x2, y):
        return (y ** 3 - y) / self.eta

    def deriv_y(self, x1, x2, y):
        return (3.0 * y ** 2 - 1.0) / self.eta

    def deriv_yy(self, x1, x2, y):
        return 6.0 * y / self.eta


class NetworkNonlinearity:
    """Trained surrogate for f; inputs are (x1, x2, y) or y alone.

    Scalers map raw inputs into the trained box and the network output back
    to physical units; y-derivatives chain through both affine maps and the
    exact network derivatives.
    """

    def __init__(self, net: Mlp, in_scaler: MinMaxScaler, out_scaler: MinMaxScaler,
                 mode: str = "xy"):
        if mode not in ("xy", "y"):
            raise ValueError("mode must be 'xy' or 'y'")
        expected = 3 if mode == "xy" else 1
        if net.input_dim != expected or net.output_dim != 1:
            raise ValueError(f"mode {mode!r} needs a {expected}-in/1-out network")
        if in_scaler.dim != expected or out_scaler.dim != 1:
            raise ValueError("scaler dimensions do not match the network")
        self.net = net
        self.in_scaler = in_scaler
        self.out_scaler = out_scaler
        self.mode = mode
        self.name = f"network({mode})"
        self._y_index = 2 if mode == "xy" else 0

    def _stack(self, x1, x2, y):
        y = np.asarray(y, dtype=float)
        if self.mode == "y":
            raw = y.reshape(-1, 1)
        else:
            b = np.broadcast_arrays(x1, x2, y)
            raw = np.stack([b[0].ravel(), b[1].ravel(), b[2].ravel()], axis=1)
        return self.in_scaler.scale(raw), y.shape

    def value(self, x1, x2, y):
        v, shape = self._stack(x1, x2, y)
        out = self.out_scaler.unscale(forward_batch(self.net, v))
        return out[:, 0].reshape(shape)

    def _chain_factors(self):
        s_in = self.in_scaler.jacobian_diag()[self._y_index]
        s_out = 1.0 / self.out_scaler.jacobian_diag()[0]
        return s_in, s_out

    def deriv_y(self, x1, x2, y):
        v, shape = self._stack(x1, x2, y)
        jac = input_jacobian_batch(self.net, v)[:, 0, self._y_index]
        s_in, s_out = self._chain_factors()
        return (s_out * s_in * jac).reshape(shape)

    def deriv_yy(self, x1, x2, y):
        v, shape = self._stack(x1, x2, y)
        hess = input_second_partial_batch(self.net, v, self._y_index)[:, 0]
        s_in, s_out = self._chain_factors()
        return (s_out * s_in * s_in * hess).reshape(shape)


class PdeSolveReport:
    """Outcome of one nonlinear state solve."""

    __slots__ = ("iterations", "residual", "converged", "sup_norm")

    def __init__(self, iterations: int, residual: float, converged: bool, sup_norm: float):
        self.iterations = iterations
        self.residual = residual
        self.converged = converged
        self.sup_norm = sup_norm

    def __repr__(self):
        return (f"PdeSolveReport(iterations={self.iterations}, residual={self.residual:.3e}, "
                f"converged={self.converged}, sup_norm={self.sup_norm:.3e})")


def _factorize(grid: Grid2D, a, context: str):
    mat = operator_matrix(grid, a).tocsc()
    try:
        return splu(mat)
    except RuntimeError as err:
        raise SolverError(f"singular linearization in {context}: {err}") from err


def solve_state(grid: Grid2D, f, u: np.ndarray, y0: np.ndarray | None = None,
                tol: float = 1e-12, max_iter: int = 30):
    """Newton iteration for -lap(y) + f(x, y) = u; residual in the dual norm.

    Returns the last iterate with a report; the converged flag certifies
    residual <= tol. Warm starts come in through y0.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid.check_field(u)
    y = grid.zeros() if y0 is None else np.array(y0, dtype=float)
    grid.check_field(y)
    x1, x2 = grid.mesh()

    residual = np.inf
    for k in range(max_iter + 1):
        r = -laplacian_apply(grid, y) + f.value(x1, x2, y) - u
        prev = residual
        residual = hminus1_norm(grid, r)
        if residual <= tol:
            return y, PdeSolveReport(k, residual, True, float(np.max(np.abs(y))))
        if residual < 1e-12 and residual > 0.1 * prev:
            # stalled at rounding level; tighter tolerances are unreachable
            return y, PdeSolveReport(k, residual, False, float(np.max(np.abs(y))))
        if k == max_iter:
            break
        lu = _factorize(grid, f.deriv_y(x1, x2, y), f"Newton step {k}")
        y = y - lu.solve(r.ravel()).reshape(grid.shape)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"non-finite iterate at Newton step {k}")
    return y, PdeSolveReport(max_iter, residual, False, float(np.max(np.abs(y))))


def solve_linearized(grid: Grid2D, a, v: np.ndarray) -> np.ndarray:
    """Direct solve of (-lap + diag(a)) p = v with a residual certificate."""
    grid.check_field(v)
    lu = _factorize(grid, a, "linearized solve")
    p = lu.solve(np.asarray(v, dtype=float).ravel()).reshape(grid.shape)
    if not np.all(np.isfinite(p)):
        raise SolverError("linearized solve produced non-finite values")
    mat = operator_matrix(grid, a)
    resid = np.linalg.norm(mat @ p.ravel() - np.ravel(v))
    scale = max(np.linalg.norm(np.ravel(v)), 1e-300)
    if resid / scale > 1e-10:
        raise SolverError(f"linearized solve residual {resid / scale:.3e} exceeds 1e-10")
    return p


def smallness_indicator(grid: Grid2D, f, y: np.ndarray):
    """Norms of the negative part of d_y f at y: (mesh L2, sup)."""
    x1, x2 = grid.mesh()
    neg = np.minimum(f.deriv_y(x1, x2, np.asarray(y, dtype=float)), 0.0)
    return l2_norm(grid, neg), float(np.max(np.abs(neg)))


def _default_probes(grid: Grid2D):
    x1, x2 = grid.mesh()
    lx, ly = grid.extent
    fields = [np.ones(grid.shape),
              np.cos(np.pi * x1 / lx),
              np.cos(np.pi * x1 / lx) * np.cos(np.pi * x2 / ly)]
    out = []
    for v in fields:
        out.append(v / l2_norm(grid, v))
    return out


def operator_error_sample(grid: Grid2D, f_exact, f_surrogate, controls,
                          probes=None, tol: float = 1e-12, max_iter: int = 30):
    """Empirical surrogate-error levels over a control family.

    Returns (eps_state, eps_adjoint): the worst mesh-L2 state gap over the
    controls, and the worst composite (H1 plus sup) gap of the linearized
    solves over controls crossed with a fixed set of unit probes.
    """
    if probes is None:
        probes = _default_probes(grid)
    x1, x2 = grid.mesh()
    eps_state = 0.0
    eps_adjoint = 0.0
    for j, u in enumerate(controls):
        try:
            y_e, _ = solve_state(grid, f_exact, u, tol=tol, max_iter=max_iter)
            y_s, _ = solve_state(grid, f_surrogate, u, tol=tol, max_iter=max_iter)
        except (SolverError, DivergenceError) as err:
            raise SolverError(f"state solve failed for control {j}: {err}") from err
        eps_state = max(eps_state, l2_norm(grid, y_e - y_s))
        a_e = f_exact.deriv_y(x1, x2, y_e)
        a_s = f_surrogate.deriv_y(x1, x2, y_s)
        for v in probes:
            try:
                p_e = solve_linearized(grid, a_e, v)
                p_s = solve_linearized(grid, a_s, v)
            except SolverError as err:
                raise SolverError(f"linearized solve failed for control {j}: {err}") from err
            d = norms(grid, p_e - p_s)
            h1 = np.hypot(d.l2, d.h1_semi)
            eps_adjoint = max(eps_adjoint, h1 + d.linf)
    return eps_state, eps_adjoint
