"""Benchmark problem setups: manufactured semilinear control problems,
surrogate training data, the phase-separation problem, and a linear-quadratic
family with exactly known surrogate errors.

The main testbed lives on (0,2)^2 with the monotone cubic reaction term
f(x, z) = z + 5 cos(pi x1 x2)^2 z^3. Training data for the surrogate comes
from manufactured control/state pairs sampled on a fine grid and restricted
to coarser ones, so the samples carry the discretization error of the fine
solve and nothing else.
"""

from __future__ import annotations

import numpy as np

from .grid import Grid2D, laplacian_apply, restrict
from .mlp import MinMaxScaler
from .ocp import BoxConstraints, OcpProblem
from .pde import AllenCahnNonlinearity, AnalyticNonlinearity, NetworkNonlinearity, solve_state
from .train import Dataset, TrainOptions, nguyen_widrow_init, split, train_lm_bayes

EXTENT = (2.0, 2.0)
SHAPE_COEFFS = (0.01, 0.41, 0.81, 1.21, 1.61, 2.01)
DATA_SPACINGS = {"coarse": 0.2, "medium": 0.1, "fine": 0.08}
FINE_H = 1.0 / 50.0
CONTROL_BOX = (-20.0, 20.0)
ALLEN_CAHN_ETA = 0.004


def benchmark_nonlinearity() -> AnalyticNonlinearity:
    """Monotone cubic reaction term z + 5 cos(pi x1 x2)^2 z^3."""

    def weight(x1, x2):
        return 5.0 * np.cos(np.pi * x1 * x2) ** 2

    return AnalyticNonlinearity(
        f=lambda x1, x2, z: z + weight(x1, x2) * z ** 3,
        fy=lambda x1, x2, z: 1.0 + 3.0 * weight(x1, x2) * z ** 2,
        fyy=lambda x1, x2, z: 6.0 * weight(x1, x2) * z,
        name="cubic_cosine",
    )


def benchmark_grid(h: float) -> Grid2D:
    return Grid2D(h, extent=EXTENT)


def _cosine_profile(grid: Grid2D):
    x1, x2 = grid.mesh()
    return np.cos(np.pi * x1) * np.cos(np.pi * x2), x1, x2


def manufactured_state(grid: Grid2D, d: float) -> np.ndarray:
    """Exact state -d cos(pi x1) cos(pi x2); Neumann-compatible on (0,2)^2."""
    profile, _, _ = _cosine_profile(grid)
    return -d * profile


def manufactured_control(grid: Grid2D, d: float) -> np.ndarray:
    """Control with -lap(y) + f(x, y) = u for the manufactured state."""
    profile, x1, x2 = _cosine_profile(grid)
    c = profile
    w = 5.0 * np.cos(np.pi * x1 * x2) ** 2
    return -2.0 * d * np.pi ** 2 * c - d * c - w * (d * c) ** 3


def target_state(grid: Grid2D, noise: float = 0.1, seed: int = 0) -> np.ndarray:
    """Tracking target 1.5 cos(pi x1) cos(pi x2) plus pointwise noise."""
    profile, _, _ = _cosine_profile(grid)
    g = 1.5 * profile
    if noise > 0:
        g = g + np.random.default_rng(seed).normal(0.0, noise, g.shape)
    return g


def benchmark_problem(h: float, alpha: float = 1e-3, noise: float = 0.1,
                      seed: int = 0, f=None) -> OcpProblem:
    grid = benchmark_grid(h)
    box = BoxConstraints(CONTROL_BOX[0], CONTROL_BOX[1])
    return OcpProblem(grid, f or benchmark_nonlinearity(),
                      target_state(grid, noise, seed), alpha, box)


def reaction_samples(spacing_or_name="medium", shape_coeffs=SHAPE_COEFFS,
                     fine_h: float = FINE_H) -> Dataset:
    """Training samples ((x1, x2, y), f) for the reaction-term surrogate.

    States are solved on the fine grid by Newton from the manufactured
    controls, the reaction values are recovered from the discrete equation
    f = u + lap_h(y_h), and both are restricted to the requested coarse
    spacing. The reaction targets therefore absorb the fine-grid consistency
    error, as measured data would.
    """
    spacing = DATA_SPACINGS.get(spacing_or_name, None)
    if spacing is None:
        spacing = float(spacing_or_name)
    fine = benchmark_grid(fine_h)
    f = benchmark_nonlinearity()
    inputs, targets = [], []
    for d in shape_coeffs:
        u = manufactured_control(fine, d)
        y, rep = solve_state(fine, f, u, y0=manufactured_state(fine, d))
        if not rep.converged:
            raise RuntimeError(f"fine-grid solve stalled for d={d}")
        fvals = u + laplacian_apply(fine, y)
        points, yv = restrict(y, fine, spacing)
        _, fv = restrict(fvals, fine, spacing)
        inputs.append(np.column_stack([points, yv]))
        targets.append(fv[:, None])
    return Dataset(np.concatenate(inputs), np.concatenate(targets))


def train_reaction_net(data: Dataset, hidden_sizes, seed: int,
                       opts: TrainOptions | None = None,
                       activation: str = "tansig"):
    """Fit a (x1, x2, y) -> f surrogate; returns (NetworkNonlinearity, report)."""
    in_scaler = MinMaxScaler.from_data(data.inputs)
    out_scaler = MinMaxScaler.from_data(data.targets)
    scaled = Dataset(in_scaler.scale(data.inputs), out_scaler.scale(data.targets))
    sizes = [3] + list(hidden_sizes) + [1]
    acts = [activation] * len(hidden_sizes)
    net0 = nguyen_widrow_init(sizes, acts, seed)
    net, report = train_lm_bayes(net0, split(scaled, seed + 1), opts)
    return NetworkNonlinearity(net, in_scaler, out_scaler, mode="xy"), report


def allen_cahn_nonlinearity(eta: float = ALLEN_CAHN_ETA) -> AllenCahnNonlinearity:
    return AllenCahnNonlinearity(eta)


def allen_cahn_grid(h: float = 2.0 ** -5) -> Grid2D:
    return Grid2D(h, extent=EXTENT)


def allen_cahn_target(grid: Grid2D, center=(1.0, 1.0), radius: float = 0.5) -> np.ndarray:
    """Polarized target: +1 inside the disc, -1 outside."""
    x1, x2 = grid.mesh()
    inside = (x1 - center[0]) ** 2 + (x2 - center[1]) ** 2 <= radius ** 2
    return np.where(inside, 1.0, -1.0)


def allen_cahn_problem(h: float = 2.0 ** -5, alpha: float = 1e-5,
                       eta: float = ALLEN_CAHN_ETA, bound: float = 50.0,
                       f=None) -> OcpProblem:
    grid = allen_cahn_grid(h)
    box = BoxConstraints(-bound, bound)
    return OcpProblem(grid, f or allen_cahn_nonlinearity(eta),
                      allen_cahn_target(grid), alpha, box)


def _cubic_state_pointwise(u: np.ndarray, eta: float) -> np.ndarray:
    """Real root of (y^3 - y)/eta = u per node, used as a Newton warm start."""
    roots = np.empty_like(u)
    flat_u = u.ravel()
    flat_r = roots.ravel()
    for i, ui in enumerate(flat_u):
        rs = np.roots([1.0, 0.0, -1.0, -eta * ui])
        real = rs[np.abs(rs.imag) < 1e-9].real
        # pick the stable branch: largest-magnitude root with the sign of u
        cand = real[np.sign(real) == np.sign(ui)] if ui != 0 else real
        if cand.size == 0:
            cand = real
        flat_r[i] = cand[np.argmax(np.abs(cand))]
    return roots


def allen_cahn_samples(h: float = 2.0 ** -5, amplitude: float = 1000.0,
                       eta: float = ALLEN_CAHN_ETA, stride: int = 2) -> Dataset:
    """Training pairs (y, f(y)) from the two polarized constant controls.

    Solves the state equation for u = +/-amplitude (warm-started from the
    pointwise cubic root), evaluates the exact reaction on every stride-th
    node, and pools both branches.
    """
    grid = allen_cahn_grid(h)
    f = AllenCahnNonlinearity(eta)
    ys = []
    for sgn in (1.0, -1.0):
        u = np.full(grid.shape, sgn * amplitude)
        y0 = _cubic_state_pointwise(u, eta)
        y, rep = solve_state(grid, f, u, y0=y0)
        if not rep.converged:
            raise RuntimeError("polarized state solve stalled")
        _, yv = restrict(y, grid, stride * h)
        ys.append(yv)
    y_all = np.concatenate(ys)[:, None]
    return Dataset(y_all, f.value(0.0, 0.0, y_all))


def train_allen_cahn_net(data: Dataset, hidden_sizes, seed: int,
                         opts: TrainOptions | None = None,
                         eta: float = ALLEN_CAHN_ETA):
    """Fit a y -> (y^3 - y)/eta surrogate; returns (NetworkNonlinearity, report)."""
    in_scaler = MinMaxScaler.from_data(data.inputs)
    out_scaler = MinMaxScaler.from_data(data.targets)
    scaled = Dataset(in_scaler.scale(data.inputs), out_scaler.scale(data.targets))
    sizes = [1] + list(hidden_sizes) + [1]
    acts = ["tansig"] * len(hidden_sizes)
    net0 = nguyen_widrow_init(sizes, acts, seed)
    net, report = train_lm_bayes(net0, split(scaled, seed + 1), opts)
    return NetworkNonlinearity(net, in_scaler, out_scaler, mode="y"), report


class LinearQuadraticFamily:
    """Linear-quadratic control family with exactly tunable surrogate error.

    The exact map is u -> A u with target 0 and prior control 0, so the exact
    minimizer is 0. Perturbed maps add eps * v to the output for a fixed unit
    vector v, which makes the state error exactly eps and the derivative
    error zero, and the perturbed minimizer has the closed form
    -(A^T A + alpha I)^{-1} A^T (eps v).
    """

    def __init__(self, dim: int = 12, alpha: float = 1e-3, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.a = rng.normal(0.0, 1.0, (dim, dim)) / np.sqrt(dim)
        v = rng.normal(0.0, 1.0, dim)
        self.v = v / np.linalg.norm(v)
        self.alpha = alpha
        self.dim = dim

    def exact_map(self):
        from .errbound import LinearStateOperator
        return LinearStateOperator(self.a)

    def surrogate_map(self, eps: float):
        from .errbound import LinearStateOperator
        return LinearStateOperator(self.a, shift=eps * self.v)

    def surrogate_minimizer(self, eps: float) -> np.ndarray:
        m = self.a.T @ self.a + self.alpha * np.eye(self.dim)
        return np.linalg.solve(m, -self.a.T @ (eps * self.v))

    def sweep(self, eps_values) -> list:
        """(eps, eta, control_error) triples for the rate harness."""
        rows = []
        for eps in eps_values:
            err = float(np.linalg.norm(self.surrogate_minimizer(eps)))
            rows.append((float(eps), 0.0, err))
        return rows
