"""Box-constrained elliptic optimal control solvers.

Two coupled strategies on the first-order system for
    min 1/2 ||y - g||^2 + alpha/2 ||u||^2   s.t.  -lap(y) + f(x,y) = u,
    lower <= u <= upper:
a semismooth Newton method on the full (y, p, u, lambda) system, and a
reduced SQP method whose quadratic subproblems are solved by primal-dual
active-set iterations with a matrix-free Gauss-Newton Hessian. A hybrid
driver runs the coupled Newton phase first and hands over to SQP once the
residual is moderate.

Multiplier convention: one signed field lambda with -p + lambda + alpha*u = 0,
so lambda >= 0 where the upper bound is active and lambda <= 0 where the
lower bound is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from .exceptions import DivergenceError, SolverError
from .grid import Grid2D, hminus1_norm, l2_norm, laplacian_apply, operator_matrix
from .pde import solve_state


class BoxConstraints:
    """Nodewise control bounds plus the complementarity scaling c."""

    def __init__(self, lower, upper, c: float | None = None):
        self.lower = lower
        self.upper = upper
        if c is not None and c <= 0:
            raise ValueError("c must be positive")
        self.c = c

    def bounds(self, grid: Grid2D):
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), grid.shape)
        up = np.broadcast_to(np.asarray(self.upper, dtype=float), grid.shape)
        if np.any(lo > up):
            raise ValueError("lower bound exceeds upper bound somewhere")
        return lo, up


class OcpProblem:
    """Grid, nonlinearity, tracking target, control weight, and box."""

    def __init__(self, grid: Grid2D, f, g: np.ndarray, alpha: float, box: BoxConstraints):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.grid = grid
        self.f = f
        self.g = grid.check_field(g)
        self.alpha = float(alpha)
        self.box = box

    @property
    def c(self) -> float:
        # the complementarity scaling defaults to alpha
        return self.box.c if self.box.c is not None else self.alpha


@dataclass
class KktPoint:
    y: np.ndarray
    u: np.ndarray
    p: np.ndarray
    lam: np.ndarray
    r1: np.ndarray | None = None
    r2: np.ndarray | None = None
    r3: np.ndarray | None = None
    r4: np.ndarray | None = None
    norms: tuple | None = None

    @property
    def total_residual(self) -> float:
        if self.norms is None:
            raise ValueError("residuals not computed; call kkt_residual first")
        return float(sum(self.norms))


def complementarity_residual(u, lam, lo, up, c):
    """lambda - max(0, lambda + c(u-up)) - min(0, lambda + c(u-lo))."""
    return (lam - np.maximum(0.0, lam + c * (u - up))
            - np.minimum(0.0, lam + c * (u - lo)))


def active_indicators(u, lam, lo, up, c):
    """Boolean fields (upper active, lower active) from the Newton derivative
    of the complementarity residual."""
    return lam + c * (u - up) > 0.0, lam + c * (u - lo) < 0.0


def inactive_indicator(u, lam, lo, up, c):
    """1 where c(lo-u) <= lambda <= c(up-u), else 0."""
    act_up, act_lo = active_indicators(u, lam, lo, up, c)
    return ~(act_up | act_lo)


def kkt_residual(phi: KktPoint, prob: OcpProblem) -> KktPoint:
    """Fill the four residual fields and their (dual, dual, L2, L2) norms."""
    grid = prob.grid
    x1, x2 = grid.mesh()
    y, u, p, lam = (grid.check_field(z) for z in (phi.y, phi.u, phi.p, phi.lam))
    lo, up = prob.box.bounds(grid)
    a = prob.f.deriv_y(x1, x2, y)
    r1 = -laplacian_apply(grid, y) + prob.f.value(x1, x2, y) - u
    r2 = -laplacian_apply(grid, p) + a * p + y - prob.g
    r3 = -p + lam + prob.alpha * u
    r4 = complementarity_residual(u, lam, lo, up, prob.c)
    n = (hminus1_norm(grid, r1), hminus1_norm(grid, r2),
         l2_norm(grid, r3), l2_norm(grid, r4))
    return KktPoint(y, u, p, lam, r1, r2, r3, r4, n)


def ssn_step(phi: KktPoint, prob: OcpProblem) -> KktPoint:
    """One semismooth Newton step on the coupled system.

    Uses the simplified linearization that drops the second y-derivative of
    the nonlinearity in the adjoint row. The multiplier increment is
    eliminated through the complementarity row: on active nodes the control
    update is forced onto the bound, on inactive nodes the multiplier is
    driven to zero. Returns the new point with residuals recomputed.
    """
    if phi.norms is None:
        phi = kkt_residual(phi, prob)
    grid = prob.grid
    n = grid.num_nodes
    x1, x2 = grid.mesh()
    lo, up = prob.box.bounds(grid)
    c = prob.c
    a = prob.f.deriv_y(x1, x2, phi.y)

    act_up, act_lo = active_indicators(phi.u, phi.lam, lo, up, c)
    active = (act_up | act_lo).ravel()
    inactive = ~active

    k_op = operator_matrix(grid, a)
    eye = sp.identity(n, format="csr")
    d_inact = sp.diags(inactive.astype(float))
    d_row3 = sp.diags(np.where(active, c, prob.alpha))
    system = sp.bmat([[k_op, None, -eye],
                      [eye, k_op, None],
                      [None, -d_inact, d_row3]], format="csc")
    r3f, r4f = phi.r3.ravel(), phi.r4.ravel()
    rhs = np.concatenate([-phi.r1.ravel(), -phi.r2.ravel(),
                          np.where(inactive, -r3f + r4f, r4f)])
    try:
        delta = splu(system).solve(rhs)
    except RuntimeError as err:
        raise SolverError(f"semismooth step: singular linearized system: {err}") from err
    if not np.all(np.isfinite(delta)):
        raise DivergenceError("semismooth step produced non-finite increments")
    dy, dp, du = (delta[i * n:(i + 1) * n] for i in range(3))
    dlam = np.where(inactive, -r4f, -r3f + dp - prob.alpha * du)
    new = KktPoint(phi.y + dy.reshape(grid.shape), phi.u + du.reshape(grid.shape),
                   phi.p + dp.reshape(grid.shape), phi.lam + dlam.reshape(grid.shape))
    return kkt_residual(new, prob)


def _inner(grid: Grid2D, a, b) -> float:
    return grid.h ** 2 * float(np.dot(np.ravel(a), np.ravel(b)))


def reduced_gradient(u: np.ndarray, prob: OcpProblem, y0=None,
                     tol: float = 1e-16, max_iter: int = 15):
    """Gradient alpha*u - p of the reduced objective, plus state and adjoint."""
    grid = prob.grid
    x1, x2 = grid.mesh()
    y, _ = solve_state(grid, prob.f, u, y0=y0, tol=tol, max_iter=max_iter)
    a = prob.f.deriv_y(x1, x2, y)
    lu = splu(operator_matrix(grid, a).tocsc())
    p = lu.solve((prob.g - y).ravel()).reshape(grid.shape)
    return prob.alpha * u - p, y, p


class ReducedHessian:
    """Matrix-free Gauss-Newton Hessian: v -> S(S v) + alpha v.

    S is one linearized-state solve with the frozen coefficient a; the
    operator is symmetric positive definite for alpha > 0.
    """

    def __init__(self, grid: Grid2D, a, alpha: float):
        self.grid = grid
        self.alpha = float(alpha)
        try:
            self._lu = splu(operator_matrix(grid, a).tocsc())
        except RuntimeError as err:
            raise SolverError(f"singular linearized state operator: {err}") from err

    def __call__(self, v: np.ndarray) -> np.ndarray:
        flat = np.ravel(v)
        w = self._lu.solve(self._lu.solve(flat))
        return (w + self.alpha * flat).reshape(np.shape(v))


def _cg_solve(op, b, rtol, maxiter):
    try:
        x, info = cg(op, b, rtol=rtol, atol=0.0, maxiter=maxiter)
    except TypeError:  # older scipy spells the relative tolerance 'tol'
        x, info = cg(op, b, tol=rtol, atol=0.0, maxiter=maxiter)
    if info != 0:
        raise SolverError(f"conjugate gradient did not converge (info={info})")
    return x


def solve_qp_pdas(grid: Grid2D, grad: np.ndarray, hess_apply, box: BoxConstraints,
                  u_k: np.ndarray, c: float, inner_tol: float = 1e-10,
                  max_iter: int = 50, cg_tol: float = 1e-10, warm=None):
    """Primal-dual active-set solve of the box-constrained quadratic model
        min_d 1/2 <H d, d> + <grad, d>   s.t.  lo <= u_k + d <= up.

    Returns (delta, lam, n_active, iterations). Exits when two consecutive
    active-set estimates coincide or the nonsmooth residual drops below
    inner_tol; the output is feasible to machine precision and satisfies
    grad + H delta + lam = 0 with lam signed by the active side. The
    active-set map can cycle on a few indices for general positive definite
    Hessians; a revisited set signature ends the iteration with the best
    iterate seen, and the caller's acceptance test judges that direction.
    """
    lo, up = box.bounds(grid)
    shape = grid.shape
    nflat = grid.num_nodes
    if warm is None:
        delta = np.zeros(shape)
        lam = np.zeros(shape)
    else:
        delta, lam = (np.array(w, dtype=float) for w in warm)
    prev_sets = None
    seen = set()
    best = None
    resid_first = None
    for it in range(1, max_iter + 1):
        v = u_k + delta
        act_up, act_lo = active_indicators(v, lam, lo, up, c)
        sets = (act_up.ravel(), act_lo.ravel())
        delta = np.where(act_up, up - u_k, delta)
        delta = np.where(act_lo, lo - u_k, delta)
        inact = ~(act_up | act_lo)
        mask = inact.ravel()
        if np.any(mask):
            fixed = np.where(inact, 0.0, delta)
            rhs = -(grad + hess_apply(fixed))[inact]

            def matvec(x):
                z = np.zeros(nflat)
                z[mask] = x
                return hess_apply(z.reshape(shape)).ravel()[mask]

            op = LinearOperator((int(mask.sum()),) * 2, matvec=matvec)
            sol = _cg_solve(op, rhs, cg_tol, maxiter=2 * nflat)
            delta = fixed
            delta[inact] = sol
        hd = hess_apply(delta)
        lam = np.where(inact, 0.0, -(grad + hd))
        v = u_k + delta
        stat = grad + hd + lam
        comp = complementarity_residual(v, lam, lo, up, c)
        resid = l2_norm(grid, stat) + l2_norm(grid, comp)
        if resid_first is None:
            resid_first = resid
        if best is None or resid < best[0]:
            best = (resid, delta.copy(), lam.copy(),
                    int(np.count_nonzero(~inact)), it)
        same = prev_sets is not None and all(
            np.array_equal(a, b) for a, b in zip(sets, prev_sets))
        if same or resid <= inner_tol:
            return delta, lam, int(np.count_nonzero(~inact)), it
        signature = (sets[0].tobytes(), sets[1].tobytes())
        if signature in seen:
            return best[1], best[2], best[3], best[4]
        seen.add(signature)
        prev_sets = sets
    if best is not None and best[0] <= 0.1 * resid_first:
        return best[1], best[2], best[3], best[4]
    err = SolverError(f"active-set iteration did not settle in {max_iter} steps")
    err.delta, err.lam = delta, lam
    raise err


def constraint_violation(grid: Grid2D, u: np.ndarray, lo, up) -> float:
    """Psi(u) = ||(u-up)+||_0 + ||(u-lo)-||_0."""
    return (l2_norm(grid, np.maximum(u - up, 0.0))
            + l2_norm(grid, np.maximum(lo - u, 0.0)))


def sqp_inner_stop(grid: Grid2D, delta, lam, grad, hess_apply,
                   psi0: float, psi1: float, beta: float, xi: float) -> bool:
    """Accept the QP direction when both displayed inequalities hold:
    <grad, d> + beta (Psi1 - Psi0) <= -xi <H d, d>  and  Psi1 <= (1-xi) Psi0.
    The degenerate d = 0 at a feasible stationary point accepts."""
    hd = hess_apply(delta)
    lhs = _inner(grid, grad, delta) + beta * (psi1 - psi0)
    return lhs <= -xi * _inner(grid, hd, delta) and psi1 <= (1.0 - xi) * psi0


def reduced_objective(u: np.ndarray, prob: OcpProblem, y0=None,
                      tol: float = 1e-16, max_iter: int = 15):
    """J(u) = 1/2 ||state - g||_0^2 + alpha/2 ||u||_0^2, plus the state."""
    y, _ = solve_state(prob.grid, prob.f, u, y0=y0, tol=tol, max_iter=max_iter)
    j = 0.5 * l2_norm(prob.grid, y - prob.g) ** 2 + 0.5 * prob.alpha * l2_norm(prob.grid, u) ** 2
    return j, y


def merit_value(u: np.ndarray, mu: float, delta: np.ndarray, prob: OcpProblem,
                beta: float, y0=None, tol: float = 1e-16, max_iter: int = 15) -> float:
    """Phi(mu) = J(u + mu*delta) + beta * Psi(u + mu*delta)."""
    lo, up = prob.box.bounds(prob.grid)
    trial = u + mu * delta
    j, _ = reduced_objective(trial, prob, y0=y0, tol=tol, max_iter=max_iter)
    return j + beta * constraint_violation(prob.grid, trial, lo, up)


def armijo_search(prob: OcpProblem, u: np.ndarray, delta: np.ndarray, beta: float,
                  dir_deriv: float, params: "SolverParams", phi0: float, y_warm=None):
    """Backtracking from mu=1 by the ratio r until
    Phi(mu) - Phi(0) <= kappa * mu * dir_deriv; fails below the step floor.

    Returns (mu, status, u_new, y_new, phi_new); on 'floor' the last three
    are None. Trial states that fail to solve reject the trial step.
    """
    lo, up = prob.box.bounds(prob.grid)
    mu = params.mu0
    y_trial = y_warm
    while mu >= params.step_floor:
        trial = np.clip(u + mu * delta, lo, up)
        try:
            j, y_new = reduced_objective(trial, prob, y0=y_trial,
                                         tol=params.state_tol,
                                         max_iter=params.state_max_iter)
            phi_mu = j + beta * constraint_violation(prob.grid, trial, lo, up)
        except (SolverError, DivergenceError):
            phi_mu = np.inf
            y_new = None
        if np.isfinite(phi_mu) and phi_mu - phi0 <= params.kappa * mu * dir_deriv:
            return mu, "ok", trial, y_new, phi_mu
        mu *= params.backtrack
    return mu, "floor", None, None, None


@dataclass
class SolverParams:
    mu0: float = 1.0
    step_floor: float = 1e-5
    backtrack: float = 2.0 / 3.0
    kappa: float = 1e-3
    zeta: float = 2.0
    xi: float = 0.9
    beta0: float | None = None
    switch_threshold: float = 5.0
    tol: float = 1e-10
    max_outer: int = 30
    inner_tol: float = 1e-10
    max_pdas: int = 50
    cg_tol: float = 1e-10
    state_tol: float = 1e-16
    state_max_iter: int = 15

    def __post_init__(self):
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack ratio must lie in (0,1)")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0,1)")
        if self.zeta <= 1.0:
            raise ValueError("zeta must exceed 1")
        if not 0.0 < self.xi < 1.0:
            raise ValueError("xi must lie in (0,1)")


@dataclass
class HistoryRow:
    iteration: int
    merit: float
    residual: float
    step_length: float
    active_set_size: int


class History:
    """Per-iteration trace with a terminal status code."""

    def __init__(self):
        self.rows: list[HistoryRow] = []
        self.status = ""

    def append(self, *args):
        self.rows.append(HistoryRow(*args))

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)


def write_history(path, history) -> None:
    rows = history.rows if isinstance(history, History) else list(history)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("iteration,merit,residual,step_length,active_set_size\n")
        for r in rows:
            fh.write(f"{r.iteration},{r.merit:.17g},{r.residual:.17g},"
                     f"{r.step_length:.17g},{r.active_set_size}\n")


def _point_at(u, prob, params, y_warm=None) -> KktPoint:
    grad, y, p = reduced_gradient(u, prob, y0=y_warm,
                                  tol=params.state_tol, max_iter=params.state_max_iter)
    lam = p - prob.alpha * u
    return kkt_residual(KktPoint(y, u, p, lam), prob)


def solve_sqp(prob: OcpProblem, u0: np.ndarray, params: SolverParams | None = None,
              history: History | None = None, iter_offset: int = 0,
              y0: np.ndarray | None = None):
    """Reduced SQP with active-set quadratic subproblems and a merit search.

    Each outer iteration solves the Gauss-Newton QP at u_k, enforces the
    penalty growth rule beta_k = max(beta_{k-1}, zeta*||lam||), checks the
    inner acceptance inequalities, and line-searches the exact-penalty merit
    function. Terminates on the summed KKT residual, the iteration cap, the
    step floor, or a stationary zero direction.
    """
    params = params or SolverParams()
    grid = prob.grid
    lo, up = prob.box.bounds(grid)
    u = np.clip(grid.check_field(u0), lo, up)
    hist = history if history is not None else History()
    c = prob.c
    beta = params.beta0
    y = y0
    warm_qp = None
    mu_last, act_last = 0.0, 0
    point = None

    for k in range(iter_offset, params.max_outer):
        try:
            grad, y, p = reduced_gradient(u, prob, y0=y, tol=params.state_tol,
                                          max_iter=params.state_max_iter)
        except (SolverError, DivergenceError) as err:
            hist.status = f"state_failure: {err}"
            if point is None:
                raise
            return point, hist
        lam = p - prob.alpha * u
        point = kkt_residual(KktPoint(y, u, p, lam), prob)
        if beta is None:
            beta = l2_norm(grid, lam) + 1.0
        psi0 = constraint_violation(grid, u, lo, up)
        j0 = 0.5 * l2_norm(grid, y - prob.g) ** 2 + 0.5 * prob.alpha * l2_norm(grid, u) ** 2
        phi0 = j0 + beta * psi0
        resid = point.total_residual
        hist.append(k, phi0, resid, mu_last, act_last)
        if resid <= params.tol:
            hist.status = "converged"
            return point, hist

        x1, x2 = grid.mesh()
        hess = ReducedHessian(grid, prob.f.deriv_y(x1, x2, y), prob.alpha)
        accepted = False
        inner_tol = params.inner_tol
        for _ in range(3):
            try:
                delta, lam_qp, act_last, _ = solve_qp_pdas(
                    grid, grad, hess, prob.box, u, c, inner_tol=inner_tol,
                    max_iter=params.max_pdas, cg_tol=params.cg_tol, warm=warm_qp)
            except SolverError as err:
                hist.status = f"inner_failure: {err}"
                return point, hist
            beta = max(beta, params.zeta * l2_norm(grid, lam_qp))
            psi1 = constraint_violation(grid, u + delta, lo, up)
            if sqp_inner_stop(grid, delta, lam_qp, grad, hess, psi0, psi1, beta, params.xi):
                accepted = True
                break
            inner_tol *= 1e-2
        if not accepted:
            hist.status = "inner_failure: acceptance inequalities not met"
            return point, hist
        warm_qp = (delta, lam_qp)

        if l2_norm(grid, delta) == 0.0:
            hist.status = "stationary"
            return point, hist
        dir_deriv = _inner(grid, grad, delta) + beta * (psi1 - psi0)
        mu_last, ls_status, u_new, y_new, _ = armijo_search(
            prob, u, delta, beta, dir_deriv, params, phi0, y_warm=y)
        if ls_status == "floor":
            hist.status = "step_floor"
            return point, hist
        u, y = u_new, y_new

    point = _point_at(u, prob, params, y_warm=y)
    hist.append(params.max_outer, 0.0, point.total_residual, mu_last, act_last)
    hist.status = "converged" if point.total_residual <= params.tol else "max_iter"
    return point, hist


def solve_hybrid(prob: OcpProblem, params: SolverParams | None = None,
                 phi0: KktPoint | None = None):
    """Coupled-Newton phase from zero, then SQP once the residual is moderate.

    switch_threshold = 0 never leaves the Newton phase; an infinite threshold
    skips it entirely. Iterations are counted jointly against max_outer.
    """
    params = params or SolverParams()
    grid = prob.grid
    hist = History()
    if phi0 is None:
        z = grid.zeros()
        phi = KktPoint(z, z.copy(), z.copy(), z.copy())
    else:
        phi = phi0
    phi = kkt_residual(phi, prob)
    lo, up = prob.box.bounds(grid)
    k = 0

    def merit_of(point):
        return (0.5 * l2_norm(grid, point.y - prob.g) ** 2
                + 0.5 * prob.alpha * l2_norm(grid, point.u) ** 2)

    if not math.isinf(params.switch_threshold):
        while k < params.max_outer:
            act_up, act_lo = active_indicators(phi.u, phi.lam, lo, up, prob.c)
            hist.append(k, merit_of(phi), phi.total_residual, 1.0,
                        int(np.count_nonzero(act_up | act_lo)))
            if phi.total_residual <= params.tol:
                hist.status = "converged"
                return phi, hist
            try:
                phi = ssn_step(phi, prob)
            except (SolverError, DivergenceError) as err:
                hist.status = f"ssn_failure: {err}"
                return phi, hist
            k += 1
            if phi.total_residual < params.switch_threshold:
                break
        if k >= params.max_outer:
            act_up, act_lo = active_indicators(phi.u, phi.lam, lo, up, prob.c)
            hist.append(k, merit_of(phi), phi.total_residual, 1.0,
                        int(np.count_nonzero(act_up | act_lo)))
            hist.status = ("converged" if phi.total_residual <= params.tol
                           else "max_iter")
            return phi, hist

    u_start = np.clip(phi.u, lo, up)
    return solve_sqp(prob, u_start, params, history=hist, iter_offset=k,
                     y0=phi.y)
