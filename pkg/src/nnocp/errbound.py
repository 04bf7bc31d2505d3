"""Empirical error budgets for surrogate state operators and rate checks.

Measures the surrogate levels (state gap, derivative gap, Lipschitz
estimates) on sampled controls, and fits the control-error-versus-level
relation: a log-log slope plus per-point bound checks against
sqrt(3/alpha) * eps in the perfect-matching regime and the general
sqrt(3/(alpha - L1*res)) * sqrt(eps^2 + 2 res^2) form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import splu

from .grid import Grid2D, l2_norm, operator_matrix
from .pde import solve_state


@dataclass
class ErrorBudget:
    eps_n: float
    eta_n: float
    L0: float
    L1: float
    alpha: float = np.nan
    residual_norm: float | None = None

    def __post_init__(self):
        for name in ("eps_n", "eta_n", "L0", "L1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.residual_norm is not None and self.residual_norm < 0:
            raise ValueError("residual_norm must be nonnegative")


class LinearStateOperator:
    """Q(u) = A u + shift, with constant derivative A."""

    def __init__(self, a: np.ndarray, shift=None):
        self.a = np.asarray(a, dtype=float)
        self.shift = None if shift is None else np.asarray(shift, dtype=float)

    def apply(self, u):
        out = self.a @ np.ravel(u)
        return out if self.shift is None else out + self.shift

    def deriv(self, u, v):
        return self.a @ np.ravel(v)


class PdeStateOperator:
    """Control-to-state map of the semilinear problem with its linearization."""

    def __init__(self, grid: Grid2D, f, tol: float = 1e-12, max_iter: int = 30):
        self.grid = grid
        self.f = f
        self.tol = tol
        self.max_iter = max_iter
        self._cache_key = None
        self._cache_state = None

    def _state(self, u):
        key = np.asarray(u).tobytes()
        if key != self._cache_key:
            y, _ = solve_state(self.grid, self.f, u, tol=self.tol,
                               max_iter=self.max_iter)
            self._cache_key, self._cache_state = key, y
        return self._cache_state

    def apply(self, u):
        return self._state(u)

    def deriv(self, u, v):
        y = self._state(u)
        x1, x2 = self.grid.mesh()
        a = self.f.deriv_y(x1, x2, y)
        lu = splu(operator_matrix(self.grid, a).tocsc())
        return lu.solve(np.ravel(np.asarray(v, dtype=float))).reshape(self.grid.shape)


def estimate_budget(q_exact, q_surrogate, controls, probes,
                    norm_h=None, norm_u=None, g=None, u_ref=None,
                    alpha: float = np.nan) -> ErrorBudget:
    """Sampled surrogate levels over a control family.

    eps_n is the worst state gap, eta_n the worst directional-derivative gap
    over unit probes; L0 and L1 are difference-quotient estimates taken over
    both operators (the theory assumes one family-wide constant). When g and
    u_ref are given, the residual norm ||Q(u_ref) - g|| is recorded too.
    """
    norm_h = norm_h or (lambda z: float(np.linalg.norm(np.ravel(z))))
    norm_u = norm_u or (lambda z: float(np.linalg.norm(np.ravel(z))))
    controls = list(controls)
    if not controls:
        raise ValueError("need at least one control sample")
    unit_probes = []
    for v in probes:
        nv = norm_u(v)
        if nv <= 0:
            raise ValueError("probe directions must be nonzero")
        unit_probes.append(np.asarray(v, dtype=float) / nv)

    eps_n = eta_n = l0 = l1 = 0.0
    derivs = []
    for u in controls:
        eps_n = max(eps_n, norm_h(q_exact.apply(u) - q_surrogate.apply(u)))
        per_probe = []
        for v in unit_probes:
            de = q_exact.deriv(u, v)
            ds = q_surrogate.deriv(u, v)
            eta_n = max(eta_n, norm_h(de - ds))
            l0 = max(l0, norm_h(de), norm_h(ds))
            per_probe.append((de, ds))
        derivs.append(per_probe)
    for i in range(len(controls) - 1):
        dist = norm_u(np.asarray(controls[i + 1]) - np.asarray(controls[i]))
        if dist <= 0:
            continue
        for (de_a, ds_a), (de_b, ds_b) in zip(derivs[i], derivs[i + 1]):
            l1 = max(l1, norm_h(de_b - de_a) / dist, norm_h(ds_b - ds_a) / dist)

    residual = None
    if g is not None and u_ref is not None:
        residual = norm_h(q_exact.apply(u_ref) - g)
    return ErrorBudget(eps_n, eta_n, l0, l1, alpha=alpha, residual_norm=residual)


@dataclass
class RateRow:
    eps: float
    eta: float
    error: float
    bound: float
    ok: bool


@dataclass
class RateReport:
    slope: float
    intercept: float
    alpha: float
    mode: str
    margin: float
    rows: list[RateRow] = field(default_factory=list)
    hypothesis_ok: bool | None = None

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)


def verify_rate(pairs, alpha: float, mode: str = "perfect",
                budget: ErrorBudget | None = None, margin: float = 0.5) -> RateReport:
    """Log-log slope of control error vs surrogate level, with bound checks.

    pairs: iterables (eps, error) or (eps, eta, error). Requires at least three
    points spanning a decade in eps. mode 'perfect' checks
    error <= eps*sqrt(3/alpha)*(1+margin); mode 'general' uses the budget's
    L1 and residual norm for sqrt(3/(alpha-L1*res))*sqrt(eps^2+2 res^2) and
    records whether the hypothesis L1*res < alpha holds.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if mode not in ("perfect", "general"):
        raise ValueError("mode must be 'perfect' or 'general'")
    rows_in = []
    for entry in pairs:
        entry = tuple(float(x) for x in entry)
        if len(entry) == 2:
            rows_in.append((entry[0], 0.0, entry[1]))
        elif len(entry) == 3:
            rows_in.append(entry)
        else:
            raise ValueError("pairs must be (eps, error) or (eps, eta, error)")
    if len(rows_in) < 3:
        raise ValueError("need at least three (eps, error) pairs")
    eps = np.array([r[0] for r in rows_in])
    pos = eps[eps > 0]
    if pos.size < 2 or pos.max() / pos.min() < 10.0:
        raise ValueError("eps values must span at least one decade")

    hypothesis_ok = None
    if mode == "general":
        if budget is None or budget.residual_norm is None:
            raise ValueError("general mode needs a budget with a residual norm")
        hypothesis_ok = bool(budget.L1 * budget.residual_norm < alpha)

    rows = []
    for e, eta, err in rows_in:
        if mode == "perfect":
            bound = e * np.sqrt(3.0 / alpha)
        else:
            res = budget.residual_norm
            denom = alpha - budget.L1 * res
            bound = (np.sqrt(3.0 / denom) * np.sqrt(e * e + 2.0 * res * res)
                     if denom > 0 else np.inf)
        ok = err <= bound * (1.0 + margin) if np.isfinite(bound) else True
        rows.append(RateRow(e, eta, err, float(bound), bool(ok)))

    fit_pts = [(np.log(r.eps), np.log(r.error)) for r in rows if r.eps > 0 and r.error > 0]
    if len(fit_pts) >= 2:
        lx = np.array([p[0] for p in fit_pts])
        ly = np.array([p[1] for p in fit_pts])
        slope, intercept = np.polyfit(lx, ly, 1)
    else:
        slope, intercept = np.nan, np.nan
    return RateReport(float(slope), float(intercept), alpha, mode, margin,
                      rows, hypothesis_ok)


def write_error_report(path, report: RateReport) -> None:
    """CSV rows: eps_n, eta_n, control error, bound value, pass/fail."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("eps_n,eta_n,control_error,bound_value,status\n")
        for r in report.rows:
            status = "pass" if r.ok else "fail"
            fh.write(f"{r.eps:.17g},{r.eta:.17g},{r.error:.17g},"
                     f"{r.bound:.17g},{status}\n")
