"""Dense Levenberg-Marquardt for sums of weighted residual blocks with
box bounds on the parameters.

Each block owns a residual and Jacobian evaluator over a subset of
the global parameter vector (``param_indices``); the solver scatters
block contributions into the full normal equations.  Bounds are enforced
by projecting every accepted step onto the box and zeroing gradient
components that push outward at active bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


@dataclass
class ResidualBlock:
    residual: callable            # params_sub -> (m,) residual vector
    jacobian: callable            # params_sub -> (m, k) dense Jacobian
    param_indices: np.ndarray     # (k,) indices into the global vector
    weight: float = 1.0           # lambda; sqrt(lambda) multiplies residuals
    name: str = ""

    def __post_init__(self):
        self.param_indices = np.asarray(self.param_indices, dtype=np.int64)
        if self.weight < 0:
            raise ValueError("block weight must be non-negative")


@dataclass
class BoundsSpec:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @staticmethod
    def unbounded(n: int) -> "BoundsSpec":
        return BoundsSpec(np.full(n, -np.inf), np.full(n, np.inf))


@dataclass
class SolveReport:
    costs: list = field(default_factory=list)   # accepted-step costs, incl. initial
    n_iterations: int = 0
    status: str = "running"
    x0_clamped: bool = False
    n_rejected: int = 0

    @property
    def converged(self) -> bool:
        return self.status in ("f_tol", "g_tol")


@dataclass
class SolverOptions:
    initial_damping: float = 1e-3
    f_tol: float = 1e-8
    g_tol: float = 1e-10
    max_iterations: int = 100


def _evaluate(blocks, x):
    """Total cost, gradient and Gauss-Newton Hessian of 0.5*sum w*||r||^2."""
    n = len(x)
    H = np.zeros((n, n))
    g = np.zeros(n)
    cost = 0.0
    for b in blocks:
        sub = x[b.param_indices]
        r = np.asarray(b.residual(sub), dtype=np.float64).ravel()
        if r.size == 0:
            continue
        J = np.asarray(b.jacobian(sub), dtype=np.float64).reshape(r.size, -1)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(J))):
            return None, None, None
        w = b.weight
        cost += w * float(r @ r)
        ix = b.param_indices
        g[ix] += w * (J.T @ r)
        H[np.ix_(ix, ix)] += w * (J.T @ J)
    return cost, g, H


def _cost_only(blocks, x):
    cost = 0.0
    for b in blocks:
        r = np.asarray(b.residual(x[b.param_indices]), dtype=np.float64).ravel()
        if not np.all(np.isfinite(r)):
            return None
        cost += b.weight * float(r @ r)
    return cost


def _projected_gradient(g, x, lo, hi, eps=1e-12):
    pg = g.copy()
    at_lo = x <= lo + eps
    at_hi = x >= hi - eps
    # at a lower bound, a positive gradient would step outward (decrease x)
    pg[at_lo & (pg > 0)] = 0.0
    pg[at_hi & (pg < 0)] = 0.0
    return pg


def minimize(blocks, x0, bounds=None, opts=None):
    """Minimize sum_b w_b ||r_b(x)||^2 subject to box bounds.

    Returns (x, SolveReport).  The accepted-cost sequence in the report is
    non-increasing; every iterate satisfies the bounds.
    """
    opts = opts or SolverOptions()
    x = np.asarray(x0, dtype=np.float64).copy()
    n = len(x)
    bounds = bounds or BoundsSpec.unbounded(n)
    lo, hi = bounds.lower, bounds.upper

    report = SolveReport()
    xc = np.clip(x, lo, hi)
    if not np.array_equal(xc, x):
        report.x0_clamped = True
        x = xc

    cost, g, H = _evaluate(blocks, x)
    if cost is None:
        raise ValueError("non-finite residual or Jacobian at the initial point")
    report.costs.append(cost)

    mu = opts.initial_damping
    nu = 2.0
    diag = np.maximum(np.diag(H), 1e-12)

    for it in range(opts.max_iterations):
        report.n_iterations = it + 1
        pg = _projected_gradient(g, x, lo, hi)
        if np.linalg.norm(pg, np.inf) < opts.g_tol:
            report.status = "g_tol"
            break

        A = H + mu * np.diag(diag)
        try:
            c, low = scipy.linalg.cho_factor(A, check_finite=False)
            step = scipy.linalg.cho_solve((c, low), -g, check_finite=False)
        except np.linalg.LinAlgError:
            mu *= nu
            nu *= 2
            report.n_rejected += 1
            continue

        x_new = np.clip(x + step, lo, hi)
        new_cost = _cost_only(blocks, x_new)
        actual = None if new_cost is None else cost - new_cost
        step_eff = x_new - x
        predicted = float(step_eff @ (mu * diag * step_eff - g))

        if actual is not None and actual > 0:
            x = x_new
            rel_drop = actual / max(cost, 1e-300)
            cost = new_cost
            report.costs.append(cost)
            rho = min(actual / max(predicted, 1e-300), 1e100)
            mu *= max(1.0 / 3.0, 1.0 - min((2.0 * rho - 1.0) ** 3, 1e300))
            mu = max(mu, 1e-15)
            nu = 2.0
            res = _evaluate(blocks, x)
            if res[0] is None:
                raise ValueError("non-finite residual at an accepted iterate")
            cost, g, H = res
            diag = np.maximum(np.diag(H), 1e-12)
            if rel_drop < opts.f_tol:
                report.status = "f_tol"
                break
        else:
            mu *= nu
            nu *= 2
            report.n_rejected += 1
            if mu > 1e16:
                report.status = "stalled"
                break
    else:
        report.status = "max_iterations"
    if report.status == "running":
        report.status = "max_iterations"

    return x, report
