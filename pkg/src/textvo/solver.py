"""Damped least-squares (Levenberg-Marquardt) with optional Huber reweighting.

One solver serves plane refinement, frame tracking, and bundle adjustment;
problems provide a residual/Jacobian callback and (for manifold variables)
a retraction.  Accepted-step cost is asserted monotone non-increasing.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverFailure, TextVOError

DAMPING_INIT = 1e-4
DAMPING_UP = 10.0
DAMPING_DOWN = 0.3
DAMPING_MAX = 1e12
REL_COST_TOL = 1e-8


@dataclass
class SolverReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    cost_history: list = field(default_factory=list)
    inlier_mask: np.ndarray = None


def huber_cost(r, delta):
    """Sum of Huber losses; quadratic within delta, linear beyond."""
    a = np.abs(r)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), a.shape)
    quad = a <= delta
    lin = ~quad
    return float((r[quad] ** 2).sum()
                 + (2 * delta[lin] * a[lin] - delta[lin] ** 2).sum())


def huber_weights(r, delta):
    """IRLS weights w such that w * r^2 matches the Huber influence."""
    a = np.abs(r)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), a.shape)
    w = np.ones_like(a)
    big = a > delta
    w[big] = delta[big] / a[big]
    return w


def robust_cost_and_weights(r, deltas):
    """(robust cost, IRLS weights) for residuals with per-entry Huber deltas.

    deltas may be None (pure least squares), a scalar, or an array matching r.
    """
    if deltas is None:
        return float(r @ r), np.ones_like(r)
    deltas = np.broadcast_to(np.asarray(deltas, dtype=float), r.shape)
    return huber_cost(r, deltas), huber_weights(r, deltas)


def _solve_normal_equations(J, r_w, lam):
    """Solve (J^T J + lam * diag(J^T J)) dx = -J^T r; dense or sparse."""
    if sp.issparse(J):
        JtJ = (J.T @ J).tocsc()
        g = J.T @ r_w
        d = JtJ.diagonal()
        A = JtJ + sp.diags(lam * np.maximum(d, 1e-12))
        try:
            dx = spla.spsolve(A, -g)
        except Exception as e:  # singular beyond damping
            raise SolverFailure(str(e)) from e
        if not np.all(np.isfinite(dx)):
            raise SolverFailure("non-finite solution of normal equations")
        return dx
    JtJ = J.T @ J
    g = J.T @ r_w
    d = np.diag(JtJ)
    A = JtJ + lam * np.diag(np.maximum(d, 1e-12))
    try:
        dx = np.linalg.solve(A, -g)
    except np.linalg.LinAlgError as e:
        raise SolverFailure(str(e)) from e
    if not np.all(np.isfinite(dx)):
        raise SolverFailure("non-finite solution of normal equations")
    return dx


def levenberg_marquardt(x0, residual_fn, retract_fn=None, deltas_fn=None,
                        max_iters=30, damping=DAMPING_INIT,
                        rel_tol=REL_COST_TOL):
    """Minimize the (optionally Huber-robustified) squared residual norm.

    residual_fn(x) -> (r, J): residual vector and dense or sparse Jacobian
    in the tangent space of x.  retract_fn(x, dx) applies an increment
    (default: addition).  deltas_fn(r) -> per-residual Huber deltas or None.

    Returns (x, SolverReport).  Raises SolverFailure when the normal
    equations stay singular past the damping ceiling.
    """
    if retract_fn is None:
        retract_fn = lambda x, dx: x + dx
    if deltas_fn is None:
        deltas_fn = lambda r: None

    x = x0
    r, J = residual_fn(x)
    cost, w = robust_cost_and_weights(r, deltas_fn(r))
    report = SolverReport(initial_cost=cost, cost_history=[cost])
    lam = damping

    for it in range(max_iters):
        sw = np.sqrt(w)
        r_w = sw * r
        J_w = (sp.diags(sw) @ J) if sp.issparse(J) else sw[:, None] * J

        accepted = False
        while lam <= DAMPING_MAX:
            dx = _solve_normal_equations(J_w, r_w, lam)
            x_new = retract_fn(x, dx)
            try:
                r_new, J_new = residual_fn(x_new)
                cost_new, w_new = robust_cost_and_weights(
                    r_new, deltas_fn(r_new))
            except TextVOError:
                # evaluation failed at the trial point: reject the step
                lam *= DAMPING_UP
                continue
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= DAMPING_UP
        report.iterations = it + 1
        if not accepted:
            # no downhill step at any damping: already at a (local) minimum
            report.converged = True
            break
        assert cost_new <= cost  # accepted steps never increase cost
        decrease = cost - cost_new
        x, r, J, cost, w = x_new, r_new, J_new, cost_new, w_new
        report.cost_history.append(cost)
        lam = max(lam * DAMPING_DOWN, 1e-12)
        if decrease <= rel_tol * max(cost, 1e-30):
            report.converged = True
            break

    report.final_cost = cost
    return x, report
