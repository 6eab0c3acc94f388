"""
Newton iteration with forward-difference Jacobians.

Shared by the full-state Constrained Runs solver and the coefficient solver.
Jacobians are rebuilt from scratch every iteration; columns are evaluated in
index order so the result is bit-reproducible.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from errors import ConvergenceError

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 50
MAX_HALVINGS = 8
RELATIVE_STEP = 1e-7


@dataclass
class NewtonReport:
    iterations: int = 0
    residual: float = float('inf')
    converged: bool = False
    cond: float = float('nan')
    unknowns: int = 0

    def as_row(self):
        return {
            'iters': self.iterations,
            'residual': self.residual,
            'converged': self.converged,
            'cond': self.cond,
        }


def forward_difference_jacobian(fun: Callable[[np.ndarray], np.ndarray],
                                x: np.ndarray, fx: np.ndarray) -> np.ndarray:
    """Column j is (fun(x + h_j e_j) - fun(x)) / h_j with h_j = 1e-7 * (1 + |x_j|)"""
    jacobian = np.empty((fx.size, x.size))
    for j in range(x.size):
        step = RELATIVE_STEP * (1.0 + abs(x[j]))
        shifted = x.copy()
        shifted[j] += step
        # Recompute the actual step to cancel rounding in x + h
        step = shifted[j] - x[j]
        jacobian[:, j] = (fun(shifted) - fx) / step
    return jacobian


def _is_converged(norm, x, tol_abs, tol_rel):
    return norm <= max(tol_abs, tol_rel * max(1.0, float(np.max(np.abs(x), initial=0.0))))


def newton_solve(residual: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                 tol_abs: float = 1e-12, tol_rel: float = 0.0,
                 max_iter: int = MAX_ITERATIONS, max_halvings: int = MAX_HALVINGS,
                 cond: Optional[float] = None, label: str = 'newton') -> Tuple[np.ndarray, NewtonReport]:
    """
    Solve residual(x) = 0 starting from x0.

    The full Newton step is taken unless it increases the residual infinity
    norm, in which case it is halved up to ``max_halvings`` times. Raises
    ConvergenceError carrying the report when ``max_iter`` is exhausted.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    norm = float(np.max(np.abs(r)))
    report = NewtonReport(residual=norm, unknowns=x.size, cond=cond if cond is not None else float('nan'))

    while not _is_converged(norm, x, tol_abs, tol_rel):
        if report.iterations >= max_iter:
            report.residual = norm
            logger.warning("%s: no convergence after %d iterations, residual=%.3e",
                           label, report.iterations, norm)
            raise ConvergenceError(
                f"{label} did not converge in {max_iter} iterations (residual {norm:.3e})", report)

        jacobian = forward_difference_jacobian(residual, x, r)
        if cond is None:
            report.cond = float(np.linalg.cond(jacobian))
        try:
            step = np.linalg.solve(jacobian, -r)
        except np.linalg.LinAlgError as exc:
            report.residual = norm
            raise ConvergenceError(f"{label}: singular Jacobian ({exc})", report) from exc

        scale = 1.0
        candidate = x + step
        r_candidate = residual(candidate)
        norm_candidate = float(np.max(np.abs(r_candidate)))
        halvings = 0
        while norm_candidate > norm and halvings < max_halvings:
            scale *= 0.5
            halvings += 1
            candidate = x + scale * step
            r_candidate = residual(candidate)
            norm_candidate = float(np.max(np.abs(r_candidate)))

        x, r, norm = candidate, r_candidate, norm_candidate
        report.iterations += 1
        logger.debug("%s iteration %d: residual=%.3e, step scale=%g, cond=%.3e",
                     label, report.iterations, norm, scale, report.cond)

    report.residual = norm
    report.converged = True
    logger.info("%s converged in %d iteration(s), residual=%.3e",
                label, report.iterations, norm)
    return x, report
