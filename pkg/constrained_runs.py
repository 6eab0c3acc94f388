"""
Constrained Runs: backward extrapolation in time plus a reset of the
conserved moments.

One sweep runs m+1 BGK steps from f^0, extrapolates back to step 0 with the
formula that makes the (m+1)-th forward difference vanish, and then puts the
conserved moments of f^0 back:

    f^next = f^prev + P (f^0 - f^prev)

P is M^-1 M^0 for D1Q3. D2Q5 has no square moment matrix; there P adds the
equilibrium increment of the conserved-moment difference, which replaces the
conserved content and leaves the rest alone because the equilibrium is
linear in (rho, rho*u).
"""

import logging
from dataclasses import dataclass
from math import comb
from typing import Optional, Tuple

import numpy as np

from errors import ConvergenceError, StructuralError, UnsupportedOperationError
from lattice import (
    DistributionField,
    MacroFields,
    distributions_from_moments,
    inverse_moment_matrix,
    moment_matrix,
    moments_from_distributions,
)
from lbm import EquilibriumModel, EquilibriumVariant, equilibrium, run_steps
from newton import NewtonReport, newton_solve

logger = logging.getLogger(__name__)

MAX_SMOOTHNESS_ORDER = 6
MAX_FULL_STATE_UNKNOWNS = 20000
DIVERGENCE_WINDOW = 10


@dataclass(frozen=True)
class SmoothnessOrder:
    """Number m of vanishing time derivatives beyond the first: d^(m+1)/dt^(m+1) = 0"""
    m: int

    def __post_init__(self):
        if int(self.m) != self.m or not 0 <= self.m <= MAX_SMOOTHNESS_ORDER:
            raise StructuralError(f"Smoothness order must be in 0..{MAX_SMOOTHNESS_ORDER}, got {self.m}")

    @classmethod
    def coerce(cls, m) -> 'SmoothnessOrder':
        return m if isinstance(m, cls) else cls(int(m))

    def weights(self) -> np.ndarray:
        """Coefficients of f^1 .. f^(m+1) in the extrapolated f^prev"""
        k = self.m + 1
        return np.array([(-1) ** (j + 1) * comb(k, j) for j in range(1, k + 1)], dtype=float)


class ConservedProjector:
    """Population-space projector onto the model's conserved-moment content"""

    def __init__(self, model: EquilibriumModel, matrix: np.ndarray):
        self.model = model
        self.matrix = matrix

    @classmethod
    def for_model(cls, model: EquilibriumModel) -> 'ConservedProjector':
        spec = model.spec
        if spec.name == 'D1Q3':
            conserved_rows = 2 if model.conserves_momentum else 1
            mask = np.zeros((3, 3))
            mask[:conserved_rows, :conserved_rows] = np.eye(conserved_rows)
            # M^0 keeps the conserved rows of M and zeros the rest
            return cls(model, inverse_moment_matrix(spec) @ mask @ moment_matrix(spec))

        # Conserved moments (rho, rho*u_x, rho*u_y) and their equilibrium response
        velocities = spec.velocities
        moments = np.vstack([np.ones(spec.q), spec.c * velocities.T])
        response = np.hstack([np.full((spec.q, 1), 1.0 / spec.q), velocities / (2.0 * spec.c)])
        return cls(model, response @ moments)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.matrix, values, axes=1)


def backward_extrapolation(traj, m) -> DistributionField:
    """f^prev = sum_j (-1)^(j+1) C(m+1, j) f^j over snapshots 1 .. m+1"""
    order = SmoothnessOrder.coerce(m)
    needed = order.m + 1
    if traj.steps < needed:
        raise StructuralError(
            f"Order {order.m} extrapolation needs {needed} steps after the initial state, "
            f"trajectory has {traj.steps}")
    weights = order.weights()
    stacked = np.stack([traj[j].values for j in range(1, needed + 1)])
    return traj[0].with_values(np.tensordot(weights, stacked, axes=1))


def cr_reset(f_prev: DistributionField, f0: DistributionField,
             proj: ConservedProjector) -> DistributionField:
    if f_prev.spec != f0.spec or proj.model.spec != f0.spec:
        raise StructuralError("Reset operands live on different lattices")
    return f_prev.with_values(f_prev.values + proj.apply(f0.values - f_prev.values))


def cr_map(model: EquilibriumModel, f0: DistributionField, m,
           anchor: Optional[DistributionField] = None,
           projector: Optional[ConservedProjector] = None) -> DistributionField:
    """
    One sweep in distribution space. Conserved moments come from ``anchor``
    when given, otherwise from f0.
    """
    order = SmoothnessOrder.coerce(m)
    projector = projector or ConservedProjector.for_model(model)
    traj = run_steps(model, f0, order.m + 1)
    f_prev = backward_extrapolation(traj, order)
    return cr_reset(f_prev, anchor if anchor is not None else f0, projector)


def _require_density_only(model):
    if model.variant is not EquilibriumVariant.DENSITY_ONLY_1D:
        raise UnsupportedOperationError(
            f"Moment-space Constrained Runs needs the DensityOnly1D model, got {model.variant.value}")


def cr_moment_sweep(model: EquilibriumModel, rho0: np.ndarray, phi: np.ndarray,
                    xi: np.ndarray, m) -> Tuple[np.ndarray, np.ndarray]:
    """
    Moment-space map (phi, xi) -> C_m(rho0, (phi, xi)) of the density-only model.

    The populations built from (rho0, phi, xi) are advanced m+1 steps, the
    moments of every step are extrapolated back, and rho stays rho0.
    """
    _require_density_only(model)
    order = SmoothnessOrder.coerce(m)
    spec = model.spec
    start = distributions_from_moments(MacroFields(spec, rho0, (phi,), xi))
    traj = run_steps(model, start, order.m + 1)

    weights = order.weights()
    phi_new = np.zeros(spec.grid_shape)
    xi_new = np.zeros(spec.grid_shape)
    for weight, snapshot in zip(weights, traj.snapshots[1:]):
        moments = moments_from_distributions(snapshot)
        phi_new += weight * moments.momentum[0]
        xi_new += weight * moments.xi
    return phi_new, xi_new


def cr_moment_fixed_point(model: EquilibriumModel, rho0: np.ndarray, m,
                          tol: float = 1e-12) -> Tuple[MacroFields, NewtonReport]:
    """
    Newton solve of (phi, xi) = C_m(rho0, (phi, xi)).

    Unknowns are scaled to lattice units (phi / c, xi / c^2) so the absolute
    tolerance means the same thing for every lattice speed.
    """
    _require_density_only(model)
    spec = model.spec
    rho0 = np.asarray(rho0, dtype=float)
    c = spec.c
    n = rho0.size

    def residual(x):
        phi, xi = x[:n] * c, x[n:] * c * c
        phi_new, xi_new = cr_moment_sweep(model, rho0, phi, xi, m)
        return np.concatenate([phi_new.ravel() / c, xi_new.ravel() / (c * c)]) - x

    # Equilibrium start: phi = 0, xi = c^2 rho0 / 3
    x0 = np.concatenate([np.zeros(n), rho0.ravel() / 3.0])
    x, report = newton_solve(residual, x0, tol_abs=tol, label=f'moment CR m={int(SmoothnessOrder.coerce(m).m)}')
    phi = x[:n].reshape(spec.grid_shape) * c
    xi = x[n:].reshape(spec.grid_shape) * c * c
    return MacroFields(spec, rho0, (phi,), xi), report


def newton_full_state(model: EquilibriumModel, targets: MacroFields, m,
                      guess: Optional[DistributionField] = None,
                      tol: float = 1e-12) -> Tuple[DistributionField, NewtonReport]:
    """
    Full-state Constrained Runs: solve f = cr_map(f) with the conserved
    moments pinned to ``targets``. Every Newton iteration costs q * sites
    sweeps for the forward-difference Jacobian.
    """
    spec = model.spec
    unknowns = spec.q * spec.site_count
    if unknowns > MAX_FULL_STATE_UNKNOWNS:
        raise UnsupportedOperationError(
            f"Full-state Constrained Runs with {unknowns} unknowns exceeds the limit of "
            f"{MAX_FULL_STATE_UNKNOWNS}; use the expansion coefficients instead")
    order = SmoothnessOrder.coerce(m)
    anchor = equilibrium(model, targets)
    projector = ConservedProjector.for_model(model)

    def residual(x):
        f = DistributionField.from_flat(spec, x)
        return cr_map(model, f, order, anchor=anchor, projector=projector).flat() - x

    start = guess if guess is not None else anchor
    x, report = newton_solve(residual, start.flat(), tol_abs=tol, label=f'full-state CR m={order.m}')
    logger.info("Full-state CR m=%d: Jacobian %dx%d, %d iteration(s)",
                order.m, unknowns, unknowns, report.iterations)
    return DistributionField.from_flat(spec, x), report


def explicit_cr_iteration(model: EquilibriumModel, f0: DistributionField, m,
                          tol: float = 1e-12, max_sweeps: int = 2000) -> Tuple[DistributionField, NewtonReport]:
    """
    Plain fixed-point sweeps f <- cr_map(f), conserved moments pinned to f0's.

    Only offered for m <= 1; higher orders are unstable. Raises
    ConvergenceError when the update norm grows across a window of 10 sweeps.
    """
    order = SmoothnessOrder.coerce(m)
    if order.m > 1:
        raise UnsupportedOperationError("Explicit Constrained Runs iteration is limited to m <= 1; use Newton")
    projector = ConservedProjector.for_model(model)
    report = NewtonReport(unknowns=f0.values.size)
    history = []
    f = f0
    for sweep in range(1, max_sweeps + 1):
        f_next = cr_map(model, f, order, anchor=f0, projector=projector)
        change = float(np.max(np.abs(f_next.values - f.values)))
        history.append(change)
        report.iterations, report.residual = sweep, change
        f = f_next
        if change <= tol:
            report.converged = True
            return f, report
        if len(history) > DIVERGENCE_WINDOW and change > history[-1 - DIVERGENCE_WINDOW]:
            raise ConvergenceError(
                f"Explicit CR m={order.m} diverges: update grew from "
                f"{history[-1 - DIVERGENCE_WINDOW]:.3e} to {change:.3e} over {DIVERGENCE_WINDOW} sweeps", report)
    raise ConvergenceError(f"Explicit CR m={order.m} did not converge in {max_sweeps} sweeps", report)
