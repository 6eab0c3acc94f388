"""
Fixed-point solver for the expansion coefficients.

The map h takes coefficients theta, lifts the macro targets with them, runs
one Constrained Runs sweep and re-extracts coefficients from the result. The
coefficients of the slow-manifold lift are the fixed point theta = h(theta),
found by Newton on r(theta) = h(theta) - theta over the q * T unknowns.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from calculus import DEFAULT_ACCURACY
from constrained_runs import ConservedProjector, SmoothnessOrder, cr_map, cr_moment_sweep
from errors import ContractError, StructuralError
from lattice import DistributionField, MacroFields, distributions_from_moments, moments_from_distributions
from lbm import EquilibriumModel, EquilibriumVariant, equilibrium
from nce_expansion import (
    AllSites,
    CoefficientSet,
    ExpansionBasis,
    ExtractionSystem,
    SubsetSites,
    TermFields,
    evaluate_terms,
    lift,
)
from newton import NewtonReport, newton_solve

__all__ = ['HContext', 'NewtonReport', 'h', 'solve_coefficients', 'lift_new_state']

logger = logging.getLogger(__name__)

ABSOLUTE_TOLERANCE = 1e-12
RELATIVE_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class HContext:
    """Everything h needs besides theta; the cached parts depend only on the macro targets"""
    model: EquilibriumModel
    basis: ExpansionBasis
    macro: MacroFields
    m: SmoothnessOrder
    sampling: Union[AllSites, SubsetSites]
    stencil_order: int
    term_fields: TermFields
    system: ExtractionSystem
    anchor: DistributionField
    projector: ConservedProjector

    @classmethod
    def build(cls, model: EquilibriumModel, basis: ExpansionBasis, macro: MacroFields, m,
              sampling=None, stencil_order: int = DEFAULT_ACCURACY) -> 'HContext':
        if macro.spec != model.spec:
            raise StructuralError("Macro targets and model live on different lattices")
        unknown = [t.name for t in basis.terms if t.moment not in model.conserved_names]
        if unknown:
            raise StructuralError(
                f"Terms {', '.join(unknown)} differentiate moments the "
                f"{model.variant.value} model does not conserve")
        if model.conserves_momentum and not macro.has_momentum:
            raise StructuralError(f"{model.variant.value} targets need momentum fields")

        targets = macro if model.conserves_momentum else MacroFields(macro.spec, macro.rho)
        sampling = sampling if sampling is not None else AllSites()
        term_fields = evaluate_terms(basis, targets, model.spec, stencil_order)
        system = ExtractionSystem(term_fields, model.spec, sampling)
        return cls(
            model=model,
            basis=basis,
            macro=targets,
            m=SmoothnessOrder.coerce(m),
            sampling=sampling,
            stencil_order=stencil_order,
            term_fields=term_fields,
            system=system,
            anchor=equilibrium(model, targets),
            projector=ConservedProjector.for_model(model),
        )

    def lift(self, theta: CoefficientSet) -> DistributionField:
        return lift(self.basis, theta, self.macro, self.model, self.stencil_order, self.term_fields)

    def extract(self, f: DistributionField) -> CoefficientSet:
        spec = self.model.spec
        deviation = (f.values - self.anchor.values).reshape(spec.q, -1)
        return CoefficientSet(self.basis, self.system.solve(deviation), spec)


def _density_only_sweep(ctx: HContext, f: DistributionField) -> DistributionField:
    # Moment-space sweep with rho held at the target density
    moments = moments_from_distributions(f)
    phi, xi = cr_moment_sweep(ctx.model, ctx.macro.rho, moments.momentum[0], moments.xi, ctx.m)
    return distributions_from_moments(MacroFields(f.spec, ctx.macro.rho, (phi,), xi))


def h(ctx: HContext, theta: CoefficientSet) -> CoefficientSet:
    """lift -> one Constrained Runs sweep -> extract"""
    if theta.basis.names != ctx.basis.names or theta.spec != ctx.model.spec:
        raise StructuralError("Coefficients do not match the context's basis and lattice")
    f = ctx.lift(theta)
    if ctx.model.variant is EquilibriumVariant.DENSITY_ONLY_1D:
        swept = _density_only_sweep(ctx, f)
    else:
        swept = cr_map(ctx.model, f, ctx.m, anchor=ctx.anchor, projector=ctx.projector)
    return ctx.extract(swept)


def solve_coefficients(ctx: HContext,
                       guess: Optional[CoefficientSet] = None) -> Tuple[CoefficientSet, NewtonReport]:
    """Newton on h(theta) - theta, starting from the equilibrium lift theta = 0"""
    spec = ctx.model.spec
    start = guess if guess is not None else CoefficientSet.zeros(ctx.basis, spec)

    def residual(x):
        theta = CoefficientSet.from_vector(ctx.basis, x, spec)
        return h(ctx, theta).vector() - x

    x, report = newton_solve(
        residual, start.vector(),
        tol_abs=ABSOLUTE_TOLERANCE, tol_rel=RELATIVE_TOLERANCE,
        cond=ctx.system.cond,
        label=f'NCE {ctx.model.variant.value} T={len(ctx.basis)} m={ctx.m.m}',
    )
    return CoefficientSet.from_vector(ctx.basis, x, spec), report


def lift_new_state(theta: CoefficientSet, basis: ExpansionBasis, macro: MacroFields,
                   model: EquilibriumModel, accuracy: int = DEFAULT_ACCURACY) -> DistributionField:
    """Reuse trained coefficients on other macro fields with the same dx, dt and omega"""
    if not theta.spec.same_discretization(macro.spec):
        raise ContractError(
            f"Coefficients were trained for dx={theta.spec.dx:g}, dt={theta.spec.dt:g}, "
            f"omega={theta.spec.omega:g}; got dx={macro.spec.dx:g}, dt={macro.spec.dt:g}, "
            f"omega={macro.spec.omega:g}")
    if theta.basis.names != basis.names:
        raise StructuralError(
            f"Coefficients were trained on [{', '.join(theta.basis.names)}], "
            f"not [{', '.join(basis.names)}]")
    if model.spec != macro.spec:
        raise StructuralError("Model and macro fields live on different lattices")
    rebased = CoefficientSet(basis, np.asarray(theta.theta), macro.spec)
    return lift(basis, rebased, macro, model, accuracy)
