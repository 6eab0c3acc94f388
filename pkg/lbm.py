"""
Equilibrium models and the BGK stream-collide update.

    f_i(x + c_i dx, t + dt) = (1 - omega) f_i(x, t) + omega f_i^eq(x, t)

Collision happens first, then streaming.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np

from errors import StructuralError, ZeroDensityError
from lattice import (
    DistributionField,
    LatticeSpec,
    MacroFields,
    moments_from_distributions,
    stream,
)

logger = logging.getLogger(__name__)


class EquilibriumVariant(Enum):
    DENSITY_ONLY_1D = 'DensityOnly1D'
    DENSITY_MOMENTUM_1D = 'DensityMomentum1D'
    DENSITY_MOMENTUM_2D = 'DensityMomentum2D'


LATTICE_FOR_VARIANT = {
    EquilibriumVariant.DENSITY_ONLY_1D: 'D1Q3',
    EquilibriumVariant.DENSITY_MOMENTUM_1D: 'D1Q3',
    EquilibriumVariant.DENSITY_MOMENTUM_2D: 'D2Q5',
}


@dataclass(frozen=True)
class EquilibriumModel:
    variant: EquilibriumVariant
    spec: LatticeSpec

    def __post_init__(self):
        variant = EquilibriumVariant(self.variant)
        object.__setattr__(self, 'variant', variant)
        if LATTICE_FOR_VARIANT[variant] != self.spec.name:
            raise StructuralError(
                f"{variant.value} needs a {LATTICE_FOR_VARIANT[variant]} lattice, got {self.spec.name}")

    @classmethod
    def density_only_1d(cls, spec):
        return cls(EquilibriumVariant.DENSITY_ONLY_1D, spec)

    @classmethod
    def density_momentum_1d(cls, spec):
        return cls(EquilibriumVariant.DENSITY_MOMENTUM_1D, spec)

    @classmethod
    def density_momentum_2d(cls, spec):
        return cls(EquilibriumVariant.DENSITY_MOMENTUM_2D, spec)

    @property
    def conserves_momentum(self) -> bool:
        return self.variant is not EquilibriumVariant.DENSITY_ONLY_1D

    @property
    def conserved_names(self) -> Tuple[str, ...]:
        if not self.conserves_momentum:
            return ('rho',)
        return ('rho', 'rhoux', 'rhouy')[:1 + self.spec.dimension]


def conserved_moments(model: EquilibriumModel, f: DistributionField) -> MacroFields:
    """The moments the model's collision conserves"""
    moments = moments_from_distributions(f)
    if model.conserves_momentum:
        return MacroFields(f.spec, moments.rho, moments.momentum)
    return MacroFields(f.spec, moments.rho)


def equilibrium(model: EquilibriumModel, m: MacroFields) -> DistributionField:
    spec = model.spec
    weight = 1.0 / spec.q
    rho = m.rho
    if not model.conserves_momentum:
        return DistributionField(spec, np.broadcast_to(weight * rho, spec.field_shape))

    if not m.has_momentum:
        raise StructuralError(f"{model.variant.value} equilibrium needs momentum fields")
    if np.any(rho <= 0.0):
        bad = int(np.count_nonzero(rho <= 0.0))
        raise ZeroDensityError(f"Density is zero or negative at {bad} site(s); cannot form u = rho*u / rho")

    # u in physical units; the velocity sets hold the dimensionless c_i
    velocity = np.stack([p / rho for p in m.momentum])
    values = np.empty(spec.field_shape)
    for i, direction in enumerate(spec.velocities):
        projected = np.tensordot(direction, velocity, axes=1)
        values[i] = (weight + projected / (2.0 * spec.c)) * rho
    return DistributionField(spec, values)


def collide(model: EquilibriumModel, f: DistributionField) -> DistributionField:
    """BGK relaxation toward the equilibrium of f's own conserved moments"""
    omega = model.spec.omega
    f_eq = equilibrium(model, conserved_moments(model, f))
    return f.with_values((1.0 - omega) * f.values + omega * f_eq.values)


def bgk_step(model: EquilibriumModel, f: DistributionField) -> DistributionField:
    return stream(collide(model, f))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Snapshots f^0 .. f^K at successive time steps"""
    snapshots: Tuple[DistributionField, ...]

    def __post_init__(self):
        snapshots = tuple(self.snapshots)
        if not snapshots:
            raise StructuralError("A trajectory holds at least the initial state")
        spec = snapshots[0].spec
        if any(s.spec != spec for s in snapshots):
            raise StructuralError("Trajectory snapshots live on different lattices")
        object.__setattr__(self, 'snapshots', snapshots)

    @property
    def steps(self) -> int:
        return len(self.snapshots) - 1

    @property
    def final(self) -> DistributionField:
        return self.snapshots[-1]

    def __len__(self):
        return len(self.snapshots)

    def __getitem__(self, index):
        return self.snapshots[index]


def run_steps(model: EquilibriumModel, f: DistributionField, steps: int) -> Trajectory:
    if steps < 0:
        raise StructuralError(f"Step count must be non-negative, got {steps}")
    snapshots = [f]
    for _ in range(steps):
        snapshots.append(bgk_step(model, snapshots[-1]))
    logger.debug("Ran %d %s steps on n=%d", steps, model.variant.value, model.spec.n)
    return Trajectory(tuple(snapshots))


def advance(model: EquilibriumModel, f: DistributionField, steps: int) -> DistributionField:
    """Final state of ``run_steps`` without keeping the intermediate snapshots"""
    if steps < 0:
        raise StructuralError(f"Step count must be non-negative, got {steps}")
    for _ in range(steps):
        f = bgk_step(model, f)
    return f


def diffusion_coefficient(spec: LatticeSpec) -> float:
    """Macroscopic diffusivity of the density-only D1Q3 model"""
    return (2.0 - spec.omega) / (3.0 * spec.omega) * spec.dx ** 2 / spec.dt
