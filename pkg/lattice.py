"""
Lattice geometry, field containers and the moment transforms.

Populations are stored population-major: ``values[i]`` is the grid of the
i-th velocity. Grids are ``(n,)`` in 1D and ``(n, n)`` indexed ``(y, x)``
(row-major) in 2D, so a flat site index is ``y * n + x``.

Velocity ordering follows the moment matrix of the D1Q3 model,
``(f_1, f_0, f_-1)``, and ``v_0 .. v_4`` for D2Q5.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from errors import StructuralError, UnsupportedOperationError

# Dimensionless velocity directions c_i, one row per population
VELOCITY_SETS = {
    (1, 3): np.array([[1], [0], [-1]]),
    (2, 5): np.array([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1]]),
}

LATTICE_NAMES = {(1, 3): 'D1Q3', (2, 5): 'D2Q5'}

MIN_GRID_POINTS = 8


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic square grid with n points per axis on [0, length)"""
    dimension: int
    q: int
    n: int
    length: float
    dt: float
    omega: float

    def __post_init__(self):
        if (self.dimension, self.q) not in VELOCITY_SETS:
            raise StructuralError(
                f"Unsupported lattice D{self.dimension}Q{self.q}; use D1Q3 or D2Q5")
        if int(self.n) != self.n or self.n < MIN_GRID_POINTS:
            raise StructuralError(f"Need an integer n >= {MIN_GRID_POINTS}, got {self.n}")
        if not self.length > 0 or not self.dt > 0:
            raise StructuralError("Domain length and time step must be positive")
        if not 0 < self.omega < 2:
            raise StructuralError(f"Relaxation rate must lie in (0, 2), got {self.omega}")

    @classmethod
    def d1q3(cls, n, length, dt, omega):
        return cls(1, 3, n, length, dt, omega)

    @classmethod
    def d2q5(cls, n, length, dt, omega):
        # Same n and length on both axes, so dx == dy
        return cls(2, 5, n, length, dt, omega)

    @property
    def name(self) -> str:
        return LATTICE_NAMES[(self.dimension, self.q)]

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def c(self) -> float:
        """Lattice speed dx / dt"""
        return self.dx / self.dt

    @property
    def velocities(self) -> np.ndarray:
        return VELOCITY_SETS[(self.dimension, self.q)]

    @property
    def grid_shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.dimension

    @property
    def field_shape(self) -> Tuple[int, ...]:
        return (self.q,) + self.grid_shape

    @property
    def site_count(self) -> int:
        return self.n ** self.dimension

    def same_discretization(self, other: 'LatticeSpec') -> bool:
        """True when dx, dt and omega agree, the parameters coefficients depend on"""
        return (
            (self.dimension, self.q) == (other.dimension, other.q)
            and np.isclose(self.dx, other.dx, rtol=1e-12, atol=0.0)
            and np.isclose(self.dt, other.dt, rtol=1e-12, atol=0.0)
            and np.isclose(self.omega, other.omega, rtol=1e-12, atol=0.0)
        )


def _frozen_array(values, shape, what):
    array = np.array(values, dtype=float)
    if array.shape != shape:
        raise StructuralError(f"{what} has shape {array.shape}, expected {shape}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DistributionField:
    """Populations f(site, i) on the grid of ``spec``"""
    spec: LatticeSpec
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values, self.spec.field_shape, 'Distribution field')
        if not np.all(np.isfinite(values)):
            raise StructuralError("Distribution field contains non-finite entries")
        object.__setattr__(self, 'values', values)

    def with_values(self, values) -> 'DistributionField':
        return DistributionField(self.spec, values)

    def flat(self) -> np.ndarray:
        """Population-major vector of length q * sites"""
        return self.values.ravel().copy()

    @classmethod
    def from_flat(cls, spec: LatticeSpec, vector) -> 'DistributionField':
        return cls(spec, np.asarray(vector, dtype=float).reshape(spec.field_shape))

    def population(self, i: int) -> np.ndarray:
        return self.values[i]


@dataclass(frozen=True, eq=False)
class MacroFields:
    """Density, momentum components rho*u_k and (D1Q3 only) the energy moment xi"""
    spec: LatticeSpec
    rho: np.ndarray
    momentum: Tuple[np.ndarray, ...] = ()
    xi: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = self.spec.grid_shape
        object.__setattr__(self, 'rho', _frozen_array(self.rho, shape, 'Density'))
        if len(self.momentum) not in (0, self.spec.dimension):
            raise StructuralError(
                f"Expected 0 or {self.spec.dimension} momentum components, got {len(self.momentum)}")
        momentum = tuple(_frozen_array(p, shape, 'Momentum') for p in self.momentum)
        object.__setattr__(self, 'momentum', momentum)
        if self.xi is not None:
            object.__setattr__(self, 'xi', _frozen_array(self.xi, shape, 'Energy moment'))

    @property
    def has_momentum(self) -> bool:
        return len(self.momentum) > 0

    def conserved_only(self) -> 'MacroFields':
        return MacroFields(self.spec, self.rho, self.momentum)


def grid_coordinates(spec: LatticeSpec) -> Tuple[np.ndarray, ...]:
    """Site positions x_j = j*dx; in 2D returns (x, y) meshes of shape (n, n) indexed (y, x)"""
    axis = np.arange(spec.n) * spec.dx
    if spec.dimension == 1:
        return (axis,)
    y, x = np.meshgrid(axis, axis, indexing='ij')
    return x, y


def moment_matrix(spec: LatticeSpec) -> np.ndarray:
    """D1Q3 matrix M mapping (f_1, f_0, f_-1) to (rho, rho*u, xi) with v_i = c*c_i"""
    if spec.name != 'D1Q3':
        raise UnsupportedOperationError(f"No square moment matrix for {spec.name}")
    c = spec.c
    return np.array([
        [1.0, 1.0, 1.0],
        [c, 0.0, -c],
        [0.5 * c * c, 0.0, 0.5 * c * c],
    ])


def inverse_moment_matrix(spec: LatticeSpec) -> np.ndarray:
    """Closed-form inverse of ``moment_matrix``"""
    if spec.name != 'D1Q3':
        raise UnsupportedOperationError(
            f"{spec.name} moments are not invertible: 5 populations, 3 conserved moments")
    c = spec.c
    return np.array([
        [0.0, 0.5 / c, 1.0 / (c * c)],
        [1.0, 0.0, -2.0 / (c * c)],
        [0.0, -0.5 / c, 1.0 / (c * c)],
    ])


def _check_field(f):
    if not isinstance(f, DistributionField):
        raise StructuralError(f"Expected a DistributionField, got {type(f).__name__}")


def moments_from_distributions(f: DistributionField) -> MacroFields:
    """Velocity moments of f; xi is only materialized for D1Q3"""
    _check_field(f)
    spec = f.spec
    if spec.name == 'D1Q3':
        rho, phi, xi = np.einsum('ij,j...->i...', moment_matrix(spec), f.values)
        return MacroFields(spec, rho, (phi,), xi)

    rho = f.values.sum(axis=0)
    velocities = spec.velocities * spec.c
    momentum = tuple(
        np.einsum('i,i...->...', velocities[:, k], f.values)
        for k in range(spec.dimension)
    )
    return MacroFields(spec, rho, momentum)


def distributions_from_moments(m: MacroFields) -> DistributionField:
    """Apply M^-1 site by site (D1Q3 only)"""
    spec = m.spec
    # Raises for D2Q5 before looking at the fields
    inverse = inverse_moment_matrix(spec)
    if not m.has_momentum or m.xi is None:
        raise StructuralError("Need rho, rho*u and xi to rebuild D1Q3 populations")
    stacked = np.stack([m.rho, m.momentum[0], m.xi])
    return DistributionField(spec, np.einsum('ij,j...->i...', inverse, stacked))


def stream(f: DistributionField) -> DistributionField:
    """Shift every population one cell along its velocity with periodic wrap"""
    _check_field(f)
    spec = f.spec
    streamed = np.empty(spec.field_shape)
    for i, direction in enumerate(spec.velocities):
        # Grid axes run (y, x) in 2D, so reverse the (cx, cy) direction
        shift = tuple(int(s) for s in direction[::-1])
        streamed[i] = np.roll(f.values[i], shift, axis=tuple(range(spec.dimension)))
    return f.with_values(streamed)


def field_to_frame(f: DistributionField) -> pd.DataFrame:
    """One row per site in row-major order: x[, y], f_0 .. f_{q-1}"""
    spec = f.spec
    columns = {}
    coords = grid_coordinates(spec)
    columns['x'] = coords[0].ravel()
    if spec.dimension == 2:
        columns['y'] = coords[1].ravel()
    for i in range(spec.q):
        columns[f'f_{i}'] = f.values[i].ravel()
    return pd.DataFrame(columns)


def write_field_csv(f: DistributionField, path) -> None:
    field_to_frame(f).to_csv(path, index=False, float_format='%.17g')


def read_field_csv(path, spec: LatticeSpec) -> DistributionField:
    frame = pd.read_csv(path, float_precision='round_trip')
    expected = (['x', 'y'][:spec.dimension]) + [f'f_{i}' for i in range(spec.q)]
    if list(frame.columns) != expected or len(frame) != spec.site_count:
        raise StructuralError(f"{path} does not hold a {spec.name} field with n={spec.n}")
    values = np.stack([frame[f'f_{i}'].to_numpy() for i in range(spec.q)])
    return DistributionField(spec, values.reshape(spec.field_shape))
