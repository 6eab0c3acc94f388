"""
Numerical Chapman-Enskog expansion: basis terms, lifting and coefficient
extraction.

A lifted state is

    f_i = f_i^eq + sum_t theta[i, t] * D_t

where each D_t is a spatial derivative of a conserved moment (rho, rho*u_x,
rho*u_y). Terms are ordered moment-major, then axis, then derivative order;
that order is also the column order of coefficient dumps.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from calculus import DEFAULT_ACCURACY, mixed_derivative
from errors import SingularSystemError, StructuralError
from lattice import DistributionField, LatticeSpec, MacroFields
from lbm import EquilibriumModel, equilibrium

logger = logging.getLogger(__name__)

MOMENT_NAMES = ('rho', 'rhoux', 'rhouy')
MAX_BASIS_ORDER = 4
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class Term:
    """Derivative d^kx/dx^kx d^ky/dy^ky of one conserved moment"""
    moment: str
    order_x: int = 0
    order_y: int = 0

    def __post_init__(self):
        if self.moment not in MOMENT_NAMES:
            raise StructuralError(f"Unknown moment {self.moment!r}")
        if self.order_x < 0 or self.order_y < 0 or self.order == 0:
            raise StructuralError("A term needs a positive derivative order")

    @property
    def order(self) -> int:
        return self.order_x + self.order_y

    @property
    def is_cross(self) -> bool:
        return self.order_x > 0 and self.order_y > 0

    @property
    def name(self) -> str:
        parts = []
        if self.order_x:
            parts.append(f'dx{self.order_x}')
        if self.order_y:
            parts.append(f'dy{self.order_y}')
        return ''.join(parts) + '_' + self.moment

    @classmethod
    def parse(cls, name: str) -> 'Term':
        orders, _, moment = name.partition('_')
        order_x = order_y = 0
        rest = orders
        try:
            if rest.startswith('dx'):
                digits = rest[2:].split('dy')[0]
                order_x = int(digits)
                rest = rest[2 + len(digits):]
            if rest.startswith('dy'):
                order_y = int(rest[2:])
                rest = ''
        except ValueError as exc:
            raise StructuralError(f"Cannot parse term name {name!r}") from exc
        if rest:
            raise StructuralError(f"Cannot parse term name {name!r}")
        return cls(moment, order_x, order_y)


@dataclass(frozen=True)
class ExpansionBasis:
    terms: Tuple[Term, ...]
    include_cross_terms: bool = False

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise StructuralError("An expansion basis needs at least one term")
        if len(set(terms)) != len(terms):
            raise StructuralError("Expansion basis terms must be distinct")
        object.__setattr__(self, 'terms', terms)

    @classmethod
    def for_model(cls, model: EquilibriumModel, order: int,
                  include_cross_terms: bool = False) -> 'ExpansionBasis':
        """All pure-axis terms up to ``order`` for every conserved moment of the model"""
        if not 1 <= order <= MAX_BASIS_ORDER:
            raise StructuralError(f"Basis order must lie in 1..{MAX_BASIS_ORDER}, got {order}")
        axes = ('x', 'y')[:model.spec.dimension]
        terms = []
        for moment in model.conserved_names:
            for axis in axes:
                for k in range(1, order + 1):
                    terms.append(Term(moment, k, 0) if axis == 'x' else Term(moment, 0, k))
            if include_cross_terms and model.spec.dimension == 2:
                for total in range(2, order + 1):
                    for kx in range(1, total):
                        terms.append(Term(moment, kx, total - kx))
        return cls(tuple(terms), include_cross_terms)

    @classmethod
    def from_names(cls, names: Sequence[str]) -> 'ExpansionBasis':
        terms = tuple(Term.parse(name) for name in names)
        return cls(terms, any(t.is_cross for t in terms))

    @property
    def max_order(self) -> int:
        return max(t.order for t in self.terms)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(t.name for t in self.terms)

    def __len__(self):
        return len(self.terms)

    def describe(self) -> str:
        return 'feq, ' + ', '.join(self.names)


@dataclass(frozen=True, eq=False)
class TermFields:
    """Derivative fields D_t, stacked as (T,) + grid shape"""
    basis: ExpansionBasis
    fields: np.ndarray

    def design_matrix(self, sites: Optional[np.ndarray] = None) -> np.ndarray:
        """Rows are sites (row-major), columns are terms"""
        matrix = self.fields.reshape(len(self.basis), -1).T
        return matrix if sites is None else matrix[sites]


def _target_field(moment: str, m: MacroFields) -> np.ndarray:
    if moment == 'rho':
        return m.rho
    component = MOMENT_NAMES.index(moment) - 1
    if component >= len(m.momentum):
        raise StructuralError(
            f"Basis needs {moment} but the {m.spec.name} macro fields carry "
            f"{len(m.momentum)} momentum component(s)")
    return m.momentum[component]


def evaluate_terms(basis: ExpansionBasis, m: MacroFields, spec: LatticeSpec,
                   accuracy: int = DEFAULT_ACCURACY) -> TermFields:
    """Differentiate each term's target; rho*u enters as the pointwise product"""
    if spec.dimension == 1 and any(t.order_y for t in basis.terms):
        raise StructuralError("y-derivatives requested on a 1D lattice")
    fields = np.empty((len(basis),) + spec.grid_shape)
    for t, term in enumerate(basis.terms):
        target = _target_field(term.moment, m)
        fields[t] = mixed_derivative(target, term.order_x, term.order_y, accuracy, spec.dx, spec.dx)
    return TermFields(basis, fields)


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """theta[i, t] multiplies term t in the series for population i"""
    basis: ExpansionBasis
    theta: np.ndarray
    spec: LatticeSpec

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        expected = (self.spec.q, len(self.basis))
        if theta.shape != expected:
            raise StructuralError(f"Coefficients have shape {theta.shape}, expected {expected}")
        if not np.all(np.isfinite(theta)):
            raise StructuralError("Coefficients contain non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, 'theta', theta)

    @classmethod
    def zeros(cls, basis: ExpansionBasis, spec: LatticeSpec) -> 'CoefficientSet':
        return cls(basis, np.zeros((spec.q, len(basis))), spec)

    @classmethod
    def from_vector(cls, basis, vector, spec) -> 'CoefficientSet':
        return cls(basis, np.asarray(vector, dtype=float).reshape(spec.q, len(basis)), spec)

    def vector(self) -> np.ndarray:
        return self.theta.ravel().copy()

    @property
    def unknowns(self) -> int:
        return self.theta.size

    def column_sums(self, model: EquilibriumModel) -> np.ndarray:
        """Conserved-moment content of each coefficient column; zero on the slow manifold"""
        spec = self.spec
        rows = [np.ones(spec.q)]
        if model.conserves_momentum:
            rows += [spec.velocities[:, k] * spec.c for k in range(spec.dimension)]
        return np.array(rows) @ self.theta

    def to_frame(self) -> pd.DataFrame:
        records = [
            {'velocity': i, 'term': name, 'coefficient': self.theta[i, t]}
            for i in range(self.spec.q)
            for t, name in enumerate(self.basis.names)
        ]
        return pd.DataFrame(records, columns=['velocity', 'term', 'coefficient'])


def write_coefficients_csv(theta: CoefficientSet, path) -> None:
    theta.to_frame().to_csv(path, index=False, float_format='%.17g')


def read_coefficients_csv(path, spec: LatticeSpec) -> CoefficientSet:
    frame = pd.read_csv(path, float_precision='round_trip')
    if list(frame.columns) != ['velocity', 'term', 'coefficient']:
        raise StructuralError(f"{path} is not a coefficient dump")
    names = list(dict.fromkeys(frame['term']))
    basis = ExpansionBasis.from_names(names)
    table = frame.pivot(index='velocity', columns='term', values='coefficient')
    return CoefficientSet(basis, table[names].to_numpy(), spec)


def lift(basis: ExpansionBasis, theta: CoefficientSet, m: MacroFields,
         model: EquilibriumModel, accuracy: int = DEFAULT_ACCURACY,
         term_fields: Optional[TermFields] = None) -> DistributionField:
    if theta.basis.names != basis.names:
        raise StructuralError("Coefficients were built for a different basis")
    if term_fields is None:
        term_fields = evaluate_terms(basis, m, model.spec, accuracy)
    f_eq = equilibrium(model, m)
    correction = np.tensordot(theta.theta, term_fields.fields, axes=1)
    return f_eq.with_values(f_eq.values + correction)


@dataclass(frozen=True)
class AllSites:
    """Global least squares over every grid site"""

    def indices(self, spec: LatticeSpec) -> np.ndarray:
        return np.arange(spec.site_count)

    def __str__(self):
        return 'all'


@dataclass(frozen=True)
class SubsetSites:
    """Only the listed flat site indices (row-major); p == T gives a square system"""
    sites: Tuple[int, ...] = field(default_factory=tuple)

    def indices(self, spec: LatticeSpec) -> np.ndarray:
        sites = np.array(self.sites, dtype=int)
        if sites.size == 0 or np.any(sites < 0) or np.any(sites >= spec.site_count):
            raise StructuralError(f"Sampled sites must be in 0..{spec.site_count - 1}")
        if len(set(self.sites)) != len(self.sites):
            raise StructuralError("Sampled sites must be distinct")
        return sites

    def __str__(self):
        return 'subset:' + ','.join(str(s) for s in self.sites)


def parse_sampling(text: str):
    text = text.strip()
    if text == 'all':
        return AllSites()
    if text.startswith('subset:'):
        try:
            return SubsetSites(tuple(int(s) for s in text[len('subset:'):].split(',') if s.strip()))
        except ValueError as exc:
            raise StructuralError(f"Bad site list in {text!r}") from exc
    raise StructuralError(f"Sampling must be 'all' or 'subset:i,j,...', got {text!r}")


class ExtractionSystem:
    """
    Least-squares solver for the coefficients at fixed macro fields.

    The q per-velocity problems share one design matrix, so its
    pseudo-inverse is formed once and applied to all right-hand sides.
    """

    def __init__(self, term_fields: TermFields, spec: LatticeSpec, sampling=None):
        self.basis = term_fields.basis
        self.spec = spec
        self.sampling = sampling if sampling is not None else AllSites()
        self.sites = self.sampling.indices(spec)
        self.matrix = term_fields.design_matrix(self.sites)

        terms = len(self.basis)
        if self.sites.size < terms:
            raise StructuralError(
                f"{self.sites.size} sampled site(s) cannot determine {terms} term coefficients")
        singular_values = np.linalg.svd(self.matrix, compute_uv=False)
        smallest = singular_values[-1]
        self.cond = float(singular_values[0] / smallest) if smallest > 0 else float('inf')
        if not self.cond <= MAX_CONDITION:
            raise SingularSystemError(
                f"Extraction system is singular (cond={self.cond:.3e}); "
                "choose macro fields with non-vanishing derivatives", cond=self.cond)
        self.pseudo_inverse = np.linalg.pinv(self.matrix)
        logger.debug("Extraction system: %d sites x %d terms, cond=%.3e",
                     self.sites.size, terms, self.cond)

    def solve(self, deviation: np.ndarray) -> np.ndarray:
        """deviation is (q, sites) of f - f^eq; returns theta of shape (q, T)"""
        return deviation[:, self.sites] @ self.pseudo_inverse.T


def extract_coefficients(basis: ExpansionBasis, f: DistributionField, m: MacroFields,
                         model: EquilibriumModel, sampling=None,
                         accuracy: int = DEFAULT_ACCURACY,
                         system: Optional[ExtractionSystem] = None) -> CoefficientSet:
    """Least-squares fit of f - f^eq(m) onto the basis term fields of m"""
    if f.spec != model.spec or m.spec != model.spec:
        raise StructuralError("Field, macro fields and model live on different lattices")
    if system is None:
        system = ExtractionSystem(evaluate_terms(basis, m, model.spec, accuracy), model.spec, sampling)
    elif system.basis.names != basis.names or system.spec != model.spec:
        raise StructuralError("Extraction system was built for another basis or lattice")
    deviation = (f.values - equilibrium(model, m).values).reshape(model.spec.q, -1)
    return CoefficientSet(basis, system.solve(deviation), model.spec)


def assemble_block_system(term_fields: TermFields, f: DistributionField, m: MacroFields,
                          model: EquilibriumModel, sites: Sequence[int]):
    """
    Full coupled system over the sampled sites.

    Rows run site-major then velocity, unknowns term-major then velocity, so
    the matrix is kron(design, I_q): one diagonal block per (site, term).
    Returns (matrix, rhs); ``theta.T.ravel()`` is the matching unknown vector.
    """
    sites = np.asarray(sites, dtype=int)
    q = model.spec.q
    design = term_fields.design_matrix(sites)
    deviation = (f.values - equilibrium(model, m).values).reshape(q, -1)[:, sites]
    return np.kron(design, np.eye(q)), deviation.T.ravel()
