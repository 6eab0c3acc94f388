"""
Restriction-lifting experiments.

A reference state f_c is produced by running the LBM from the equilibrium of
analytic initial fields, restricted to its conserved moments and lifted back
with each operator under test. Errors are the 2-norm distance to f_c.

Presets:
    exp1          D1Q3 density+momentum, expansion coefficients, bases 1-4, m = 0..6
    exp1-cr       same problem, full-state Constrained Runs with Newton
    exp1-density  D1Q3 density-only model, expansion coefficients
    exp2          D2Q5 density+momentum, expansion coefficients, bases 1-3
"""

import logging
import os
import pickle
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

import click
import numpy as np
import pandas as pd
from dotenv import dotenv_values

from constrained_runs import SmoothnessOrder, newton_full_state
from errors import ConfigError, ConvergenceError, LiftingError, StructuralError
from lattice import DistributionField, LatticeSpec, MacroFields, grid_coordinates
from lbm import (
    EquilibriumModel,
    EquilibriumVariant,
    LATTICE_FOR_VARIANT,
    advance,
    bgk_step,
    conserved_moments,
    diffusion_coefficient,
    equilibrium,
)
from nce_expansion import ExpansionBasis, MAX_BASIS_ORDER, parse_sampling
from nce_solver import HContext, solve_coefficients

logger = logging.getLogger(__name__)

COLUMNS = ['experiment', 'basis', 'order_m', 'velocity', 'error', 'iters', 'residual', 'converged', 'cond']

METHODS = ('nce', 'cr')
NORMS = ('raw', 'scaled')
DIFFUSION_TOLERANCE = 0.02


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = 'exp1'
    model: str = EquilibriumVariant.DENSITY_MOMENTUM_1D.value
    length: float = 10.0
    n: int = 200
    dt: float = 0.001
    omega: float = 0.9091
    k_ref: int = 1000
    basis_orders: Tuple[int, ...] = (1, 2, 3, 4)
    orders_m: Tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    method: str = 'nce'
    sampling: str = 'all'
    stencil_order: int = 4
    norm: str = 'raw'
    include_cross_terms: bool = False

    def __post_init__(self):
        try:
            EquilibriumVariant(self.model)
        except ValueError:
            names = ', '.join(v.value for v in EquilibriumVariant)
            raise ConfigError(f"Unknown model {self.model!r}; choose one of {names}") from None
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.stencil_order not in (2, 4):
            raise ConfigError(f"stencil_order must be 2 or 4, got {self.stencil_order}")
        if self.k_ref < 0:
            raise ConfigError(f"k_ref must be non-negative, got {self.k_ref}")
        if any(not 1 <= k <= MAX_BASIS_ORDER for k in self.basis_orders):
            raise ConfigError(f"basis_orders must lie in 1..{MAX_BASIS_ORDER}, got {self.basis_orders}")
        try:
            for m in self.orders_m:
                SmoothnessOrder(m)
            self.spec
            self.sampling_policy
        except StructuralError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def variant(self) -> EquilibriumVariant:
        return EquilibriumVariant(self.model)

    @property
    def spec(self) -> LatticeSpec:
        if LATTICE_FOR_VARIANT[self.variant] == 'D2Q5':
            return LatticeSpec.d2q5(self.n, self.length, self.dt, self.omega)
        return LatticeSpec.d1q3(self.n, self.length, self.dt, self.omega)

    @property
    def equilibrium_model(self) -> EquilibriumModel:
        return EquilibriumModel(self.variant, self.spec)

    @property
    def sampling_policy(self):
        return parse_sampling(self.sampling)

    @property
    def scaled(self) -> bool:
        return self.norm == 'scaled'


PRESETS: Dict[str, Dict] = {
    'exp1': {},
    'exp1-cr': {'method': 'cr', 'basis_orders': ()},
    'exp1-density': {'model': EquilibriumVariant.DENSITY_ONLY_1D.value},
    'exp2': {'model': EquilibriumVariant.DENSITY_MOMENTUM_2D.value, 'basis_orders': (1, 2, 3)},
}


def preset_config(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return ExperimentConfig(preset=name, **{**PRESETS[name], **overrides})


def _parse_value(key: str, text: str):
    kind = {f.name: f.type for f in fields(ExperimentConfig)}[key]
    text = text.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is bool:
            lowered = text.lower()
            if lowered not in ('1', '0', 'true', 'false', 'yes', 'no', 'on', 'off'):
                raise ValueError(text)
            return lowered in ('1', 'true', 'yes', 'on')
        if kind == Tuple[int, ...]:
            return tuple(int(part) for part in text.split(',') if part.strip())
    except ValueError as exc:
        raise ConfigError(f"Bad value for {key}: {text!r}") from exc
    return text


def load_config(path=None, overrides: Optional[Dict] = None) -> ExperimentConfig:
    """
    Build a config from a preset, an optional key = value file and explicit
    overrides. File keys win over the preset, overrides win over the file.
    """
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        for key, raw in dotenv_values(path).items():
            if key not in known:
                raise ConfigError(f"Unknown config key {key!r} in {path}")
            if raw is None:
                raise ConfigError(f"Config key {key!r} in {path} has no value")
            values[key] = _parse_value(key, raw)

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"Unknown config key {key!r}")
        values[key] = _parse_value(key, value) if isinstance(value, str) else value

    preset = values.pop('preset', 'exp1')
    return preset_config(preset, **values)


def initial_macro_fields(cfg: ExperimentConfig) -> MacroFields:
    """Gaussian density bump on a background, sine velocity per axis"""
    spec = cfg.spec
    half = cfg.length / 2.0
    coords = grid_coordinates(spec)
    if spec.dimension == 1:
        (x,) = coords
        rho = np.exp(-(x - half) ** 2) + 0.1
    else:
        x, y = coords
        rho = np.exp(-(x - half) ** 2 - (y - half) ** 2) + 0.4
    if cfg.variant is EquilibriumVariant.DENSITY_ONLY_1D:
        return MacroFields(spec, rho)
    velocity = [0.03 * np.sin(2.0 * np.pi * axis / cfg.length) for axis in coords]
    return MacroFields(spec, rho, tuple(rho * u for u in velocity))


def make_reference(cfg: ExperimentConfig) -> DistributionField:
    model = cfg.equilibrium_model
    start = equilibrium(model, initial_macro_fields(cfg))
    logger.info("Running %d %s steps for the reference state", cfg.k_ref, model.variant.value)
    return advance(model, start, cfg.k_ref)


def _cache_name(cfg: ExperimentConfig) -> str:
    return (f"reference_{cfg.model}_n{cfg.n}_L{cfg.length:g}_dt{cfg.dt:g}"
            f"_w{cfg.omega:g}_K{cfg.k_ref}.pkl")


def load_or_make_reference(cfg: ExperimentConfig, cache_dir) -> DistributionField:
    """Pickle cache of f_c keyed by model, lattice and step count"""
    path = os.path.join(cache_dir, _cache_name(cfg))
    if os.path.exists(path):
        click.echo(f"📂 Loading reference state from {path}...")
        with open(path, 'rb') as f:
            reference = pickle.load(f)
        if isinstance(reference, DistributionField) and reference.spec == cfg.spec:
            return reference
        logger.warning("Cached reference %s does not match the config, rebuilding", path)

    reference = make_reference(cfg)
    os.makedirs(cache_dir, exist_ok=True)
    click.echo(f"💾 Saving reference state to {path}...")
    with open(path, 'wb') as f:
        pickle.dump(reference, f)
    return reference


def restrict(f: DistributionField, model: EquilibriumModel) -> MacroFields:
    return conserved_moments(model, f)


def norm2(f, g, per_velocity: bool = False, scaled: bool = False):
    """
    Euclidean norm of f - g over all (velocity, site) entries, or one norm
    per velocity over the sites. ``scaled`` divides by sqrt(entry count).
    """
    a = f.values if isinstance(f, DistributionField) else np.asarray(f, dtype=float)
    b = g.values if isinstance(g, DistributionField) else np.asarray(g, dtype=float)
    if a.shape != b.shape:
        raise StructuralError(f"Cannot compare fields of shape {a.shape} and {b.shape}")
    diff = (a - b).reshape(a.shape[0], -1)
    if per_velocity:
        norms = np.sqrt(np.sum(diff ** 2, axis=1))
        return list(norms / np.sqrt(diff.shape[1])) if scaled else list(norms)
    total = float(np.sqrt(np.sum(diff ** 2)))
    return total / np.sqrt(diff.size) if scaled else total


@dataclass
class ExperimentReport:
    experiment: str
    rows: List[Dict] = field(default_factory=list)

    def add_cell(self, basis: str, order_m, errors: Dict[str, float], report=None,
                 basis_order: Optional[int] = None, converged: Optional[bool] = None):
        stats = report.as_row() if report is not None else {
            'iters': 0, 'residual': float('nan'), 'converged': False, 'cond': float('nan')}
        if converged is not None:
            stats['converged'] = converged
        for velocity, error in errors.items():
            row = {'experiment': self.experiment, 'basis': basis, 'order_m': order_m,
                   'velocity': velocity, 'error': error}
            row.update(stats)
            row['basis_order'] = basis_order
            self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=COLUMNS)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def all_converged(self) -> bool:
        return all(bool(row['converged']) for row in self.rows)

    def error(self, basis_order=None, order_m=None, velocity='all') -> float:
        """Look up one cell; basis_order None with order_m None is the equilibrium baseline"""
        for row in self.rows:
            if (row['basis_order'] == basis_order and row['order_m'] == order_m
                    and row['velocity'] == velocity):
                return row['error']
        raise KeyError((basis_order, order_m, velocity))


def _errors(cfg: ExperimentConfig, f: DistributionField, reference: DistributionField) -> Dict[str, float]:
    if cfg.spec.dimension == 1:
        return {'all': norm2(f, reference, scaled=cfg.scaled)}
    per_velocity = norm2(f, reference, per_velocity=True, scaled=cfg.scaled)
    return {f'v{i}': float(e) for i, e in enumerate(per_velocity)}


def _failed(cfg: ExperimentConfig) -> Dict[str, float]:
    labels = ['all'] if cfg.spec.dimension == 1 else [f'v{i}' for i in range(cfg.spec.q)]
    return {label: float('nan') for label in labels}


def _run_nce(cfg, model, macro, reference, report):
    for order in cfg.basis_orders:
        basis = ExpansionBasis.for_model(model, order, cfg.include_cross_terms)
        click.echo(f"🧪 Basis order {order}: {basis.describe()} ({model.spec.q * len(basis)} unknowns)")
        try:
            base = HContext.build(model, basis, macro, cfg.orders_m[0] if cfg.orders_m else 0,
                                  cfg.sampling_policy, cfg.stencil_order)
        except LiftingError as exc:
            click.echo(f"❌ Cannot set up basis order {order}: {exc}")
            logger.warning("Basis order %d skipped: %s", order, exc)
            for m in cfg.orders_m:
                report.add_cell(basis.describe(), m, _failed(cfg), basis_order=order)
            continue

        for m in cfg.orders_m:
            ctx = replace(base, m=SmoothnessOrder(m))
            try:
                theta, newton = solve_coefficients(ctx)
                errors = _errors(cfg, ctx.lift(theta), reference)
            except LiftingError as exc:
                click.echo(f"   ❌ m={m}: {exc}")
                logger.warning("Cell basis=%d m=%d failed: %s", order, m, exc)
                newton = exc.report if isinstance(exc, ConvergenceError) else None
                report.add_cell(basis.describe(), m, _failed(cfg), newton, basis_order=order, converged=False)
                continue
            report.add_cell(basis.describe(), m, errors, newton, basis_order=order)
            click.echo(f"   ✅ m={m}: error {_format_errors(errors)} ({newton.iterations} iteration(s))")


def _run_cr(cfg, model, macro, reference, report):
    unknowns = model.spec.q * model.spec.site_count
    click.echo(f"🧪 Full-state Constrained Runs: Jacobian {unknowns}x{unknowns}")
    for m in cfg.orders_m:
        try:
            f, newton = newton_full_state(model, macro, m)
            errors = _errors(cfg, f, reference)
        except LiftingError as exc:
            click.echo(f"   ❌ m={m}: {exc}")
            logger.warning("Full-state CR m=%d failed: %s", m, exc)
            newton = exc.report if isinstance(exc, ConvergenceError) else None
            report.add_cell('full-state CR', m, _failed(cfg), newton, converged=False)
            continue
        report.add_cell('full-state CR', m, errors, newton)
        click.echo(f"   ✅ m={m}: error {_format_errors(errors)} ({newton.iterations} iteration(s))")


def _format_errors(errors: Dict[str, float]) -> str:
    return ', '.join(f"{label}={value:.4e}" for label, value in errors.items())


def run_table(cfg: ExperimentConfig, reference: Optional[DistributionField] = None) -> ExperimentReport:
    """
    Every (basis, m) cell of the config against the reference state. Failed
    cells are recorded with converged=False and the run goes on.
    """
    model = cfg.equilibrium_model
    if reference is None:
        reference = make_reference(cfg)
    elif reference.spec != model.spec:
        raise StructuralError("Reference state does not live on the configured lattice")
    macro = restrict(reference, model)
    report = ExperimentReport(cfg.preset)

    baseline = _errors(cfg, equilibrium(model, macro), reference)
    report.add_cell('feq', None, baseline, converged=True)
    click.echo(f"📊 Equilibrium lift: error {_format_errors(baseline)}")

    if cfg.method == 'cr':
        _run_cr(cfg, model, macro, reference, report)
    else:
        _run_nce(cfg, model, macro, reference, report)
    return report


@dataclass(frozen=True)
class DiffusionCheck:
    predicted: float
    fitted: float

    @property
    def relative_error(self) -> float:
        return abs(self.fitted - self.predicted) / abs(self.predicted)

    @property
    def passed(self) -> bool:
        return self.relative_error <= DIFFUSION_TOLERANCE

    def as_dict(self):
        return {**asdict(self), 'relative_error': self.relative_error}


def diffusion_check(spec: LatticeSpec, steps: int = 500, amplitude: float = 0.01,
                    skip: int = 10) -> DiffusionCheck:
    """
    Decay rate of a sine density mode under the density-only D1Q3 model,
    compared with the diffusion coefficient (2 - omega) / (3 omega) dx^2 / dt.
    The first ``skip`` steps are left out while the non-conserved moments relax.
    """
    if steps <= skip + 1:
        raise StructuralError(f"Need more than {skip + 1} steps to fit a decay rate, got {steps}")
    model = EquilibriumModel.density_only_1d(spec)
    (x,) = grid_coordinates(spec)
    wavenumber = 2.0 * np.pi / spec.length
    rho = 1.0 + amplitude * np.sin(wavenumber * x)
    f = equilibrium(model, MacroFields(spec, rho))

    amplitudes = []
    for _ in range(steps + 1):
        amplitudes.append(np.abs(np.fft.rfft(f.values.sum(axis=0))[1]))
        f = bgk_step(model, f)
    times = np.arange(steps + 1) * spec.dt
    slope, _ = np.polyfit(times[skip:], np.log(amplitudes[skip:]), 1)
    fitted = -slope / wavenumber ** 2
    predicted = diffusion_coefficient(spec)
    logger.info("Diffusion check: predicted D=%.6f, fitted D=%.6f", predicted, fitted)
    return DiffusionCheck(predicted=predicted, fitted=float(fitted))
