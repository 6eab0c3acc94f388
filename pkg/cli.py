#!/usr/bin/env python3
"""
Command line entry point.

    python cli.py table --preset exp1 --out table1.csv
    python cli.py table --preset exp1-cr
    python cli.py reference --preset exp2 --out fc.csv
    python cli.py lift --basis-order 2 --order-m 4 --out lifted.csv
    python cli.py diffusion-check
"""

import logging
import os
import sys

import click
from dotenv import load_dotenv

from errors import ConvergenceError, LiftingError
from harness import (
    PRESETS,
    diffusion_check,
    load_config,
    load_or_make_reference,
    make_reference,
    norm2,
    restrict,
    run_table,
)
from lattice import write_field_csv
from nce_expansion import ExpansionBasis, write_coefficients_csv
from nce_solver import HContext, solve_coefficients

CONFIG_ENV = 'LBM_LIFTING_CONFIG'
EXIT_FAILED = 1
EXIT_NOT_CONVERGED = 2


def _config_options(fn):
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                     help=f'key = value config file (default: ${CONFIG_ENV})'),
        click.option('--preset', type=click.Choice(sorted(PRESETS)), default=None),
        click.option('--stencil-order', type=click.Choice(['2', '4']), default=None),
        click.option('--sampling', default=None, help="'all' or 'subset:i,j,...'"),
        click.option('--norm', type=click.Choice(['raw', 'scaled']), default=None),
        click.option('--cache-dir', type=click.Path(file_okay=False), default=None,
                     help='Reuse pickled reference states from this directory'),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _load(config_path, preset, stencil_order, sampling, norm):
    config_path = config_path or os.environ.get(CONFIG_ENV)
    overrides = {
        'preset': preset,
        'stencil_order': int(stencil_order) if stencil_order else None,
        'sampling': sampling,
        'norm': norm,
    }
    return load_config(config_path, overrides)


def _reference(cfg, cache_dir):
    if cache_dir:
        return load_or_make_reference(cfg, cache_dir)
    return make_reference(cfg)


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Log solver iterations')
def cli(verbose):
    """Lifting operators for lattice Boltzmann models"""
    load_dotenv()
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format='%(asctime)s %(name)s %(levelname)s: %(message)s',
    )


@cli.command()
@_config_options
@click.option('--out', type=click.Path(dir_okay=False), required=True)
def reference(config_path, preset, stencil_order, sampling, norm, cache_dir, out):
    """Write the reference state f_c as CSV"""
    try:
        cfg = _load(config_path, preset, stencil_order, sampling, norm)
        click.echo(f"🧪 Running {cfg.k_ref} {cfg.model} steps (n={cfg.n})...")
        f_c = _reference(cfg, cache_dir)
        write_field_csv(f_c, out)
    except LiftingError as exc:
        click.echo(f"❌ {exc}", err=True)
        sys.exit(EXIT_FAILED)
    click.echo(f"💾 Reference state saved to {out}")


@cli.command()
@_config_options
@click.option('--basis-order', type=click.IntRange(1, 4), default=2, show_default=True)
@click.option('--order-m', type=click.IntRange(0, 6), default=4, show_default=True)
@click.option('--out', type=click.Path(dir_okay=False), required=True)
@click.option('--coefficients', type=click.Path(dir_okay=False), default=None,
              help='Also dump the trained coefficients')
def lift(config_path, preset, stencil_order, sampling, norm, cache_dir,
         basis_order, order_m, out, coefficients):
    """Train coefficients on restrict(f_c), lift and dump the field"""
    try:
        cfg = _load(config_path, preset, stencil_order, sampling, norm)
        model = cfg.equilibrium_model
        f_c = _reference(cfg, cache_dir)
        macro = restrict(f_c, model)
        basis = ExpansionBasis.for_model(model, basis_order, cfg.include_cross_terms)
        ctx = HContext.build(model, basis, macro, order_m, cfg.sampling_policy, cfg.stencil_order)
        theta, report = solve_coefficients(ctx)
        lifted = ctx.lift(theta)
        write_field_csv(lifted, out)
        if coefficients:
            write_coefficients_csv(theta, coefficients)
    except ConvergenceError as exc:
        click.echo(f"❌ {exc}", err=True)
        sys.exit(EXIT_NOT_CONVERGED)
    except LiftingError as exc:
        click.echo(f"❌ {exc}", err=True)
        sys.exit(EXIT_FAILED)

    click.echo(f"✅ Converged in {report.iterations} iteration(s), residual {report.residual:.3e}, "
               f"cond {report.cond:.3e}")
    click.echo(f"📊 Error against f_c: {norm2(lifted, f_c, scaled=cfg.scaled):.4e}")
    click.echo(f"💾 Lifted state saved to {out}")
    if coefficients:
        click.echo(f"💾 Coefficients saved to {coefficients}")


@cli.command('table')
@_config_options
@click.option('--out', type=click.Path(dir_okay=False), default=None,
              help='CSV path (default: <preset>.csv)')
def table(config_path, preset, stencil_order, sampling, norm, cache_dir, out):
    """Run a restriction-lifting table"""
    try:
        cfg = _load(config_path, preset, stencil_order, sampling, norm)
        click.echo(f"{'=' * 60}\nTABLE {cfg.preset.upper()}: {cfg.model}, n={cfg.n}, method={cfg.method}")
        report = run_table(cfg, _reference(cfg, cache_dir))
    except LiftingError as exc:
        click.echo(f"❌ {exc}", err=True)
        sys.exit(EXIT_FAILED)

    out = out or f"{cfg.preset}.csv"
    report.write_csv(out)
    click.echo(f"💾 Table saved to {out}")
    if not report.all_converged():
        click.echo("❌ Some cells did not converge", err=True)
        sys.exit(EXIT_NOT_CONVERGED)
    click.echo("✅ All cells converged")


@cli.command('diffusion-check')
@_config_options
@click.option('--steps', type=click.IntRange(20, None), default=500, show_default=True)
def diffusion_check_command(config_path, preset, stencil_order, sampling, norm, cache_dir, steps):
    """Compare the fitted decay of a sine density mode with the predicted diffusivity"""
    try:
        cfg = _load(config_path, preset, stencil_order, sampling, norm)
        if cfg.spec.dimension != 1:
            click.echo("❌ The diffusion check runs on a D1Q3 lattice", err=True)
            sys.exit(EXIT_FAILED)
        result = diffusion_check(cfg.spec, steps=steps)
    except LiftingError as exc:
        click.echo(f"❌ {exc}", err=True)
        sys.exit(EXIT_FAILED)
    click.echo(f"📊 Predicted D = {result.predicted:.6f}")
    click.echo(f"📊 Fitted D    = {result.fitted:.6f}")
    if not result.passed:
        click.echo(f"❌ Relative deviation {result.relative_error:.3%}", err=True)
        sys.exit(EXIT_FAILED)
    click.echo(f"✅ Relative deviation {result.relative_error:.3%}")


if __name__ == '__main__':
    cli()
