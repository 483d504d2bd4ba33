#!/usr/bin/env python3
"""
Command-line entry point for the LOCC discrimination compiler
"""

import json
import logging
import sys
from functools import wraps

import click

from canonical import PreconditionError, canonicalize
from config import get_config
from models import read_protocol, write_protocol
from protocols import (
    STRATEGIES,
    ProtocolValidationError,
    compile as compile_protocol,
    local_projection_probability,
    validate_protocol,
)
from simulate import (
    binomial_band,
    check_optimality,
    evaluate_exact,
    run_shots,
)
from statespace import (
    PartySpace,
    random_pair,
    read_state_pair,
    to_json_text,
    write_state_pair,
)

logger = logging.getLogger('locc')

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

# Errors that mean the inputs themselves are unusable
INPUT_ERRORS = (ValueError, OSError)


def _exit_on_input_error(func):
    """Map input and parse errors to exit status 2 with a message on stderr"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (click.exceptions.Exit, click.ClickException):
            raise
        except INPUT_ERRORS as e:
            logger.error(f"{type(e).__name__}: {e}")
            sys.exit(EXIT_USAGE)
    return wrapper


def _parse_dims(ctx, param, value):
    try:
        dims = tuple(int(d) for d in value.split(','))
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")
    if not dims or any(d < 1 for d in dims):
        raise click.BadParameter("every dimension must be >= 1")
    return dims


def _write_text(path: str, text: str) -> None:
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(text)


def tol_option(func):
    """--tol shared by every numeric command"""
    return click.option('--tol', type=click.FloatRange(min=0.0, min_open=True), default=None,
                        help='Optimality tolerance (default from VERIFY_TOLERANCE).')(func)


@click.group()
@click.option('-v', '--verbose', is_flag=True, help='Log solver detail to stderr.')
def cli(verbose):
    """Compile and check optimal LOCC protocols for telling two pure states apart."""
    level = logging.DEBUG if verbose else getattr(logging, get_config().LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format='%(levelname)s %(name)s: %(message)s')


@cli.command('random')
@click.option('--dims', required=True, callback=_parse_dims, help='Local dimensions, e.g. 2,2.')
@click.option('--overlap', required=True, type=click.FloatRange(0.0, 1.0), help='Target |<phi|psi>|.')
@click.option('--seed', type=click.IntRange(min=0), default=None, help='Random seed.')
@click.option('-o', '--out', required=True, type=click.Path(dir_okay=False), help='State-pair file.')
@_exit_on_input_error
def random_cmd(dims, overlap, seed, out):
    """Write a Haar-random state pair with a given overlap magnitude."""
    seed = get_config().DEFAULT_SEED if seed is None else seed
    phi, psi = random_pair(PartySpace(dims), overlap, seed)
    write_state_pair(out, phi, psi)


@cli.command('compile')
@click.argument('states', type=click.Path(exists=True, dir_okay=False))
@click.option('-o', '--out', required=True, type=click.Path(dir_okay=False), help='Protocol file.')
@click.option('--dump-canonical', type=click.Path(dir_okay=False), default=None,
              help='Also write the canonical form across party 0.')
@click.option('--strategy', type=click.Choice(STRATEGIES), default='optimal', show_default=True)
@tol_option
@_exit_on_input_error
def compile_cmd(states, out, dump_canonical, strategy, tol):
    """Compile a protocol file from a state-pair file.

    An optimal protocol that misses the bound by more than --tol is still
    written, and the command exits with status 1.
    """
    tol = get_config().VERIFY_TOLERANCE if tol is None else tol
    phi, psi = read_state_pair(states)
    try:
        tree = compile_protocol(phi, psi, strategy=strategy)
    except ProtocolValidationError as e:
        for failure in (e.report.failures() if e.report else []):
            click.echo(failure, err=True)
        logger.error(f"Compilation failed validation: {e}")
        sys.exit(EXIT_FAILED)
    write_protocol(out, tree)
    verdict = check_optimality(evaluate_exact(tree, phi, psi), tol)
    logger.info(f"Compiled protocol: residual {verdict.optimality_residual:.3e}, "
                f"error {verdict.max_error:.3e}")

    if dump_canonical:
        try:
            form = canonicalize(phi, psi, 0)
        except PreconditionError as e:
            logger.warning(f"No canonical form to dump: {e}")
        else:
            data = form.to_dict()
            data['local_projection_probability'] = local_projection_probability(form)
            _write_text(dump_canonical, to_json_text(data))
            logger.info(f"Wrote canonical form to {dump_canonical}")

    if strategy == 'optimal' and not verdict.passed:
        for reason in verdict.reasons:
            click.echo(f"FAIL: {reason}", err=True)
        sys.exit(EXIT_FAILED)


@cli.command('verify')
@click.argument('states', type=click.Path(exists=True, dir_okay=False))
@click.argument('protocol', type=click.Path(exists=True, dir_okay=False))
@tol_option
@click.option('--json', 'json_path', type=click.Path(dir_okay=False), default=None,
              help='Also write the report as JSON.')
@_exit_on_input_error
def verify_cmd(states, protocol, tol, json_path):
    """Evaluate a protocol exactly and check it reaches 1 - |<phi|psi>|."""
    tol = get_config().VERIFY_TOLERANCE if tol is None else tol
    phi, psi = read_state_pair(states)
    tree = read_protocol(protocol)
    structure = validate_protocol(tree, phi.dims)
    report = evaluate_exact(tree, phi, psi)
    verdict = check_optimality(report, tol)
    passed = verdict.passed and structure.passed

    click.echo(report.format_table())
    click.echo('')
    for failure in structure.failures() + verdict.reasons:
        click.echo(f"FAIL: {failure}")
    click.echo('PASS' if passed else 'FAIL')

    if json_path:
        payload = {'report': report.to_dict(), 'optimality': verdict.to_dict(),
                   'validation': structure.to_dict(), 'passed': passed}
        _write_text(json_path, to_json_text(payload))

    logger.info(f"Verification {'passed' if passed else 'failed'} "
                f"(residual {verdict.optimality_residual:.3e}, error {verdict.max_error:.3e})")
    sys.exit(EXIT_OK if passed else EXIT_FAILED)


@cli.command('simulate')
@click.argument('states', type=click.Path(exists=True, dir_okay=False))
@click.argument('protocol', type=click.Path(exists=True, dir_okay=False))
@click.option('--hypothesis', type=click.Choice(['phi', 'psi']), default='phi', show_default=True)
@click.option('--shots', type=click.IntRange(min=1), default=None, help='Number of runs.')
@click.option('--seed', type=click.IntRange(min=0), default=None, help='Random seed.')
@click.option('--dispatch', type=click.Choice(['local', 'celery']), default=None,
              help='Sample in process or on Celery workers.')
@tol_option
@_exit_on_input_error
def simulate_cmd(states, protocol, hypothesis, shots, seed, dispatch, tol):
    """Sample protocol runs and compare with the exact probabilities."""
    settings = get_config()
    shots = settings.DEFAULT_SHOTS if shots is None else shots
    seed = settings.DEFAULT_SEED if seed is None else seed
    tol = settings.VERIFY_TOLERANCE if tol is None else tol
    phi, psi = read_state_pair(states)
    tree = read_protocol(protocol)
    report = evaluate_exact(tree, phi, psi)
    counts = run_shots(tree, phi if hypothesis == 'phi' else psi, shots, seed, dispatch=dispatch)

    exact = {
        'phi': report.p_conclusive_phi if hypothesis == 'phi' else report.p_error_psi,
        'psi': report.p_error_phi if hypothesis == 'phi' else report.p_conclusive_psi,
        'inconclusive': report.p_inconclusive_phi if hypothesis == 'phi' else report.p_inconclusive_psi,
    }
    click.echo(f"prepared {hypothesis}, {shots} shots, seed {seed}")
    click.echo(f"{'verdict':16}{'count':>10}{'fraction':>14}{'exact':>14}{'band':>14}")
    for verdict in ('phi', 'psi', 'inconclusive'):
        click.echo(f"{verdict:16}{counts.counts.get(verdict, 0):>10}{counts.fraction(verdict):>14.6f}"
                   f"{exact[verdict]:>14.6f}{binomial_band(exact[verdict], shots):>14.6f}")
    if counts.aborted:
        click.echo(f"aborted {counts.aborted}")
    optimality = check_optimality(report, tol)
    click.echo(f"exact check at tol {tol:g}: {'PASS' if optimality.passed else 'FAIL'}")
    click.echo(json.dumps(counts.to_dict(), sort_keys=True))


@cli.command('worker')
@click.option('--loglevel', default='info', show_default=True)
def worker_cmd(loglevel):
    """Run a Celery worker for distributed shot sampling."""
    from celery_app import celery
    celery.worker_main(argv=['worker', f'--loglevel={loglevel}'])


def main():
    """Main entry point"""
    cli(prog_name='locc')


if __name__ == '__main__':
    main()
