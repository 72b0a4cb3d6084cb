# -*- coding: utf-8 -*-
import logging

import click

from ..exceptions import FimAlchemyError
from ..experiments import (
    run_fig1,
    run_convrate,
    run_phase_diagram,
    write_results,
)
from .helpers import (
    common_options,
    load_config,
    to_click_exception,
)


logger = logging.getLogger('fim-alchemy')


def _report(files):
    for file in files:
        print(f'Results were saved to {file}.')


def _print_fit(fit):
    for name, values in fit.items():
        print(f'{name}: log-log slope {values["slope"]:.3f} +- {values["stderr"]:.3f}')


@common_options
def fig1(config_data, master_seed, out, threads, profile):
    """
    largest FIM eigenvalue against width with and without normalization
    """
    try:
        config = load_config(
            config_data, 'fig1_sharpness',
            master_seed=master_seed, out=out, threads=threads, profile=profile
        )
        result = run_fig1(config)
        _print_fit(result.fit)
        _report(write_results(result))
    except click.ClickException:
        raise
    except FimAlchemyError as exc:
        logger.exception(exc)
        raise to_click_exception(exc)
    except Exception as exc:
        logger.exception(exc)
        raise click.UsageError('Unknown error occurred, refer to log file for details.')


@common_options
def convrate(config_data, master_seed, out, threads, profile):
    """
    convergence rate of the backward order parameter over widths
    """
    try:
        config = load_config(
            config_data, 'convrate',
            master_seed=master_seed, out=out, threads=threads, profile=profile
        )
        result = run_convrate(config)
        _print_fit(result.fit)
        _report(write_results(result))
    except click.ClickException:
        raise
    except FimAlchemyError as exc:
        logger.exception(exc)
        raise to_click_exception(exc)
    except Exception as exc:
        logger.exception(exc)
        raise click.UsageError('Unknown error occurred, refer to log file for details.')


@common_options
@click.option(
    '-n', '--trials',
    type=click.IntRange(min=1),
    help='trials per (width, learning rate) cell, overrides the config file.'
)
def phase(config_data, master_seed, out, threads, profile, trials):
    """
    gradient-descent phase diagram over width and learning rate
    """
    try:
        config = load_config(
            config_data, 'phase_diagram',
            master_seed=master_seed, out=out, threads=threads, profile=profile, trials=trials
        )
        diagram = run_phase_diagram(config)
        for mode in config.modes:
            boundary = diagram.boundary(mode)
            text = ', '.join(f'M={M}: {eta:.4g}' for M, eta in sorted(boundary.items()))
            print(f'{mode} smallest exploding eta: {text}')
        _report(write_results(diagram))
    except click.ClickException:
        raise
    except FimAlchemyError as exc:
        logger.exception(exc)
        raise to_click_exception(exc)
    except Exception as exc:
        logger.exception(exc)
        raise click.UsageError('Unknown error occurred, refer to log file for details.')
