# -*- coding: utf-8 -*-
import os
import json
import codecs
import logging

import click

from ..parsers import ExperimentConfigParser
from ..experiments import PROFILES
from ..exceptions import (
    ConfigError,
    DegenerateRegimeError,
    NumericalError,
)


logger = logging.getLogger('fim-alchemy')


class DegenerateRegimeException(click.ClickException):
    exit_code = 3


class NumericalException(click.ClickException):
    exit_code = 4


def to_click_exception(exc):
    """click exception carrying the exit code of a package error"""
    if isinstance(exc, DegenerateRegimeError):
        return DegenerateRegimeException(str(exc))
    if isinstance(exc, NumericalError):
        return NumericalException(str(exc))
    return click.UsageError(str(exc))


def exception_from_record(record):
    """click exception for an error record of predict_only"""
    message = f'{record["type"]}: {record["message"]}'
    if record['exit_code'] == 3:
        return DegenerateRegimeException(message)
    if record['exit_code'] == 4:
        return NumericalException(message)
    return click.UsageError(message)


def config_file_checker(ctx, param, value):
    if value is None:
        return None
    if not os.path.isfile(value):
        raise click.UsageError(f'Config file {value} not found')
    try:
        with codecs.open(value, encoding='utf-8') as fp:
            data = json.load(fp)
    except ValueError:
        raise click.UsageError(f"Can't parse config file {value}")
    if not isinstance(data, dict):
        raise click.UsageError(f'Config file {value} must hold a JSON object')
    return data


def load_config(data, kind, **overrides):
    """
    ExperimentConfig of `kind` from a config object and command-line overrides

    Args:
        data: parsed config file
        kind: experiment kind of the subcommand
        overrides: master_seed, out, threads, profile, trials; None keeps the file's value
    """
    data = dict(data)
    if data.setdefault('kind', kind) != kind:
        raise click.UsageError(f'Config file describes {data["kind"]}, not {kind}')
    try:
        return ExperimentConfigParser.parse_dict(data, **overrides)
    except ConfigError as exc:
        logger.exception(exc)
        raise click.UsageError(f'Invalid config: {exc}')


def common_options(func):
    """--config plus the flags every experiment shares"""
    options = [
        click.option(
            '-c', '--config', 'config_data',
            required=True,
            callback=config_file_checker,
            help='JSON config file, keys mirror ExperimentConfig, unknown keys are rejected.'
        ),
        click.option(
            '-s', '--seed', 'master_seed',
            type=click.IntRange(min=0),
            help='master seed, overrides the config file.'
        ),
        click.option(
            '-o', '--out',
            type=click.Path(file_okay=False),
            help='output directory, overrides the config file.'
        ),
        click.option(
            '-t', '--threads',
            type=click.IntRange(min=1),
            help='worker threads, results do not depend on it.'
        ),
        click.option(
            '-p', '--profile',
            type=click.Choice(sorted(PROFILES)),
            help='default grids and ensemble sizes, desk when neither file nor flag sets it.'
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func
