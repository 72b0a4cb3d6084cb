# -*- coding: utf-8 -*-
import logging

import click

from .predict import predict
from .spectrum import spectrum
from .experiments import fig1, convrate, phase


@click.group()
@click.option(
    '-d', '--debug-mode', is_flag=True,
    help='enable debug mode'
)
@click.option(
    '-l', '--log-file', type=click.Path(exists=False),
    default='fim-alchemy.log', show_default=True, help='log file'
)
def fim_alchemy(debug_mode, log_file):
    """
    fim-alchemy command line suite
    """
    level = logging.DEBUG if debug_mode else logging.WARNING
    logging.basicConfig(level=level, filename=log_file)


fim_alchemy.command('predict')(predict)
fim_alchemy.command('spectrum')(spectrum)
fim_alchemy.command('fig1')(fig1)
fim_alchemy.command('convrate')(convrate)
fim_alchemy.command('phase')(phase)
