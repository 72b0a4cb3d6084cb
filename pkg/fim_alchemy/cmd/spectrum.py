# -*- coding: utf-8 -*-
import logging

import click

from ..exceptions import FimAlchemyError
from ..experiments import spectrum_once, write_predictions
from .helpers import (
    common_options,
    load_config,
    to_click_exception,
)


logger = logging.getLogger('fim-alchemy')


@common_options
def spectrum(config_data, master_seed, out, threads, profile):
    """
    spectrum and top-eigenvector alignment of one random network
    """
    try:
        config = load_config(
            config_data, 'spectrum_once',
            master_seed=master_seed, out=out, threads=threads, profile=profile
        )
        result = spectrum_once(config)
        file = write_predictions(result, config, 'spectrum')
        stats = result['spectrum']
        print(f'lambda_max = {stats["lambda_max"]:.6g}, m_lambda = {stats["m_lambda"]:.6g}')
        print(f'Results were saved to {file}.')
    except click.ClickException:
        raise
    except FimAlchemyError as exc:
        logger.exception(exc)
        raise to_click_exception(exc)
    except Exception as exc:
        logger.exception(exc)
        raise click.UsageError('Unknown error occurred, refer to log file for details.')
