# -*- coding: utf-8 -*-
import logging

import click

from ..exceptions import FimAlchemyError
from ..experiments import predict_only, own_regime_error, write_predictions
from .helpers import (
    common_options,
    load_config,
    to_click_exception,
    exception_from_record,
)


logger = logging.getLogger('fim-alchemy')


@common_options
def predict(config_data, master_seed, out, threads, profile):
    """
    mean-field predictions for every width of the grid, no network is built
    """
    try:
        config = load_config(
            config_data, 'predict_only',
            master_seed=master_seed, out=out, threads=threads, profile=profile
        )
        predictions = predict_only(config)
        file = write_predictions(predictions, config, 'predictions')
        print(f'Predictions were saved to {file}.')
        record = own_regime_error(predictions, config.spec)
        if record is not None:
            raise exception_from_record(record)
    except click.ClickException:
        raise
    except FimAlchemyError as exc:
        logger.exception(exc)
        raise to_click_exception(exc)
    except Exception as exc:
        logger.exception(exc)
        raise click.UsageError('Unknown error occurred, refer to log file for details.')
