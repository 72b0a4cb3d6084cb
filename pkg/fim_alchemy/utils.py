# -*- coding: utf-8 -*-
import logging

import numpy as np
from scipy import stats

from .exceptions import ConfigError, NumericalError


logger = logging.getLogger('fim-alchemy')


NORM_MODES = [
    'none',
    'bn_last_meansub',
    'bn_last_full',
    'bn_middle',
    'layernorm',
]
DEFAULT_QUADRATURE_ORDER = 100
DEFAULT_MC_SAMPLES = 200000
DEFAULT_EXPLOSION_THRESHOLD = 1e3
DENSE_EIGEN_LIMIT = 4096

# substream purposes, third entry of every spawn key
PURPOSE_WEIGHTS = 0
PURPOSE_BIASES = 1
PURPOSE_INPUTS = 2
PURPOSE_MONTE_CARLO = 3
PURPOSE_POWER_ITERATION = 4
PURPOSE_TEACHER = 5
PURPOSE_MEMBER = 6


def substream(seed, *key):
    """
    independent random generator for one purpose of one seed

    The counter scheme is SeedSequence(seed, spawn_key=key): the same
    (seed, key) always yields the same stream, and distinct keys yield
    statistically independent streams.

    Args:
        seed: non-negative integer master or member seed
        key: tuple of non-negative integers, e.g. (layer, purpose)
    Returns:
        numpy.random.Generator
    """
    if seed is None or int(seed) < 0:
        raise ConfigError(f'seed must be a non-negative integer, got {seed}')
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(sequence)


def derive_seed(seed, *key):
    """derive a 63-bit integer seed for a sub-experiment, e.g. (grid index, member)"""
    if seed is None or int(seed) < 0:
        raise ConfigError(f'seed must be a non-negative integer, got {seed}')
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    low, high = sequence.generate_state(2, dtype=np.uint32)
    return (int(high) << 31) ^ int(low)


def check_norm_mode(norm_mode):
    if norm_mode not in NORM_MODES:
        raise ConfigError(f'unknown normalization mode {norm_mode}, choose from {NORM_MODES}')
    return norm_mode


def check_layernorm_widths(widths):
    """layer norm standardizes over units, every hidden layer needs at least 2"""
    narrow = [l for l, width in enumerate(widths, 1) if width < 2]
    if narrow:
        raise ConfigError(f'layer norm needs hidden widths >= 2, layers {narrow} are narrower')
    return widths


def check_finite(array, what='array'):
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise NumericalError(f'non-finite entries found in {what}')
    return array


def log_grid(start, stop, per_decade):
    """log-spaced grid with `per_decade` points per decade, both ends included"""
    if start <= 0 or stop <= start:
        raise ConfigError(f'invalid log grid [{start}, {stop}]')
    if per_decade < 1:
        raise ConfigError(f'points per decade must be >= 1, got {per_decade}')
    count = int(round(np.log10(stop / start) * per_decade)) + 1
    return np.logspace(np.log10(start), np.log10(stop), count)


def loglog_slope(x, y):
    """
    least-squares slope of log(y) against log(x)

    Returns:
        (slope, stderr)
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.any(x <= 0) or np.any(y <= 0):
        raise NumericalError('log-log fit needs at least two positive points')
    fit = stats.linregress(np.log(x), np.log(y))
    return float(fit.slope), float(fit.stderr)


def nan_to_none(values):
    return [None if (v is None or not np.isfinite(v)) else float(v) for v in values]


def none_to_nan(values):
    return np.array([np.nan if v is None else float(v) for v in values])
