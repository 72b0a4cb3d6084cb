# -*- coding: utf-8 -*-
"""
Experiment orchestration: ensembles of random networks measured against the
mean-field predictions, gradient-descent phase diagrams, result files.
"""
import os
import json
import codecs
import logging
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
import scipy

from . import meanfield, netlab, fimlab
from .exceptions import (
    ConfigError,
    FimAlchemyError,
    DegenerateRegimeError,
    NumericalError,
)
from .utils import (
    NORM_MODES,
    DEFAULT_MC_SAMPLES,
    DEFAULT_EXPLOSION_THRESHOLD,
    PURPOSE_TEACHER,
    derive_seed,
    log_grid,
    loglog_slope,
    nan_to_none,
)


logger = logging.getLogger('fim-alchemy')


EXPERIMENT_KINDS = ['fig1_sharpness', 'convrate', 'phase_diagram', 'spectrum_once', 'predict_only']
PROFILES = {
    'desk': {
        'fig1_sharpness': {'M_grid': [64, 128, 256, 512], 'T_rule': 'M', 'ensembles': 20},
        'convrate': {'M_grid': [64, 256, 1024], 'T_rule': 100, 'ensembles': 100},
        'phase_diagram': {
            'M_grid': [64, 128, 256], 'T_rule': 1000, 'ensembles': 1, 'trials': 1, 'steps': 500,
            'eta_grid': {'start': 1e-4, 'stop': 1e1, 'per_decade': 40},
        },
        'spectrum_once': {'M_grid': [256], 'T_rule': 100, 'ensembles': 1},
        'predict_only': {'M_grid': [1000], 'T_rule': 'M', 'ensembles': 1},
    },
    'full': {
        'fig1_sharpness': {'M_grid': [64, 128, 256, 512, 1024, 2048, 4096], 'T_rule': 'M', 'ensembles': 100},
        'convrate': {'M_grid': [64, 128, 256, 512, 1024, 2048, 4096], 'T_rule': 100, 'ensembles': 100},
        'phase_diagram': {
            'M_grid': [64, 128, 256, 512, 1024, 2048], 'T_rule': 1000, 'ensembles': 1, 'trials': 5,
            'steps': 1000, 'eta_grid': {'start': 1e-4, 'stop': 1e1, 'per_decade': 40},
        },
        'spectrum_once': {'M_grid': [1024], 'T_rule': 100, 'ensembles': 1},
        'predict_only': {'M_grid': [1000], 'T_rule': 'M', 'ensembles': 1},
    },
}
DEFAULT_MODES = {
    'fig1_sharpness': ['none', 'bn_last_meansub'],
    'phase_diagram': ['none', 'bn_last_meansub'],
}
FIG1_COLUMNS = ['M', 'T', 'mode', 'ensemble_mean_lambda_max', 'ensemble_std', 'theory_value', 'theory_kind']
EXIT_CODES = {'config': 2, 'degenerate': 3, 'numerical': 4}


def resolve_T(rule, M):
    """sample count for width M under a T rule: 'M', an integer, or 'M/<rho>'"""
    if isinstance(rule, (int, np.integer)) and not isinstance(rule, bool):
        if rule < 1:
            raise ConfigError(f'fixed T must be >= 1, got {rule}')
        return int(rule)
    if isinstance(rule, str):
        text = rule.replace(' ', '')
        if text == 'M':
            return int(M)
        if text.startswith('M/'):
            try:
                rho = float(text[2:])
            except ValueError:
                raise ConfigError(f'invalid T rule {rule}')
            if not rho > 0:
                raise ConfigError(f'invalid T rule {rule}')
            return max(1, int(round(M / rho)))
        if text.isdigit():
            return resolve_T(int(text), M)
    raise ConfigError(f"invalid T rule {rule!r}, use 'M', an integer or 'M/<rho>'")


def error_record(exc):
    """structured description of a package error"""
    if isinstance(exc, DegenerateRegimeError):
        category = 'degenerate'
    elif isinstance(exc, NumericalError):
        category = 'numerical'
    else:
        category = 'config'
    return {
        'type': exc.__class__.__name__,
        'category': category,
        'exit_code': EXIT_CODES[category],
        'message': str(exc),
    }


class ExperimentConfig(object):
    def __init__(
        self, kind, spec, M_grid=None, T_rule=None, eta_grid=None, ensembles=None,
        steps=None, master_seed=0, out='results', threshold=DEFAULT_EXPLOSION_THRESHOLD,
        trials=None, threads=1, profile='desk', modes=None, mc_samples=DEFAULT_MC_SAMPLES,
        sigma_k=None, eta=None
    ):
        """
        Args:
            kind: one of EXPERIMENT_KINDS
            spec: NetSpec
            M_grid: widths, profile default when None
            T_rule: 'M', integer or 'M/<rho>', profile default when None
            eta_grid: {'start', 'stop', 'per_decade'} log-spaced learning rates
            ensembles: ensemble members per grid point
            steps: gradient-descent steps
            master_seed: seed every member seed is derived from
            out: output directory
            threshold: loss above which training counts as exploded
            trials: phase-diagram trials per cell
            threads: worker threads for ensemble members and cells
            profile: 'desk' or 'full' defaults
            modes: normalization modes to measure (fig1 and phase diagram)
            mc_samples: Monte Carlo samples of middle-layer batch-norm statistics
            sigma_k: measured last-layer deviations for predict_only
            eta: measured layer-norm statistics for predict_only
        """
        if kind not in EXPERIMENT_KINDS:
            raise ConfigError(f'unknown experiment {kind}, choose from {EXPERIMENT_KINDS}')
        if profile not in PROFILES:
            raise ConfigError(f'unknown profile {profile}, choose from {list(PROFILES)}')
        defaults = PROFILES[profile][kind]
        self.kind = kind
        self.spec = spec
        self.profile = profile
        self.M_grid = [int(m) for m in (defaults['M_grid'] if M_grid is None else M_grid)]
        self.T_rule = defaults['T_rule'] if T_rule is None else T_rule
        self.eta_grid = dict(defaults.get('eta_grid', {'start': 1e-4, 'stop': 1e1, 'per_decade': 40})
                             if eta_grid is None else eta_grid)
        self.ensembles = int(defaults['ensembles'] if ensembles is None else ensembles)
        self.steps = int(defaults.get('steps', 1000) if steps is None else steps)
        self.master_seed = int(master_seed)
        self.out = out
        self.threshold = float(threshold)
        self.trials = int(defaults.get('trials', 1) if trials is None else trials)
        self.threads = int(threads)
        self.modes = list(DEFAULT_MODES.get(kind, [spec.norm_mode]) if modes is None else modes)
        self.mc_samples = int(mc_samples)
        self.sigma_k = None if sigma_k is None else [float(s) for s in sigma_k]
        self.eta = None if eta is None else dict(eta)
        self._validate()

    def _validate(self):
        if not self.M_grid or any(m < 1 for m in self.M_grid):
            raise ConfigError('M grid must be a non-empty list of positive widths')
        for M in self.M_grid:
            resolve_T(self.T_rule, M)
        if self.ensembles < 1 or self.trials < 1:
            raise ConfigError('ensembles and trials must be >= 1')
        if self.steps < 0:
            raise ConfigError('steps must be >= 0')
        if not self.threshold > 0:
            raise ConfigError(f'explosion threshold must be positive, got {self.threshold}')
        if self.threads < 1:
            raise ConfigError('threads must be >= 1')
        if self.master_seed < 0:
            raise ConfigError('master seed must be non-negative')
        for mode in self.modes:
            if mode not in NORM_MODES:
                raise ConfigError(f'unknown normalization mode {mode}')
        if set(self.eta_grid) != {'start', 'stop', 'per_decade'}:
            raise ConfigError("eta grid needs exactly 'start', 'stop' and 'per_decade'")
        self.etas()

    def T_for(self, M):
        return resolve_T(self.T_rule, M)

    def etas(self):
        grid = self.eta_grid
        return log_grid(float(grid['start']), float(grid['stop']), int(grid['per_decade']))

    def member_seed(self, *key):
        return derive_seed(self.master_seed, *key)

    def replace(self, **changes):
        data = self.to_dict()
        data['spec'] = self.spec
        data.update(changes)
        return ExperimentConfig(**data)

    def __repr__(self):
        return f'ExperimentConfig<{self.kind}, {self.profile}>'

    def __eq__(self, other):
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            'kind': self.kind,
            'spec': self.spec.to_dict(),
            'M_grid': list(self.M_grid),
            'T_rule': self.T_rule,
            'eta_grid': dict(self.eta_grid),
            'ensembles': self.ensembles,
            'steps': self.steps,
            'master_seed': self.master_seed,
            'out': self.out,
            'threshold': self.threshold,
            'trials': self.trials,
            'threads': self.threads,
            'profile': self.profile,
            'modes': list(self.modes),
            'mc_samples': self.mc_samples,
            'sigma_k': self.sigma_k,
            'eta': self.eta,
        }


class EnsembleResult(object):
    def __init__(self, config, members, summary, fit=None, theory=None):
        """
        Args:
            config: ExperimentConfig
            members: DataFrame, one row per (grid point, mode, member) with its seed
            summary: DataFrame, one row per (grid point, mode)
            fit: log-log slopes, {name: {'slope': .., 'stderr': ..}}
            theory: JSON-able theory values the overlays were computed from
        """
        self.config = config
        self.members = members
        self.summary = summary
        self.fit = fit or {}
        self.theory = theory or {}

    @property
    def kind(self):
        return self.config.kind

    def __repr__(self):
        return f'EnsembleResult<{self.kind}, {len(self.members)} members>'


class PhaseDiagram(object):
    def __init__(self, config, cells, overlays):
        """
        Args:
            config: ExperimentConfig
            cells: DataFrame with one row per (mode, M, eta, trial): final and
                minimum loss, divergence and non-finite flags, member seed
            overlays: DataFrame with one row per (mode, M): measured lambda_max
                and the theoretical learning-rate boundary
        """
        self.config = config
        self.cells = cells
        self.overlays = overlays

    @property
    def kind(self):
        return self.config.kind

    def __repr__(self):
        return f'PhaseDiagram<{len(self.cells)} cells>'

    def loss_grid(self, mode):
        """final loss minimized over trials, M x eta"""
        table = self.cells[self.cells['mode'] == mode]
        return table.pivot_table(index='M', columns='eta', values='final_loss', aggfunc='min')

    def explosion_mask(self, mode):
        """cells where every trial exploded, M x eta"""
        table = self.cells[self.cells['mode'] == mode]
        return table.pivot_table(index='M', columns='eta', values='diverged', aggfunc='min').astype(bool)

    def boundary(self, mode):
        """smallest exploding learning rate per width, NaN when none exploded"""
        mask = self.explosion_mask(mode)
        etas = np.asarray(mask.columns, dtype=float)
        result = {}
        for M, row in mask.iterrows():
            exploded = etas[np.asarray(row, dtype=bool)]
            result[int(M)] = float(exploded.min()) if exploded.size else float('nan')
        return result


class LossTrajectory(object):
    def __init__(self, losses, diverged, threshold):
        """
        Args:
            losses: E(theta_t) for t = 0, 1, ... until the run stopped
            diverged: loss became non-finite or exceeded threshold
            threshold: explosion threshold in force
        """
        self.losses = [float(v) for v in losses]
        self.diverged = bool(diverged)
        self.threshold = threshold

    @property
    def final(self):
        return self.losses[-1]

    @property
    def minimum(self):
        finite = [v for v in self.losses if np.isfinite(v)]
        return min(finite) if finite else float('nan')

    @property
    def nonfinite(self):
        return not np.isfinite(self.final)

    def __len__(self):
        return len(self.losses)

    def __repr__(self):
        return f'LossTrajectory<{len(self)} steps, diverged={self.diverged}>'


def descend(theta, loss_and_gradient, eta, steps, threshold=DEFAULT_EXPLOSION_THRESHOLD):
    """
    plain gradient descent theta <- theta - eta grad E(theta)

    Args:
        theta: initial parameter vector
        loss_and_gradient: theta -> (E, grad E)
    Returns:
        (LossTrajectory, final theta)
    """
    if not eta >= 0:
        raise ConfigError(f'learning rate must be nonnegative, got {eta}')
    theta = np.array(theta, dtype=float)
    losses = []
    diverged = False
    for step in range(steps + 1):
        with np.errstate(over='ignore', invalid='ignore'):
            value, gradient = loss_and_gradient(theta)
        losses.append(value)
        if not np.isfinite(value) or value > threshold:
            diverged = True
            break
        if step < steps:
            theta = theta - eta * gradient
    return LossTrajectory(losses, diverged, threshold), theta


def gd_train(params, batch, labels, eta, steps, threshold=DEFAULT_EXPLOSION_THRESHOLD, norm_mode=None):
    """
    full-batch gradient descent on E = 1/(2T) sum (f_k(t) - y_k(t))^2

    Args:
        labels: targets, C x T
    Returns:
        LossTrajectory
    """

    def loss_and_gradient(theta):
        try:
            return netlab.loss_gradient(params.from_flat(theta), batch, labels, norm_mode)
        except (NumericalError, FloatingPointError):
            return float('nan'), None

    trajectory, _ = descend(params.flatten(), loss_and_gradient, eta, steps, threshold)
    return trajectory


def make_teacher_labels(spec, M, T, teacher_seed, batch=None, norm_mode=None):
    """
    outputs of an independently drawn teacher of the same spec and widths

    Args:
        batch: inputs shared with the student, drawn from teacher_seed when omitted
    Returns:
        labels, C x T
    """
    teacher = netlab.init_params(spec, M, teacher_seed)
    batch = netlab.make_batch(spec, M, T, teacher_seed) if batch is None else batch
    if batch.T != T:
        raise ConfigError(f'{batch} does not have T = {T}')
    return netlab.forward(teacher, batch, norm_mode).outputs.copy()


def _gather(function, tasks, threads):
    """apply function to tasks, results in task order"""
    if threads <= 1:
        return [function(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(function, tasks))


def _safe_prediction(function, *args, **kwargs):
    try:
        return function(*args, **kwargs)
    except FimAlchemyError as exc:
        logger.warning(f'prediction skipped: {exc}')
        return None


class _TheoryCache(object):
    """mode-wise kappas and batch-norm order parameters shared by all members"""

    def __init__(self, config):
        self.config = config
        self.spec = config.spec
        self._kappa = {}
        self._bn = {}
        self._lock = threading.Lock()

    def kappa(self, mode):
        family = 'layernorm' if mode == 'layernorm' else 'plain'
        with self._lock:
            if family not in self._kappa:
                spec = self.spec.replace(norm_mode='layernorm' if family == 'layernorm' else 'none')
                self._kappa[family] = meanfield.kappas(spec, meanfield.order_params(spec))
            return self._kappa[family]

    def bn_middle(self, T):
        with self._lock:
            if T not in self._bn:
                spec = self.spec.replace(norm_mode='bn_middle')
                self._bn[T] = meanfield.bn_middle_order_params(
                    spec, T, self.config.mc_samples, self.config.master_seed
                )
            return self._bn[T]

    def predict(self, mode, M, T, trace=None):
        """theory for one measurement; trace supplies measured readout statistics"""
        return _safe_prediction(self._predict, mode, M, T, trace)

    def _predict(self, mode, M, T, trace):
        spec = self.spec.replace(norm_mode=mode)
        if mode == 'none':
            return meanfield.predict_unnormalized(spec, M, T, kappa=self.kappa(mode))
        if mode == 'bn_last_meansub':
            return meanfield.predict_bn_last_meansub(spec, M, T, kappa=self.kappa(mode))
        if mode == 'bn_middle':
            return meanfield.predict_bn_middle_lower_bound(spec, M, T, self.bn_middle(T))
        if trace is None:
            return None
        stats = fimlab.measure_normalization_stats(trace, mode)
        if mode == 'bn_last_full':
            return meanfield.predict_bn_last_full(spec, M, T, stats['sigma_k'], kappa=self.kappa(mode))
        return meanfield.predict_layernorm(spec, M, T, eta=stats, kappa=self.kappa(mode))


def _headline(prediction):
    """(value, kind) plotted against the measured lambda_max"""
    if prediction is None:
        return float('nan'), 'none'
    if prediction.lambda_max_point is not None:
        return prediction.lambda_max_point, 'point'
    return prediction.lambda_max_lower, 'lower_bound'


def _fig1_member(config, cache, M, T, index, member):
    seed = config.member_seed(index, member)
    params = netlab.init_params(config.spec, M, seed)
    batch = netlab.make_batch(config.spec, M, T, seed)
    rows = []
    for mode in config.modes:
        logger.info(f'member {member} of M = {M}, mode {mode}, seed {seed}')
        trace = netlab.forward(params, batch, mode)
        fim = fimlab.reversed_fim(netlab.jacobian(params, batch, trace=trace), mode, M, seed, config.spec)
        stats = fimlab.spectrum(fim, seed=seed)
        prediction = cache.predict(mode, M, T, trace)
        value, kind = _headline(prediction)
        rows.append({
            'M': M,
            'T': T,
            'mode': mode,
            'member': member,
            'seed': seed,
            'lambda_max': stats.lambda_max,
            'm_lambda': stats.m_lambda,
            's_lambda': stats.s_lambda,
            'theory_value': value,
            'theory_kind': kind,
            'theory_m_lambda': np.nan if prediction is None or prediction.m_lambda is None else prediction.m_lambda,
            'theory_upper': np.nan if prediction is None or prediction.lambda_max_upper is None
            else prediction.lambda_max_upper,
        })
    return rows


def _summarize(members, value, keys=('M', 'T', 'mode')):
    grouped = members.groupby(list(keys), sort=False)[value]
    summary = pd.DataFrame({
        'ensemble_mean': grouped.mean(),
        'ensemble_std': grouped.std(ddof=1),
        'ensemble_min': grouped.min(),
    }).reset_index()
    return summary


def run_fig1(config):
    """
    largest eigenvalue of the reversed FIM against width, for every mode in
    config.modes, with the matching theory overlay

    Returns:
        EnsembleResult, fit holds the log-log slope of the ensemble mean per mode
    """
    if config.kind != 'fig1_sharpness':
        raise ConfigError(f'{config} is not a fig1_sharpness configuration')
    cache = _TheoryCache(config)
    tasks = []
    for index, M in enumerate(config.M_grid):
        T = config.T_for(M)
        for member in range(config.ensembles):
            tasks.append((M, T, index, member))
    logger.info(f'fig1: {len(tasks)} members on {config.threads} threads')
    results = _gather(lambda task: _fig1_member(config, cache, *task), tasks, config.threads)
    members = pd.DataFrame([row for rows in results for row in rows])
    summary = _summarize(members, 'lambda_max').rename(columns={
        'ensemble_mean': 'ensemble_mean_lambda_max',
    })
    theory = members.groupby(['M', 'T', 'mode'], sort=False).agg(
        theory_value=('theory_value', 'mean'),
        theory_kind=('theory_kind', 'first'),
        mean_m_lambda=('m_lambda', 'mean'),
        theory_m_lambda=('theory_m_lambda', 'mean'),
    ).reset_index()
    summary = summary.merge(theory, on=['M', 'T', 'mode'], how='left', sort=False)
    fit = {}
    for mode in config.modes:
        table = summary[summary['mode'] == mode]
        if len(table) >= 2:
            slope, stderr = loglog_slope(table['M'], table['ensemble_mean_lambda_max'])
            fit[mode] = {'slope': slope, 'stderr': stderr}
    kappa = {
        family: cache.kappa(family).to_dict()
        for family in sorted({'layernorm' if m == 'layernorm' else 'none' for m in config.modes})
        if _safe_prediction(cache.kappa, family) is not None
    }
    return EnsembleResult(config, members, summary, fit, {'kappa': kappa})


def _convrate_member(config, M, T, index, member):
    seed = config.member_seed(index, member)
    spec = config.spec.replace(norm_mode='none')
    params = netlab.init_params(spec, M, seed)
    batch = netlab.make_batch(spec, M, T, seed)
    qtilde_t, qtilde_st = netlab.empirical_backward_order_params(params, batch)
    return {
        'M': M,
        'T': T,
        'member': member,
        'seed': seed,
        'qtilde_t_1': float(qtilde_t[1]),
        'qtilde_st_1': float(qtilde_st[1]),
    }


def run_convrate(config):
    """
    ensemble standard deviation of qtilde_{M,st}^1 against width with the
    fitted log-log slope, expected near -1/2
    """
    if config.kind != 'convrate':
        raise ConfigError(f'{config} is not a convrate configuration')
    if config.spec.norm_mode != 'none':
        raise ConfigError('the convergence-rate study runs on un-normalized networks')
    if config.ensembles < 2:
        raise ConfigError('a standard deviation needs at least two ensemble members')
    tasks = [
        (M, config.T_for(M), index, member)
        for index, M in enumerate(config.M_grid)
        for member in range(config.ensembles)
    ]
    rows = _gather(lambda task: _convrate_member(config, *task), tasks, config.threads)
    members = pd.DataFrame(rows)
    summary = _summarize(members, 'qtilde_st_1', keys=('M', 'T'))
    params = meanfield.order_params(config.spec)
    summary['theory_value'] = float(params.qtilde_st[1])
    fit = {}
    if len(summary) >= 2:
        slope, stderr = loglog_slope(summary['M'], summary['ensemble_std'])
        fit['qtilde_st_1'] = {'slope': slope, 'stderr': stderr}
    theory = {'qtilde_st_1': float(params.qtilde_st[1]), 'qtilde_t_1': float(params.qtilde_t[1])}
    return EnsembleResult(config, members, summary, fit, theory)


def _phase_member(config, cache, mode, M, T, index, trial, etas):
    seed = config.member_seed(index, trial)
    spec = config.spec.replace(norm_mode=mode)
    params = netlab.init_params(spec, M, seed)
    batch = netlab.make_batch(spec, M, T, seed)
    labels = make_teacher_labels(spec, M, T, config.member_seed(index, trial, PURPOSE_TEACHER), batch=batch)
    trace = netlab.forward(params, batch)
    stats = fimlab.spectrum(fimlab.reversed_fim(netlab.jacobian(params, batch, trace=trace), mode), seed=seed)
    if mode == 'none':
        theory_eta = 2.0 / stats.lambda_max
    else:
        prediction = cache.predict(mode, M, T, trace)
        bound = None if prediction is None else prediction.lambda_max_lower
        theory_eta = 2.0 / bound if bound else float('nan')
    cells = []
    for eta in etas:
        logger.info(f'phase cell mode {mode}, M = {M}, eta = {eta:.4g}, trial {trial}')
        run = gd_train(params, batch, labels, eta, config.steps, config.threshold)
        cells.append({
            'mode': mode,
            'M': M,
            'T': T,
            'eta': float(eta),
            'trial': trial,
            'seed': seed,
            'initial_loss': run.losses[0],
            'final_loss': run.final if np.isfinite(run.final) else np.nan,
            'min_loss': run.minimum,
            'diverged': run.diverged,
            'nonfinite': run.nonfinite,
            'steps_run': len(run) - 1,
        })
    overlay = {
        'mode': mode,
        'M': M,
        'T': T,
        'trial': trial,
        'seed': seed,
        'lambda_max': stats.lambda_max,
        'theory_eta': theory_eta,
    }
    return cells, overlay


def run_phase_diagram(config):
    """
    training loss after config.steps gradient-descent steps over (M, eta) for
    every mode, with the learning-rate boundaries 2 / lambda_max (measured at
    initialization) and 2 / (rho alpha (kappa1 - kappa2))
    """
    if config.kind != 'phase_diagram':
        raise ConfigError(f'{config} is not a phase_diagram configuration')
    cache = _TheoryCache(config)
    etas = config.etas()
    tasks = [
        (mode, M, config.T_for(M), index, trial)
        for mode in config.modes
        for index, M in enumerate(config.M_grid)
        for trial in range(config.trials)
    ]
    results = _gather(lambda task: _phase_member(config, cache, *task, etas), tasks, config.threads)
    cells = pd.DataFrame([cell for cell_rows, _ in results for cell in cell_rows])
    overlays = pd.DataFrame([overlay for _, overlay in results])
    return PhaseDiagram(config, cells, overlays)


def _prediction_attempts(spec, config, M, T):
    attempts = [
        ('unnormalized', meanfield.predict_unnormalized, 'none', {}),
        ('bn_last_meansub_smallT', meanfield.predict_bn_last_meansub, 'bn_last_meansub', {'regime': 'small_t'}),
        ('bn_last_meansub_bigT', meanfield.predict_bn_last_meansub, 'bn_last_meansub', {'regime': 'big_t'}),
        ('bn_middle_bound', meanfield.predict_bn_middle_lower_bound, 'bn_middle',
         {'mc_samples': config.mc_samples, 'seed': config.master_seed}),
    ]
    if config.sigma_k is not None:
        attempts.append(('bn_last_full_bigT', meanfield.predict_bn_last_full, 'bn_last_full',
                         {'sigma_k': config.sigma_k}))
    if spec.norm_mode == 'layernorm' or config.eta is not None:
        attempts.append(('layernorm', meanfield.predict_layernorm, 'layernorm', {'eta': config.eta}))
    return attempts


def predict_only(config):
    """
    every applicable prediction for each width of the grid without building a
    network; regime failures become error records

    Returns:
        {'records': [...]} with one record per (M, regime)
    """
    spec = config.spec
    records = []
    for M in config.M_grid:
        T = config.T_for(M)
        for regime, function, mode, kwargs in _prediction_attempts(spec, config, M, T):
            record = {'M': M, 'T': T, 'regime': regime, 'mode': mode, 'prediction': None, 'error': None}
            try:
                record['prediction'] = function(spec.replace(norm_mode=mode), M, T, **kwargs).to_dict()
            except FimAlchemyError as exc:
                logger.warning(f'{regime} at M = {M}, T = {T} skipped: {exc}')
                record['error'] = error_record(exc)
            records.append(record)
    return {'records': records}


def own_regime_error(predictions, spec):
    """first error record of a regime that belongs to spec.norm_mode, or None"""
    for record in predictions['records']:
        if record['mode'] == spec.norm_mode and record['error'] is not None:
            return record['error']
    return None


def spectrum_once(config):
    """
    one network at the first grid width: spectrum, alignment of the top
    eigenvectors, readout statistics and the matching prediction
    """
    spec = config.spec
    M = config.M_grid[0]
    T = config.T_for(M)
    seed = config.master_seed
    params = netlab.init_params(spec, M, seed)
    batch = netlab.make_batch(spec, M, T, seed)
    trace = netlab.forward(params, batch)
    R = netlab.jacobian(params, batch, trace=trace)
    fim = fimlab.reversed_fim(R, spec.norm_mode, M, seed, spec)
    stats = fimlab.spectrum(fim, full=True, seed=seed)
    result = {
        'M': M,
        'T': T,
        'seed': seed,
        'P': params.num_params,
        'widths': params.widths,
        'spectrum': stats.to_dict(),
        'alignment': None,
        'alignment_error': None,
        'prediction': None,
        'readout_stats': None,
    }
    try:
        result['alignment'] = fimlab.top_eigvec_alignment(R, fim, spec if spec.norm_mode == 'none' else None, M).to_dict()
    except FimAlchemyError as exc:
        result['alignment_error'] = error_record(exc)
    if spec.norm_mode in ('bn_last_full', 'layernorm'):
        result['readout_stats'] = fimlab.measure_normalization_stats(trace)
    prediction = _TheoryCache(config).predict(spec.norm_mode, M, T, trace)
    result['prediction'] = None if prediction is None else prediction.to_dict()
    return result


def run(config):
    """dispatch on config.kind"""
    runners = {
        'fig1_sharpness': run_fig1,
        'convrate': run_convrate,
        'phase_diagram': run_phase_diagram,
        'spectrum_once': spectrum_once,
        'predict_only': predict_only,
    }
    return runners[config.kind](config)


def _versions():
    from . import __version__
    return {
        'fim_alchemy': __version__,
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pandas': pd.__version__,
    }


def _config_echo(config):
    # results do not depend on the thread count
    data = config.to_dict()
    data.pop('threads')
    return data


def _dump_json(data, file):
    with codecs.open(file, 'w', encoding='utf-8') as fp:
        json.dump(data, fp, indent=2, sort_keys=True, allow_nan=False)
        fp.write('\n')


def _gnuplot_script(kind):
    if kind == 'fig1_sharpness':
        return '\n'.join([
            "set datafile separator ','",
            "set logscale xy",
            "set xlabel 'M'",
            "set ylabel 'lambda_max'",
            "set key left top",
            "plot for [mode in 'none bn_last_meansub bn_last_full bn_middle layernorm'] \\",
            "    'fig1.csv' using 1:(strcol(3) eq mode ? $4 : 1/0):5 with yerrorbars title mode, \\",
            "     for [mode in 'none bn_last_meansub bn_last_full bn_middle layernorm'] \\",
            "    'fig1.csv' using 1:(strcol(3) eq mode ? $6 : 1/0) with lines title mode.' theory'",
            '',
        ])
    if kind == 'convrate':
        return '\n'.join([
            "set datafile separator ','",
            "set logscale xy",
            "set xlabel 'M'",
            "set ylabel 'std qtilde_st^1'",
            "f(x) = a * x ** b",
            "fit f(x) 'convrate.csv' using 1:4 via a, b",
            "plot 'convrate.csv' using 1:4 with points title 'ensemble std', f(x) title 'fit'",
            '',
        ])
    return '\n'.join([
        "set datafile separator ','",
        "set logscale xy",
        "set xlabel 'M'",
        "set ylabel 'eta'",
        "set palette defined (0 'white', 1 'gray')",
        "plot 'phase.csv' using 2:4:(strcol(10) eq 'True' ? 1 : 0) with points pt 5 palette notitle, \\",
        "     'phase_overlay.csv' using 2:7 with linespoints lw 2 title '2/lambda_max'",
        '',
    ])


def write_results(result, out_dir=None):
    """
    metadata.json (config echo, versions, theory values) plus CSV tables and a
    gnuplot script; byte-identical for identical configs

    Returns:
        list of files written
    """
    if isinstance(result, dict):
        raise ConfigError('use write_predictions for predict_only and spectrum_once results')
    config = result.config
    out_dir = config.out if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    files = []
    metadata = {
        'kind': config.kind,
        'config': _config_echo(config),
        'versions': _versions(),
    }
    if isinstance(result, PhaseDiagram):
        cells_file = os.path.join(out_dir, 'phase.csv')
        overlay_file = os.path.join(out_dir, 'phase_overlay.csv')
        result.cells.to_csv(cells_file, index=False)
        result.overlays.to_csv(overlay_file, index=False)
        files += [cells_file, overlay_file]
        metadata['seeds'] = sorted(set(int(s) for s in result.overlays['seed']))
        metadata['boundaries'] = {
            mode: {str(M): v for M, v in zip(*_boundary_items(result, mode))} for mode in config.modes
        }
    else:
        name = 'fig1' if config.kind == 'fig1_sharpness' else config.kind
        table_file = os.path.join(out_dir, f'{name}.csv')
        members_file = os.path.join(out_dir, f'{name}_members.csv')
        summary = result.summary
        if config.kind == 'fig1_sharpness':
            summary = summary[FIG1_COLUMNS + [c for c in summary.columns if c not in FIG1_COLUMNS]]
        summary.to_csv(table_file, index=False)
        result.members.to_csv(members_file, index=False)
        files += [table_file, members_file]
        metadata['seeds'] = [int(s) for s in result.members['seed'].drop_duplicates()]
        metadata['fit'] = result.fit
        metadata['theory'] = result.theory
    metadata_file = os.path.join(out_dir, 'metadata.json')
    _dump_json(_json_safe(metadata), metadata_file)
    plot_file = os.path.join(out_dir, 'plot.gp')
    with codecs.open(plot_file, 'w', encoding='utf-8') as fp:
        fp.write(_gnuplot_script(config.kind))
    files += [metadata_file, plot_file]
    for file in files:
        logger.info(f'wrote {file}')
    return files


def _boundary_items(diagram, mode):
    boundary = diagram.boundary(mode)
    keys = sorted(boundary)
    return keys, nan_to_none([boundary[k] for k in keys])


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


def write_predictions(data, config, name, out_dir=None):
    """JSON output of predict_only / spectrum_once, with the config echoed"""
    out_dir = config.out if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    file = os.path.join(out_dir, f'{name}.json')
    payload = {'kind': config.kind, 'config': _config_echo(config), 'versions': _versions()}
    payload.update(data)
    _dump_json(_json_safe(payload), file)
    logger.info(f'wrote {file}')
    return file


def load_results(out_dir):
    """
    read back what write_results wrote

    Returns:
        {'metadata': dict, 'config': ExperimentConfig, 'tables': {name: DataFrame}}
    """
    from .parsers import ExperimentConfigParser
    metadata_file = os.path.join(out_dir, 'metadata.json')
    if not os.path.exists(metadata_file):
        raise ConfigError(f'no metadata.json in {out_dir}')
    with codecs.open(metadata_file, encoding='utf-8') as fp:
        metadata = json.load(fp)
    config = ExperimentConfigParser.parse_dict(metadata['config'])
    tables = {}
    for file in sorted(os.listdir(out_dir)):
        if file.endswith('.csv'):
            tables[file[: -4]] = pd.read_csv(os.path.join(out_dir, file))
    return {'metadata': metadata, 'config': config, 'tables': tables}


def _close(a, b, rtol):
    if a is None or b is None or (isinstance(a, float) and np.isnan(a)):
        return (a is None or np.isnan(a)) and (b is None or np.isnan(b))
    return abs(a - b) <= rtol * max(abs(a), abs(b), 1e-300)


def verify_theory_overlays(loaded, rtol=1e-9):
    """
    recompute the config-determined theory values of loaded results from
    meanfield and compare them with the stored ones

    Raises:
        NumericalError: a stored value is stale
    Returns:
        number of values checked
    """
    config = loaded['config']
    tables = loaded['tables']
    cache = _TheoryCache(config)
    checked = 0
    if config.kind == 'fig1_sharpness':
        for row in tables['fig1'].itertuples(index=False):
            if row.mode not in ('none', 'bn_last_meansub', 'bn_middle'):
                continue
            value, _ = _headline(cache.predict(row.mode, int(row.M), int(row.T)))
            if not _close(float(row.theory_value), value, rtol):
                raise NumericalError(
                    f'stale theory overlay for mode {row.mode}, M = {row.M}: '
                    f'stored {row.theory_value}, recomputed {value}'
                )
            checked += 1
    elif config.kind == 'convrate':
        value = float(meanfield.order_params(config.spec).qtilde_st[1])
        for row in tables['convrate'].itertuples(index=False):
            if not _close(float(row.theory_value), value, rtol):
                raise NumericalError(f'stale theory overlay at M = {row.M}')
            checked += 1
    elif config.kind == 'phase_diagram':
        for row in tables['phase_overlay'].itertuples(index=False):
            if row.mode != 'bn_last_meansub':
                continue
            prediction = cache.predict(row.mode, int(row.M), int(row.T))
            value = 2.0 / prediction.lambda_max_lower if prediction is not None else float('nan')
            if not _close(float(row.theory_eta), value, rtol):
                raise NumericalError(f'stale learning-rate overlay at M = {row.M}')
            checked += 1
    return checked
