# -*- coding: utf-8 -*-
import json
import codecs

from .exceptions import ConfigError
from .meanfield import (
    NetSpec,
    OrderParams,
    KappaPair,
    TheoryPrediction,
)
from .fimlab import SpectrumStats, AlignmentReport
from .experiments import ExperimentConfig, resolve_T
from .utils import check_norm_mode, log_grid


class BaseParser(object):
    # accepted keys, required keys and keys derived by to_dict that parse ignores
    fields = ()
    required = ()
    derived = ()
    name = 'record'

    def __init__(self, data):
        if not isinstance(data, dict):
            raise ConfigError(f'{self.name} must be a JSON object, got {type(data).__name__}')
        unknown = sorted(set(data) - set(self.fields) - set(self.derived))
        if unknown:
            raise ConfigError(f'unknown {self.name} fields: {", ".join(unknown)}')
        missing = [key for key in self.required if key not in data]
        if missing:
            raise ConfigError(f'missing {self.name} fields: {", ".join(missing)}')
        self.data = data

    def get(self, key, default=None):
        return self.data.get(key, default)

    def parse(self):
        raise NotImplementedError

    @classmethod
    def parse_dict(cls, data):
        return cls(data).parse()

    @classmethod
    def parse_json(cls, text):
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f'invalid JSON: {exc}')
        return cls.parse_dict(data)

    @classmethod
    def parse_file(cls, file):
        try:
            with codecs.open(file, encoding='utf-8') as fp:
                text = fp.read()
        except OSError as exc:
            raise ConfigError(f"can't read {file}: {exc}")
        return cls.parse_json(text)


def _is_integer(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


class NetSpecParser(BaseParser):
    fields = ('L', 'alpha', 'alpha0', 'C', 'sigma_w2', 'sigma_b2', 'activations', 'norm_mode')
    required = ('L',)
    name = 'spec'

    def parse_alpha(self):
        alpha = self.get('alpha')
        if alpha is None or _is_number(alpha):
            return alpha
        if isinstance(alpha, list) and all(_is_number(a) for a in alpha):
            return alpha
        raise ConfigError('alpha must be a number or a list of numbers')

    def parse_activations(self):
        activations = self.get('activations', 'relu')
        if isinstance(activations, str):
            return activations
        if isinstance(activations, list) and all(isinstance(a, str) for a in activations):
            return activations
        raise ConfigError('activations must be a string or a list of strings')

    def parse_norm_mode(self):
        return check_norm_mode(self.get('norm_mode', 'none'))

    def parse(self):
        kwargs = {key: self.data[key] for key in self.fields if key in self.data}
        kwargs['alpha'] = self.parse_alpha()
        kwargs['activations'] = self.parse_activations()
        kwargs['norm_mode'] = self.parse_norm_mode()
        try:
            return NetSpec(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f'invalid spec: {exc}')


class ExperimentConfigParser(BaseParser):
    fields = (
        'kind', 'spec', 'M_grid', 'T_rule', 'eta_grid', 'ensembles', 'steps', 'master_seed',
        'out', 'threshold', 'trials', 'threads', 'profile', 'modes', 'mc_samples', 'sigma_k', 'eta',
    )
    required = ('kind', 'spec')
    name = 'config'

    def parse_spec(self):
        spec = self.data['spec']
        return spec if isinstance(spec, NetSpec) else NetSpecParser.parse_dict(spec)

    def parse_M_grid(self):
        grid = self.data['M_grid']
        if not isinstance(grid, list) or not all(_is_integer(M) for M in grid):
            raise ConfigError('M_grid must be a list of integer widths')
        return list(grid)

    def parse_T_rule(self):
        rule = self.data['T_rule']
        if not (_is_integer(rule) or isinstance(rule, str)):
            raise ConfigError(f"T_rule must be 'M', an integer or 'M/<rho>', got {rule!r}")
        resolve_T(rule, 1)
        return rule

    def parse_eta_grid(self):
        grid = self.data['eta_grid']
        if not isinstance(grid, dict) or set(grid) != {'start', 'stop', 'per_decade'}:
            raise ConfigError("eta_grid needs exactly 'start', 'stop' and 'per_decade'")
        if not (_is_number(grid['start']) and _is_number(grid['stop'])):
            raise ConfigError('eta_grid start and stop must be numbers')
        if not _is_integer(grid['per_decade']):
            raise ConfigError(f"eta_grid per_decade must be an integer, got {grid['per_decade']!r}")
        parsed = {'start': float(grid['start']), 'stop': float(grid['stop']), 'per_decade': grid['per_decade']}
        log_grid(parsed['start'], parsed['stop'], parsed['per_decade'])
        return parsed

    def parse_modes(self):
        modes = self.data['modes']
        if isinstance(modes, str):
            modes = [modes]
        if not isinstance(modes, list) or not modes:
            raise ConfigError('modes must be a non-empty list of normalization modes')
        return [check_norm_mode(mode) for mode in modes]

    def parse(self, **overrides):
        kwargs = {key: self.data[key] for key in self.fields if key in self.data}
        kwargs['spec'] = self.parse_spec()
        for key in ('M_grid', 'T_rule', 'eta_grid', 'modes'):
            if key in self.data:
                kwargs[key] = getattr(self, f'parse_{key}')()
        kwargs.update({key: value for key, value in overrides.items() if value is not None})
        try:
            return ExperimentConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f'invalid config: {exc}')

    @classmethod
    def parse_dict(cls, data, **overrides):
        """
        Args:
            data: config object
            overrides: command-line values (seed, out, ...) replacing the file's; None leaves the file's value
        """
        return cls(data).parse(**overrides)

    @classmethod
    def parse_file(cls, file, **overrides):
        try:
            with codecs.open(file, encoding='utf-8') as fp:
                data = json.load(fp)
        except OSError as exc:
            raise ConfigError(f"can't read {file}: {exc}")
        except ValueError as exc:
            raise ConfigError(f'invalid JSON in {file}: {exc}')
        return cls.parse_dict(data, **overrides)


class OrderParamsParser(BaseParser):
    fields = ('mode', 'q_t', 'q_st', 'qhat_t', 'qhat_st', 'qtilde_t', 'qtilde_st')
    required = ('mode', 'q_t', 'q_st', 'qhat_t', 'qhat_st')
    name = 'order parameters'

    @staticmethod
    def _values(values):
        return None if values is None else [float('nan') if v is None else float(v) for v in values]

    def parse(self):
        return OrderParams(
            mode=self.data['mode'],
            q_t=self._values(self.data['q_t']),
            q_st=self._values(self.data['q_st']),
            qhat_t=self._values(self.data['qhat_t']),
            qhat_st=self._values(self.data['qhat_st']),
            qtilde_t=self._values(self.get('qtilde_t')),
            qtilde_st=self._values(self.get('qtilde_st')),
        )


class KappaPairParser(BaseParser):
    fields = ('kappa1', 'kappa2', 'centered')
    required = ('kappa1', 'kappa2')
    name = 'kappa pair'

    def parse(self):
        return KappaPair(
            kappa1=self.data['kappa1'],
            kappa2=self.data['kappa2'],
            centered=self.get('centered'),
        )


class TheoryPredictionParser(BaseParser):
    fields = (
        'regime', 'M', 'T', 'm_lambda', 'lambda_max_point', 'lambda_max_lower',
        'lambda_max_upper', 's_lambda', 'metadata',
    )
    required = ('regime', 'M', 'T')
    derived = ('rho',)
    name = 'prediction'

    def parse(self):
        return TheoryPrediction(**{key: self.data[key] for key in self.fields if key in self.data})


class SpectrumStatsParser(BaseParser):
    fields = ('m_lambda', 's_lambda', 'lambda_max', 'P', 'eigenvalues', 'solver', 'iterations')
    required = ('m_lambda', 's_lambda', 'lambda_max', 'P')
    name = 'spectrum'

    def parse(self):
        return SpectrumStats(**{key: self.data[key] for key in self.fields if key in self.data})


class AlignmentReportParser(BaseParser):
    fields = ('cosines', 'vector_cosines', 'M', 'mode')
    required = ('cosines', 'vector_cosines')
    derived = ('angles',)
    name = 'alignment'

    def parse(self):
        return AlignmentReport(
            cosines=self.data['cosines'],
            vector_cosines=self.data['vector_cosines'],
            M=self.get('M'),
            mode=self.get('mode'),
        )
