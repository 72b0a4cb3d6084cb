# -*- coding: utf-8 -*-
"""
Mean-field order parameters and eigenvalue predictions for the reversed FIM.

Forward order parameters follow the plain recurrences

    q_t^l = sigma_w2 * qhat_t^{l-1} + sigma_b2,   qhat_t^l = E[phi^2(sqrt(q_t^l) u)]
    q_st^l = sigma_w2 * qhat_st^{l-1} + sigma_b2, qhat_st^l = I_phi[q_t^l, q_st^l]

and backward ones start from qtilde^L = 1 and multiply by sigma_w2 times the
Gaussian integrals of phi'. Layer norm replaces the variances by one.
"""
import logging

import numpy as np
from scipy import special

from . import gaussq
from .exceptions import (
    ConfigError,
    DomainError,
    CenteredNetworkError,
    PreconditionError,
    DegenerateRegimeError,
    DegenerateNormalizationError,
)
from .utils import (
    NORM_MODES,
    DEFAULT_MC_SAMPLES,
    PURPOSE_MONTE_CARLO,
    check_layernorm_widths,
    check_norm_mode,
    nan_to_none,
    substream,
)


logger = logging.getLogger('fim-alchemy')


ACTIVATION_TAGS = ['relu', 'leaky_relu', 'tanh', 'sigmoid', 'erf', 'linear']
DEFAULT_LEAKY_SLOPE = 0.01
CENTERED_TOLERANCE = 1e-8
KAPPA2_TOLERANCE = 1e-10
MIN_MC_SAMPLES = 10000
MC_CHUNK = 10000

REGIMES = [
    'unnormalized',
    'bn_last_meansub_smallT',
    'bn_last_meansub_bigT',
    'bn_last_full_bigT',
    'bn_middle_bound',
    'layernorm',
]


def arccos_kernel(x):
    """
    J(x) = (sqrt(1 - x^2) + (pi - arccos x) x) / pi

    Args:
        x: correlation in [-1, 1]
    """
    if not abs(x) <= 1 + 1e-12:
        raise DomainError(f'arccosine kernel argument must lie in [-1, 1], got {x}')
    x = min(max(float(x), -1.0), 1.0)
    return (np.sqrt(1 - x * x) + (np.pi - np.arccos(x)) * x) / np.pi


class Activation(object):
    def __init__(self, tag, slope=None):
        """
        Args:
            tag: one of ACTIVATION_TAGS
            slope: negative-side slope in (0, 1), leaky_relu only
        """
        if tag not in ACTIVATION_TAGS:
            raise ConfigError(f'unknown activation {tag}, choose from {ACTIVATION_TAGS}')
        if tag == 'leaky_relu':
            slope = DEFAULT_LEAKY_SLOPE if slope is None else float(slope)
            if not 0 < slope < 1:
                raise ConfigError(f'leaky_relu slope must lie in (0, 1), got {slope}')
        elif slope is not None:
            raise ConfigError(f'activation {tag} takes no slope')
        self.tag = tag
        self.slope = slope
        self._check_bounded_derivative()
        self.centered = abs(gaussq.expect1(self.phi, 1.0)) < CENTERED_TOLERANCE

    @classmethod
    def from_string(cls, name):
        """relu, tanh, sigmoid, erf, linear, leaky_relu or leaky_relu:<slope>"""
        if isinstance(name, Activation):
            return name
        if not isinstance(name, str):
            raise ConfigError(f'activation must be a string, got {name!r}')
        tag, _, slope = name.strip().partition(':')
        if slope:
            try:
                slope = float(slope)
            except ValueError:
                raise ConfigError(f'invalid activation slope in {name}')
        return cls(tag, slope if slope != '' else None)

    def __str__(self):
        if self.tag == 'leaky_relu':
            return f'leaky_relu:{self.slope:g}'
        return self.tag

    def __repr__(self):
        return f'Activation<{self}>'

    def __eq__(self, other):
        if not isinstance(other, Activation):
            return NotImplemented
        return (self.tag == other.tag) and (self.slope == other.slope)

    def __hash__(self):
        return hash((self.tag, self.slope))

    @property
    def homogeneous_slope(self):
        """negative-side slope when phi is positively homogeneous, else None"""
        return {'relu': 0.0, 'linear': 1.0, 'leaky_relu': self.slope}.get(self.tag)

    @property
    def homogeneous(self):
        return self.homogeneous_slope is not None

    @property
    def nonnegative(self):
        return self.tag in ('relu', 'sigmoid')

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if self.tag == 'relu':
            return np.maximum(x, 0.0)
        if self.tag == 'leaky_relu':
            return np.where(x > 0, x, self.slope * x)
        if self.tag == 'tanh':
            return np.tanh(x)
        if self.tag == 'sigmoid':
            return special.expit(x)
        if self.tag == 'erf':
            return special.erf(x)
        return x

    def dphi(self, x):
        """weak derivative, taking the left limit at kinks"""
        x = np.asarray(x, dtype=float)
        if self.tag == 'relu':
            return (x > 0).astype(float)
        if self.tag == 'leaky_relu':
            return np.where(x > 0, 1.0, self.slope)
        if self.tag == 'tanh':
            return 1.0 - np.tanh(x) ** 2
        if self.tag == 'sigmoid':
            s = special.expit(x)
            return s * (1.0 - s)
        if self.tag == 'erf':
            return 2.0 / np.sqrt(np.pi) * np.exp(-x * x)
        return np.ones_like(x)

    def _check_bounded_derivative(self):
        values = self.dphi(np.linspace(-50, 50, 100001))
        if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > 1e6:
            raise ConfigError(f'activation {self} has no bounded derivative')

    # Gaussian integrals; closed forms where they exist, quadrature otherwise

    def square(self, q, grid=None, fast=True):
        """E[phi^2(sqrt(q) u)]"""
        gaussq.check_moments(q)
        s = self.homogeneous_slope
        if fast and s is not None:
            return (1 + s * s) * q / 2.0
        if fast and self.tag == 'erf':
            return 2.0 / np.pi * np.arcsin(2 * q / (1 + 2 * q))
        return gaussq.expect1(lambda u: self.phi(u) ** 2, q, grid)

    def overlap(self, a, b, grid=None, fast=True):
        """I_phi[a, b] = E[phi(u) phi(v)], Var u = Var v = a, Cov(u, v) = b"""
        gaussq.check_moments(a, b)
        s = self.homogeneous_slope
        if fast and s is not None:
            c = min(max(b / a, -1.0), 1.0)
            return (1 - s) ** 2 * a / 2.0 * arccos_kernel(c) + (1 - s) * s * b + s * s * b
        if fast and self.tag == 'erf':
            return 2.0 / np.pi * np.arcsin(2 * b / (1 + 2 * a))
        return gaussq.expect2(self.phi, self.phi, a, b, grid)

    def deriv_square(self, q, grid=None, fast=True):
        """E[phi'^2(sqrt(q) u)]"""
        gaussq.check_moments(q)
        s = self.homogeneous_slope
        if fast and s is not None:
            return (1 + s * s) / 2.0
        if fast and self.tag == 'erf':
            return 4.0 / np.pi / np.sqrt(1 + 4 * q)
        return gaussq.expect1(lambda u: self.dphi(u) ** 2, q, grid)

    def deriv_overlap(self, a, b, grid=None, fast=True):
        """I_phi'[a, b]"""
        gaussq.check_moments(a, b)
        s = self.homogeneous_slope
        if fast and s is not None:
            theta = np.arccos(min(max(b / a, -1.0), 1.0))
            return ((1 + s * s) * (np.pi - theta) + 2 * s * theta) / (2 * np.pi)
        if fast and self.tag == 'erf':
            return 4.0 / np.pi / np.sqrt((1 + 2 * a) ** 2 - 4 * b * b)
        return gaussq.expect2(self.dphi, self.dphi, a, b, grid)


def get_activation(name):
    return Activation.from_string(name)


class NetSpec(object):
    def __init__(
        self, L, alpha=None, C=1, sigma_w2=2.0, sigma_b2=0.0,
        activations='relu', norm_mode='none', alpha0=1.0
    ):
        """
        Args:
            L: depth, number of weight layers, >= 2
            alpha: width ratios of hidden layers 1..L-1, M_l = alpha_l * M
            C: number of outputs
            sigma_w2: weight variance scale, Var W_ij = sigma_w2 / M_{l-1}
            sigma_b2: bias variance
            activations: one activation for every hidden layer or a list of L-1
            norm_mode: one of NORM_MODES
            alpha0: input width ratio, M_0 = alpha0 * M
        """
        if int(L) != L or L < 2:
            raise ConfigError(f'depth L must be an integer >= 2, got {L}')
        L = int(L)
        if alpha is None:
            alpha = [1.0] * (L - 1)
        elif np.isscalar(alpha):
            alpha = [float(alpha)] * (L - 1)
        alpha = [float(a) for a in alpha]
        if len(alpha) != L - 1:
            raise ConfigError(f'expected {L - 1} width ratios, got {len(alpha)}')
        if any(not a > 0 for a in alpha) or not alpha0 > 0:
            raise ConfigError('width ratios must be positive')
        if int(C) != C or C < 1:
            raise ConfigError(f'output count C must be an integer >= 1, got {C}')
        if not sigma_w2 > 0:
            raise ConfigError(f'sigma_w2 must be positive, got {sigma_w2}')
        if not sigma_b2 >= 0:
            raise ConfigError(f'sigma_b2 must be nonnegative, got {sigma_b2}')
        if isinstance(activations, (str, Activation)):
            activations = [activations] * (L - 1)
        activations = [Activation.from_string(a) for a in activations]
        if len(activations) != L - 1:
            raise ConfigError(f'expected {L - 1} activations, got {len(activations)}')
        self.L = L
        self.alpha = alpha
        self.alpha0 = float(alpha0)
        self.C = int(C)
        self.sigma_w2 = float(sigma_w2)
        self.sigma_b2 = float(sigma_b2)
        self.activations = activations
        self.norm_mode = check_norm_mode(norm_mode)

    def __repr__(self):
        return f'NetSpec<L={self.L}, C={self.C}, {self.norm_mode}>'

    def __eq__(self, other):
        if not isinstance(other, NetSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            'L': self.L,
            'alpha': list(self.alpha),
            'alpha0': self.alpha0,
            'C': self.C,
            'sigma_w2': self.sigma_w2,
            'sigma_b2': self.sigma_b2,
            'activations': [str(a) for a in self.activations],
            'norm_mode': self.norm_mode,
        }

    def replace(self, **changes):
        """copy with some fields changed"""
        data = self.to_dict()
        data.update(changes)
        return NetSpec(**data)

    @property
    def alpha_full(self):
        """alpha_0 .. alpha_{L-1}"""
        return [self.alpha0] + list(self.alpha)

    @property
    def alpha_total(self):
        a = self.alpha_full
        return float(sum(a[l] * a[l - 1] for l in range(1, self.L)))

    @property
    def is_non_centered(self):
        return self.sigma_b2 > 0 or any(not a.centered for a in self.activations)

    def widths(self, M):
        """
        layer widths M_0 .. M_L for base width M; fractional widths are rounded
        to the nearest integer >= 1
        """
        if int(M) != M or M < 1:
            raise ConfigError(f'width M must be an integer >= 1, got {M}')
        exact = [a * M for a in self.alpha_full]
        widths = [max(1, int(round(w))) for w in exact]
        if any(w != e for w, e in zip(widths, exact)):
            logger.warning(f'widths {exact} rounded to {widths}')
        if self.norm_mode == 'layernorm':
            check_layernorm_widths(widths[1:])
        return widths + [self.C]

    def widths_rounded(self, M):
        return any(a * M != max(1, int(round(a * M))) for a in self.alpha_full)


class OrderParams(object):
    def __init__(
        self, mode, q_t, q_st, qhat_t, qhat_st, qtilde_t=None, qtilde_st=None
    ):
        """
        Args:
            mode: recurrence family, 'plain' or 'layernorm'
            q_t, q_st: pre-activation moments per layer 0..L (index 0 unused)
            qhat_t, qhat_st: forward order parameters per layer 0..L
            qtilde_t, qtilde_st: backward order parameters per layer 0..L
                (index 0 unused), absent before the backward pass
        """
        self.mode = mode
        self.q_t = self._frozen(q_t)
        self.q_st = self._frozen(q_st)
        self.qhat_t = self._frozen(qhat_t)
        self.qhat_st = self._frozen(qhat_st)
        self.qtilde_t = None if qtilde_t is None else self._frozen(qtilde_t)
        self.qtilde_st = None if qtilde_st is None else self._frozen(qtilde_st)

    @staticmethod
    def _frozen(values):
        values = np.array(values, dtype=float)
        values.setflags(write=False)
        return values

    @property
    def L(self):
        return self.q_t.size - 1

    @property
    def has_backward(self):
        return self.qtilde_t is not None

    def __repr__(self):
        return f'OrderParams<{self.mode}, L={self.L}>'

    def __eq__(self, other):
        if not isinstance(other, OrderParams):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            'mode': self.mode,
            'q_t': nan_to_none(self.q_t),
            'q_st': nan_to_none(self.q_st),
            'qhat_t': nan_to_none(self.qhat_t),
            'qhat_st': nan_to_none(self.qhat_st),
            'qtilde_t': None if self.qtilde_t is None else nan_to_none(self.qtilde_t),
            'qtilde_st': None if self.qtilde_st is None else nan_to_none(self.qtilde_st),
        }


class KappaPair(object):
    def __init__(self, kappa1, kappa2, centered=None):
        """
        Args:
            kappa1: layer-weighted sum of qtilde_t * qhat_t
            kappa2: layer-weighted sum of qtilde_st * qhat_st
            centered: warning flag, kappa2 numerically zero
        """
        self.kappa1 = float(kappa1)
        self.kappa2 = float(kappa2)
        self.centered = (abs(self.kappa2) < KAPPA2_TOLERANCE) if centered is None else bool(centered)

    @property
    def gap(self):
        return self.kappa1 - self.kappa2

    def __repr__(self):
        return f'KappaPair<{self.kappa1:.6g}, {self.kappa2:.6g}>'

    def __eq__(self, other):
        if not isinstance(other, KappaPair):
            return NotImplemented
        return (self.kappa1 == other.kappa1) and (self.kappa2 == other.kappa2) and (
            self.centered == other.centered)

    def to_dict(self):
        return {
            'kappa1': self.kappa1,
            'kappa2': self.kappa2,
            'centered': self.centered,
        }


class TheoryPrediction(object):
    def __init__(
        self, regime, M, T, m_lambda=None, lambda_max_point=None,
        lambda_max_lower=None, lambda_max_upper=None, s_lambda=None, metadata=None
    ):
        """
        Args:
            regime: one of REGIMES
            M: base width
            T: sample count
            m_lambda: predicted mean eigenvalue
            lambda_max_point: predicted largest eigenvalue
            lambda_max_lower: lower bound of the largest eigenvalue
            lambda_max_upper: upper bound of the largest eigenvalue
            s_lambda: predicted second moment of the eigenvalues
            metadata: extra JSON-able details (kappas, constants flag, ...)
        """
        if regime not in REGIMES:
            raise ConfigError(f'unknown regime {regime}')
        self.regime = regime
        self.M = int(M)
        self.T = int(T)
        self.m_lambda = self._value(m_lambda, 'm_lambda')
        self.lambda_max_point = self._value(lambda_max_point, 'lambda_max_point')
        self.lambda_max_lower = self._value(lambda_max_lower, 'lambda_max_lower')
        self.lambda_max_upper = self._value(lambda_max_upper, 'lambda_max_upper')
        self.s_lambda = self._value(s_lambda, 's_lambda')
        self.metadata = dict(metadata) if metadata else {}

    @staticmethod
    def _value(value, name):
        if value is None:
            return None
        value = float(value)
        if not value >= 0:
            raise DomainError(f'{name} must be nonnegative, got {value}')
        return value

    @property
    def rho(self):
        return self.M / self.T

    @property
    def consistent(self):
        """lower bound does not exceed the upper bound"""
        if self.lambda_max_lower is None or self.lambda_max_upper is None:
            return True
        return self.lambda_max_lower <= self.lambda_max_upper * (1 + 1e-12)

    def __repr__(self):
        return f'TheoryPrediction<{self.regime}, M={self.M}, T={self.T}>'

    def __eq__(self, other):
        if not isinstance(other, TheoryPrediction):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            'regime': self.regime,
            'M': self.M,
            'T': self.T,
            'rho': self.rho,
            'm_lambda': self.m_lambda,
            'lambda_max_point': self.lambda_max_point,
            'lambda_max_lower': self.lambda_max_lower,
            'lambda_max_upper': self.lambda_max_upper,
            's_lambda': self.s_lambda,
            'metadata': dict(self.metadata),
        }


class BatchNormOrderParams(object):
    def __init__(self, T, qhat_t, qhat_st, method):
        """
        Args:
            T: batch size the statistics were computed for
            qhat_t, qhat_st: per layer 0..L-1, index 0 are the raw inputs
            method: 'closed_form', 'monte_carlo' or a per-layer list of these
        """
        self.T = int(T)
        self.qhat_t = OrderParams._frozen(qhat_t)
        self.qhat_st = OrderParams._frozen(qhat_st)
        self.method = method

    def __iter__(self):
        return iter((self.qhat_t, self.qhat_st))

    def __repr__(self):
        return f'BatchNormOrderParams<T={self.T}>'

    def to_dict(self):
        return {
            'T': self.T,
            'qhat_t': nan_to_none(self.qhat_t),
            'qhat_st': nan_to_none(self.qhat_st),
            'method': self.method,
        }


def _check_sizes(M, T):
    if int(M) != M or M < 1:
        raise ConfigError(f'width M must be an integer >= 1, got {M}')
    if int(T) != T or T < 1:
        raise ConfigError(f'sample count T must be an integer >= 1, got {T}')


def _check_mode(spec, *modes):
    if spec.norm_mode not in modes:
        raise ConfigError(f'operation needs norm_mode in {list(modes)}, spec has {spec.norm_mode}')


def _check_non_centered(spec):
    if not spec.is_non_centered:
        raise CenteredNetworkError(
            'network is centered (sigma_b2 = 0 and zero-mean activations); '
            'the eigenvalue statistics need a non-centered network'
        )


def forward_order_params(spec, grid=None):
    """
    forward recurrences from qhat_t^0 = 1, qhat_st^0 = 0; the readout layer L
    has no activation so qhat^L equals q^L
    """
    _check_mode(spec, 'none', 'bn_last_meansub', 'bn_last_full')
    L = spec.L
    q_t = np.full(L + 1, np.nan)
    q_st = np.full(L + 1, np.nan)
    qhat_t = np.empty(L + 1)
    qhat_st = np.empty(L + 1)
    qhat_t[0], qhat_st[0] = 1.0, 0.0
    for l in range(1, L + 1):
        q_t[l] = spec.sigma_w2 * qhat_t[l - 1] + spec.sigma_b2
        q_st[l] = spec.sigma_w2 * qhat_st[l - 1] + spec.sigma_b2
        if l < L:
            activation = spec.activations[l - 1]
            qhat_t[l] = activation.square(q_t[l], grid)
            qhat_st[l] = activation.overlap(q_t[l], q_st[l], grid)
        else:
            qhat_t[l], qhat_st[l] = q_t[l], q_st[l]
    return OrderParams('plain', q_t, q_st, qhat_t, qhat_st)


def backward_order_params(spec, forward, grid=None):
    """
    backward recurrences from qtilde^L = 1; returns a copy of `forward` with
    the backward family filled in
    """
    if forward.L != spec.L or forward.mode != 'plain':
        raise ConfigError(f'{forward} does not belong to {spec}')
    L = spec.L
    qtilde_t = np.full(L + 1, np.nan)
    qtilde_st = np.full(L + 1, np.nan)
    qtilde_t[L], qtilde_st[L] = 1.0, 1.0
    for l in range(L - 1, 0, -1):
        activation = spec.activations[l - 1]
        qtilde_t[l] = spec.sigma_w2 * qtilde_t[l + 1] * activation.deriv_square(forward.q_t[l], grid)
        qtilde_st[l] = spec.sigma_w2 * qtilde_st[l + 1] * activation.deriv_overlap(
            forward.q_t[l], forward.q_st[l], grid
        )
    return OrderParams(
        forward.mode, forward.q_t, forward.q_st, forward.qhat_t, forward.qhat_st,
        qtilde_t, qtilde_st
    )


def layernorm_order_params(spec, grid=None):
    """
    recurrences with every pre-activation normalized across units; q_t^l = 1 and
    q_st^l is the correlation c^l = (sigma_w2 qhat_st + sigma_b2) / (sigma_w2 qhat_t + sigma_b2)
    """
    _check_mode(spec, 'layernorm')
    L = spec.L
    w2, b2 = spec.sigma_w2, spec.sigma_b2
    q_t = np.full(L + 1, np.nan)
    q_st = np.full(L + 1, np.nan)
    qhat_t = np.empty(L + 1)
    qhat_st = np.empty(L + 1)
    denominators = np.full(L + 1, np.nan)
    qhat_t[0], qhat_st[0] = 1.0, 0.0
    for l in range(1, L + 1):
        denominators[l] = w2 * qhat_t[l - 1] + b2
        if not denominators[l] > 0:
            raise DegenerateNormalizationError(
                f'pre-activations of layer {l} have zero variance', layer=l
            )
        q_t[l] = 1.0
        q_st[l] = min(max((w2 * qhat_st[l - 1] + b2) / denominators[l], -1.0), 1.0)
        if l < L:
            activation = spec.activations[l - 1]
            qhat_t[l] = activation.square(1.0, grid)
            qhat_st[l] = activation.overlap(1.0, q_st[l], grid)
        else:
            qhat_t[l], qhat_st[l] = q_t[l], q_st[l]
    qtilde_t = np.full(L + 1, np.nan)
    qtilde_st = np.full(L + 1, np.nan)
    qtilde_t[L], qtilde_st[L] = 1.0, 1.0
    for l in range(L - 1, 0, -1):
        activation = spec.activations[l - 1]
        gain = w2 / denominators[l]
        qtilde_t[l] = gain * qtilde_t[l + 1] * activation.deriv_square(1.0, grid)
        qtilde_st[l] = gain * qtilde_st[l + 1] * activation.deriv_overlap(1.0, q_st[l], grid)
    return OrderParams('layernorm', q_t, q_st, qhat_t, qhat_st, qtilde_t, qtilde_st)


def order_params(spec, grid=None):
    """both order-parameter families for the recurrence family of spec.norm_mode"""
    if spec.norm_mode == 'layernorm':
        return layernorm_order_params(spec, grid)
    if spec.norm_mode == 'bn_middle':
        raise ConfigError('bn_middle statistics come from bn_middle_order_params')
    return backward_order_params(spec, forward_order_params(spec, grid), grid)


def kappas(spec, params):
    """
    kappa1 = sum_l alpha_{l-1} / alpha * qtilde_t^l * qhat_t^{l-1}, kappa2 likewise
    with the st family
    """
    if not params.has_backward:
        raise ConfigError('kappas need the backward order parameters')
    if params.L != spec.L:
        raise ConfigError(f'{params} does not belong to {spec}')
    alpha = spec.alpha_full
    total = spec.alpha_total
    weights = np.array([alpha[l - 1] / total for l in range(1, spec.L + 1)])
    kappa1 = float(np.sum(weights * params.qtilde_t[1:] * params.qhat_t[:-1]))
    kappa2 = float(np.sum(weights * params.qtilde_st[1:] * params.qhat_st[:-1]))
    pair = KappaPair(kappa1, kappa2)
    if pair.centered:
        logger.warning(f'kappa2 = {kappa2:.3g} vanishes, {spec} behaves as a centered network')
    return pair


def kernel_matrix(kappa, T, mean_subtracted=False):
    """
    T x T block of the reversed FIM in units of alpha M / T: kappa1 on the
    diagonal and kappa2 off it, or its image under the centering projector
    """
    if int(T) != T or T < 1:
        raise ConfigError(f'sample count T must be an integer >= 1, got {T}')
    T = int(T)
    if mean_subtracted:
        gap = kappa.kappa1 - kappa.kappa2
        return gap * (np.eye(T) - np.ones((T, T)) / T)
    return (kappa.kappa1 - kappa.kappa2) * np.eye(T) + kappa.kappa2 * np.ones((T, T))


def _kappa_metadata(spec, kappa):
    return {
        'kappa1': kappa.kappa1,
        'kappa2': kappa.kappa2,
        'alpha': spec.alpha_total,
        'C': spec.C,
    }


def predict_unnormalized(spec, M, T, kappa=None, grid=None):
    """
    m_lambda = kappa1 C / M and lambda_max = alpha ((T - 1)/T kappa2 + kappa1/T) M
    """
    _check_mode(spec, 'none')
    _check_sizes(M, T)
    _check_non_centered(spec)
    kappa = kappas(spec, order_params(spec, grid)) if kappa is None else kappa
    alpha = spec.alpha_total
    k1, k2 = kappa.kappa1, kappa.kappa2
    return TheoryPrediction(
        'unnormalized', M, T,
        m_lambda=k1 * spec.C / M,
        lambda_max_point=alpha * ((T - 1) / T * k2 + k1 / T) * M,
        s_lambda=spec.C * alpha * (k1 * k1 + (T - 1) * k2 * k2) / T,
        metadata=_kappa_metadata(spec, kappa),
    )


def predict_bn_last_meansub(spec, M, T, regime='big_t', convergence_rate=None, kappa=None, grid=None):
    """
    Args:
        regime: 'small_t' gives the point value alpha (kappa1 - kappa2) M / T,
            'big_t' gives the bounds rho alpha (kappa1 - kappa2) and
            sqrt(C alpha^2 rho (kappa1 - kappa2)^2 M)
        convergence_rate: optional q of the backward order parameters; the
            bound exponents 1 - 2 q* and 1 - q* with q* = min(q, 1/2) are recorded
    """
    _check_mode(spec, 'bn_last_meansub')
    _check_sizes(M, T)
    if T < 2:
        raise DegenerateRegimeError('mean subtraction needs T >= 2; T = 1 gives a zero FIM')
    if regime not in ('small_t', 'big_t'):
        raise ConfigError(f'unknown regime {regime}, choose small_t or big_t')
    _check_non_centered(spec)
    kappa = kappas(spec, order_params(spec, grid)) if kappa is None else kappa
    alpha = spec.alpha_total
    gap = kappa.gap
    rho = M / T
    metadata = _kappa_metadata(spec, kappa)
    metadata['modulo_constants'] = regime == 'big_t'
    if convergence_rate is not None and not convergence_rate > 0:
        raise ConfigError(f'convergence rate must be positive, got {convergence_rate}')
    q_star = 0.5 if convergence_rate is None else min(float(convergence_rate), 0.5)
    metadata['convergence_rate'] = q_star
    metadata['lower_exponent'] = 1 - 2 * q_star
    metadata['upper_exponent'] = 1 - q_star
    common = {
        'm_lambda': (1 - 1 / T) * gap * spec.C / M,
        's_lambda': spec.C * alpha * (1 - 1 / T) * gap * gap / T,
        'metadata': metadata,
    }
    if regime == 'small_t':
        return TheoryPrediction(
            'bn_last_meansub_smallT', M, T, lambda_max_point=alpha * gap * M / T, **common
        )
    return TheoryPrediction(
        'bn_last_meansub_bigT', M, T,
        lambda_max_lower=rho * alpha * gap,
        lambda_max_upper=np.sqrt(spec.C * alpha ** 2 * rho * gap ** 2 * M),
        **common
    )


def predict_bn_last_full(spec, M, T, sigma_k, kappa=None, grid=None):
    """
    Q1 = sum 1/sigma_k^2, Q2 = sum 1/sigma_k^4; m_lambda = Q1 (kappa1 - kappa2) / M
    and bounds rho alpha Q2/Q1 (kappa1 - kappa2) to sqrt(Q2 alpha^2 rho (kappa1 - kappa2)^2 M)
    """
    _check_mode(spec, 'bn_last_full')
    _check_sizes(M, T)
    sigma_k = np.asarray(sigma_k, dtype=float).ravel()
    if sigma_k.size != spec.C:
        raise ConfigError(f'expected {spec.C} output deviations, got {sigma_k.size}')
    if np.any(~(sigma_k > 0)):
        raise DomainError('output deviations sigma_k must be positive')
    if T < 2:
        raise DegenerateRegimeError('batch normalization needs T >= 2')
    _check_non_centered(spec)
    kappa = kappas(spec, order_params(spec, grid)) if kappa is None else kappa
    alpha = spec.alpha_total
    gap = kappa.gap
    rho = M / T
    q1 = float(np.sum(sigma_k ** -2))
    q2 = float(np.sum(sigma_k ** -4))
    metadata = _kappa_metadata(spec, kappa)
    metadata.update({'Q1': q1, 'Q2': q2, 'modulo_constants': True})
    return TheoryPrediction(
        'bn_last_full_bigT', M, T,
        m_lambda=q1 * gap / M,
        lambda_max_lower=rho * alpha * q2 / q1 * gap,
        lambda_max_upper=np.sqrt(q2 * alpha ** 2 * rho * gap ** 2 * M),
        metadata=metadata,
    )


def bn_middle_order_params(spec, T, mc_samples=DEFAULT_MC_SAMPLES, seed=0):
    """
    order parameters of batch-standardized hidden layers

    Batch standardization removes the common mode and the scale of the
    exchangeable pre-activation covariance, so every layer sees the
    standardized centered Gaussian vector ubar = (z - mean z) / std z.
    Positively homogeneous activations reduce to E[phi^2(u)] and
    I_phi[1, -1/(T-1)]; others are integrated by Monte Carlo over T-dim samples.

    Args:
        spec: NetSpec
        T: batch size, >= 3
        mc_samples: Monte Carlo sample count per layer, >= 10^4
        seed: master seed, layer l uses substream (seed, l, PURPOSE_MONTE_CARLO)
    Returns:
        BatchNormOrderParams
    """
    if int(T) != T or T <= 2:
        raise DegenerateRegimeError(f'batch-normalized layers need T >= 3, got {T}')
    if int(mc_samples) != mc_samples or mc_samples < MIN_MC_SAMPLES:
        raise ConfigError(f'mc_samples must be an integer >= {MIN_MC_SAMPLES}, got {mc_samples}')
    T = int(T)
    qhat_t = [1.0]
    qhat_st = [0.0]
    methods = []
    for l in range(1, spec.L):
        activation = spec.activations[l - 1]
        if activation.homogeneous:
            qhat_t.append(activation.square(1.0))
            qhat_st.append(activation.overlap(1.0, -1.0 / (T - 1)))
            methods.append('closed_form')
        else:
            second, cross = _standardized_moments(activation, T, int(mc_samples), substream(seed, l, PURPOSE_MONTE_CARLO))
            qhat_t.append(second)
            qhat_st.append(cross)
            methods.append('monte_carlo')
    return BatchNormOrderParams(T, qhat_t, qhat_st, methods)


def _standardized_moments(activation, T, samples, rng):
    second = 0.0
    cross = 0.0
    done = 0
    while done < samples:
        n = min(MC_CHUNK, samples - done)
        z = rng.standard_normal((n, T))
        z -= z.mean(axis=1, keepdims=True)
        z /= np.sqrt(np.mean(z * z, axis=1, keepdims=True))
        h = activation.phi(z)
        squares = np.sum(h * h, axis=1)
        second += float(np.sum(squares))
        cross += float(np.sum(np.sum(h, axis=1) ** 2 - squares))
        done += n
    return second / (samples * T), cross / (samples * T * (T - 1))


def predict_bn_middle_lower_bound(spec, M, T, bn_params=None, mc_samples=DEFAULT_MC_SAMPLES, seed=0):
    """
    lambda_max >= alpha_{L-1} ((T - 1)/T qhat_st_BN + qhat_t_BN / T) M for
    nonnegative activations; no upper bound exists in this regime
    """
    _check_mode(spec, 'bn_middle')
    _check_sizes(M, T)
    negative = [str(a) for a in spec.activations if not a.nonnegative]
    if negative:
        raise PreconditionError(f'lower bound needs nonnegative activations, got {negative}')
    if bn_params is None:
        bn_params = bn_middle_order_params(spec, T, mc_samples, seed)
    elif bn_params.T != T:
        raise ConfigError(f'order parameters were computed for T = {bn_params.T}, not {T}')
    qt = float(bn_params.qhat_t[spec.L - 1])
    qst = float(bn_params.qhat_st[spec.L - 1])
    alpha_last = spec.alpha_full[spec.L - 1]
    return TheoryPrediction(
        'bn_middle_bound', M, T,
        lambda_max_lower=alpha_last * ((T - 1) / T * qst + qt / T) * M,
        metadata={
            'qhat_t_bn': qt,
            'qhat_st_bn': qst,
            'alpha_last': alpha_last,
            'method': bn_params.method,
        },
    )


def _unpack_eta(eta):
    if isinstance(eta, dict):
        try:
            values = (eta['eta1'], eta['eta2'], eta['eta3'])
        except KeyError as exc:
            raise ConfigError(f'missing layer-norm statistic {exc}')
    else:
        values = tuple(eta)
        if len(values) != 3:
            raise ConfigError(f'expected (eta1, eta2, eta3), got {eta}')
    values = tuple(float(v) for v in values)
    if any(not v >= 0 for v in values):
        raise DomainError(f'layer-norm statistics must be nonnegative, got {values}')
    return values


def predict_layernorm(spec, M, T, C=None, eta=None, kappa=None, grid=None):
    """
    m_lambda = (C - 2) eta1 kappa1' / M with bounds
    alpha s M / ((C - 2) eta1 kappa1') <= lambda_max <= alpha sqrt(s) M

    Args:
        C: output count, defaults to spec.C
        eta: (eta1, eta2, eta3) or a dict with these keys, measured from the
            last-layer variances
    """
    _check_mode(spec, 'layernorm')
    _check_sizes(M, T)
    C = spec.C if C is None else int(C)
    if C <= 2:
        raise DegenerateRegimeError(
            f'layer norm with C = {C} outputs makes every output gradient vanish (zero FIM)'
        )
    if eta is None:
        raise ConfigError('layer-norm prediction needs measured (eta1, eta2, eta3)')
    eta1, eta2, eta3 = _unpack_eta(eta)
    _check_non_centered(spec)
    kappa = kappas(spec, order_params(spec, grid)) if kappa is None else kappa
    alpha = spec.alpha_total
    k1, k2 = kappa.kappa1, kappa.kappa2
    s = (((eta3 ** 2 - eta1 ** 2) * T + (C - 2) * (eta1 ** 2 * T - eta2)) * k2 ** 2 / T
         + (C - 2) * eta2 * k1 ** 2 / T)
    if s < 0:
        raise DomainError(f'layer-norm statistics {eta1, eta2, eta3} give a negative second moment')
    m_lambda = (C - 2) * eta1 * k1 / M
    lower = 0.0 if s == 0 else alpha * s * M / ((C - 2) * eta1 * k1)
    metadata = _kappa_metadata(spec, kappa)
    metadata.update({'C': C, 'eta1': eta1, 'eta2': eta2, 'eta3': eta3, 's': s})
    prediction = TheoryPrediction(
        'layernorm', M, T,
        m_lambda=m_lambda,
        lambda_max_lower=lower,
        lambda_max_upper=alpha * np.sqrt(s) * M,
        s_lambda=alpha * s,
        metadata=metadata,
    )
    if not prediction.consistent:
        logger.warning(f'layer-norm bounds cross for eta = {eta1, eta2, eta3}')
    return prediction


__all__ = [
    'ACTIVATION_TAGS',
    'REGIMES',
    'NORM_MODES',
    'Activation',
    'get_activation',
    'NetSpec',
    'OrderParams',
    'KappaPair',
    'TheoryPrediction',
    'BatchNormOrderParams',
    'arccos_kernel',
    'forward_order_params',
    'backward_order_params',
    'layernorm_order_params',
    'order_params',
    'kappas',
    'kernel_matrix',
    'predict_unnormalized',
    'predict_bn_last_meansub',
    'predict_bn_last_full',
    'bn_middle_order_params',
    'predict_bn_middle_lower_bound',
    'predict_layernorm',
]
