# -*- coding: utf-8 -*-
"""
Finite random networks: initialization, forward passes and exact Jacobians.

A network maps a batch X (T x M_0) through

    u^l = h^{l-1} W^l^T + b^l,   h^l = phi(ubar^l),   l = 1 .. L-1

where ubar^l = u^l, or u^l standardized over the batch per unit (bn_middle), or
over the units per sample (layernorm). The readout u^L is left alone (none,
bn_middle), centered over the batch (bn_last_meansub), standardized over the
batch (bn_last_full) or standardized over the C units (layernorm).

Jacobians are propagated backward by hand. Everything below a normalization
layer that does not couple samples is kept per sample; batch-normalized middle
layers couple all samples and keep a (C, T, T, M_l) sensitivity tensor.
"""
import logging

import numpy as np

from .exceptions import ConfigError, DegenerateNormalizationError
from .utils import (
    PURPOSE_WEIGHTS,
    PURPOSE_BIASES,
    PURPOSE_INPUTS,
    check_finite,
    check_layernorm_widths,
    check_norm_mode,
    substream,
)


logger = logging.getLogger('fim-alchemy')


BATCH_MODES = ('bn_last_meansub', 'bn_last_full', 'bn_middle')


class Params(object):
    def __init__(self, spec, weights, biases, seed=None, M=None):
        """
        Args:
            spec: NetSpec
            weights: list of L matrices, W^l has shape (M_l, M_{l-1})
            biases: list of L vectors, b^l has length M_l
            seed: generating seed, None for hand-made parameters
            M: base width the widths were derived from
        """
        if len(weights) != spec.L or len(biases) != spec.L:
            raise ConfigError(f'{spec} needs {spec.L} weight matrices and bias vectors')
        self.spec = spec
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float).ravel() for b in biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases), 1):
            if w.ndim != 2 or b.size != w.shape[0]:
                raise ConfigError(f'layer {l}: weight {w.shape} and bias {b.shape} do not match')
            if l > 1 and w.shape[1] != self.weights[l - 2].shape[0]:
                raise ConfigError(f'layer {l}: weight {w.shape} does not follow layer {l - 1}')
            w.setflags(write=False)
            b.setflags(write=False)
        if self.weights[-1].shape[0] != spec.C:
            raise ConfigError(f'readout has {self.weights[-1].shape[0]} units, spec says C = {spec.C}')
        self.seed = seed
        self.M = M
        self.widths = [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]
        self.rounded = False if M is None else spec.widths_rounded(M)

    def __repr__(self):
        return f'Params<{"-".join(str(w) for w in self.widths)}, seed={self.seed}>'

    @property
    def num_params(self):
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    @property
    def metadata(self):
        return {
            'M': self.M,
            'widths': list(self.widths),
            'rounded': self.rounded,
            'seed': self.seed,
        }

    def flatten(self):
        """parameter vector ordered layer by layer, W^l row-major then b^l"""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def from_flat(self, vector):
        """Params with the same shapes holding `vector`"""
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.num_params:
            raise ConfigError(f'expected {self.num_params} parameters, got {vector.size}')
        weights, biases = [], []
        offset = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vector[offset: offset + w.size].reshape(w.shape))
            offset += w.size
            biases.append(vector[offset: offset + b.size])
            offset += b.size
        params = Params(self.spec, weights, biases, self.seed, self.M)
        params.rounded = self.rounded
        return params


class Batch(object):
    def __init__(self, X, seed=None):
        """
        Args:
            X: inputs of shape (T, M_0)
            seed: generating seed, None for hand-made inputs
        """
        X = np.array(X, dtype=float)
        if X.ndim != 2:
            raise ConfigError(f'inputs must be a T x M_0 matrix, got shape {X.shape}')
        X.setflags(write=False)
        self.X = X
        self.seed = seed

    @property
    def T(self):
        return self.X.shape[0]

    def __repr__(self):
        return f'Batch<T={self.T}, M0={self.X.shape[1]}>'


def init_params(spec, M, seed):
    """
    W^l_ij ~ N(0, sigma_w2 / M_{l-1}), b^l_i ~ N(0, sigma_b2); layer l draws
    from substreams (seed, l, PURPOSE_WEIGHTS) and (seed, l, PURPOSE_BIASES)
    """
    widths = spec.widths(M)
    weights, biases = [], []
    for l in range(1, spec.L + 1):
        fan_in, fan_out = widths[l - 1], widths[l]
        rng = substream(seed, l, PURPOSE_WEIGHTS)
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(spec.sigma_w2 / fan_in))
        if spec.sigma_b2 > 0:
            rng = substream(seed, l, PURPOSE_BIASES)
            biases.append(rng.standard_normal(fan_out) * np.sqrt(spec.sigma_b2))
        else:
            biases.append(np.zeros(fan_out))
    return Params(spec, weights, biases, seed=seed, M=M)


def make_batch(spec, M, T, seed):
    """standard normal inputs of width M_0 = alpha0 * M from substream (seed, 0, PURPOSE_INPUTS)"""
    if int(T) != T or T < 1:
        raise ConfigError(f'sample count T must be an integer >= 1, got {T}')
    M0 = spec.widths(M)[0]
    return Batch(substream(seed, 0, PURPOSE_INPUTS).standard_normal((int(T), M0)), seed=seed)


def _standardize(u, axis, eps, layer, what):
    mu = u.mean(axis=axis, keepdims=True)
    centered = u - mu
    var = np.mean(centered * centered, axis=axis, keepdims=True) + eps
    if not np.all(var > 0):
        index = int(np.flatnonzero(~(var.ravel() > 0))[0])
        raise DegenerateNormalizationError(
            f'zero {what} variance in layer {layer} at index {index}', layer=layer, index=index
        )
    sigma = np.sqrt(var)
    return centered / sigma, mu, sigma


def _standardize_backward(g, normed, sigma, axis):
    """pull-back of a cotangent g through ubar = (u - mean) / std along `axis`"""
    return (g - g.mean(axis=axis, keepdims=True)
            - normed * np.mean(g * normed, axis=axis, keepdims=True)) / sigma


def _gamma(gamma, C):
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (C,)).copy()
    return gamma


class ForwardTrace(object):
    def __init__(self, params, batch, norm_mode, gamma, eps):
        self.params = params
        self.batch = batch
        self.norm_mode = norm_mode
        self.gamma = gamma
        self.eps = eps
        self.pre = [None]
        self.normed = [None]
        self.post = [batch.X]
        self.mu = [None]
        self.sigma = [None]
        self.f = None

    @property
    def L(self):
        return self.params.spec.L

    @property
    def T(self):
        return self.batch.T

    @property
    def C(self):
        return self.params.spec.C

    @property
    def outputs(self):
        """f_k(t) as a C x T matrix"""
        return self.f.T

    @property
    def output_sigma(self):
        """per-output batch deviations (bn_last_full) or per-sample unit deviations (layernorm)"""
        sigma = self.sigma[self.L]
        return None if sigma is None else sigma.ravel()

    @property
    def output_normed(self):
        """standardized readout ubar^L as a T x C matrix"""
        return self.normed[self.L]

    def __repr__(self):
        return f'ForwardTrace<{self.norm_mode}, T={self.T}, L={self.L}>'


def forward(params, batch, norm_mode=None, gamma=1.0, eps=0.0):
    """
    Args:
        params: Params
        batch: Batch
        norm_mode: defaults to params.spec.norm_mode
        gamma: last-layer batch-norm scale, scalar or one per output
        eps: variance offset inside every standard deviation, >= 0
    Returns:
        ForwardTrace
    """
    spec = params.spec
    norm_mode = check_norm_mode(spec.norm_mode if norm_mode is None else norm_mode)
    if eps < 0:
        raise ConfigError(f'eps must be nonnegative, got {eps}')
    if batch.X.shape[1] != params.widths[0]:
        raise ConfigError(f'{batch} does not fit input width {params.widths[0]}')
    if norm_mode in BATCH_MODES and batch.T < 2:
        raise DegenerateNormalizationError('batch normalization needs T >= 2 samples')
    if norm_mode == 'layernorm':
        check_layernorm_widths(params.widths[1:-1])
    trace = ForwardTrace(params, batch, norm_mode, _gamma(gamma, spec.C), eps)
    L = spec.L
    h = batch.X
    for l in range(1, L + 1):
        u = h @ params.weights[l - 1].T + params.biases[l - 1]
        trace.pre.append(u)
        normed, mu, sigma = u, None, None
        if l < L:
            if norm_mode == 'bn_middle':
                normed, mu, sigma = _standardize(u, 0, eps, l, 'batch')
            elif norm_mode == 'layernorm':
                normed, mu, sigma = _standardize(u, 1, eps, l, 'layer')
            h = spec.activations[l - 1].phi(normed)
        else:
            if norm_mode == 'bn_last_meansub':
                mu = u.mean(axis=0, keepdims=True)
                normed = u - mu
                h = trace.gamma * normed
            elif norm_mode == 'bn_last_full':
                normed, mu, sigma = _standardize(u, 0, eps, l, 'batch')
                h = trace.gamma * normed
            elif norm_mode == 'layernorm':
                normed, mu, sigma = _standardize(u, 1, eps, l, 'layer')
                h = normed
            else:
                h = u
        trace.normed.append(normed)
        trace.mu.append(mu)
        trace.sigma.append(sigma)
        trace.post.append(h)
    trace.f = check_finite(h, 'network outputs')
    return trace


def _output_pullback(trace, g):
    """pull a cotangent on f (T x C) back to a cotangent on u^L"""
    mode = trace.norm_mode
    L = trace.L
    if mode == 'bn_last_meansub':
        return trace.gamma * (g - g.mean(axis=0, keepdims=True))
    if mode == 'bn_last_full':
        return _standardize_backward(trace.gamma * g, trace.normed[L], trace.sigma[L], 0)
    if mode == 'layernorm':
        return _standardize_backward(g, trace.normed[L], trace.sigma[L], 1)
    return g


def _hidden_pullback(trace, l, g):
    """pull a cotangent on h^l back to u^l"""
    g = g * trace.params.spec.activations[l - 1].dphi(trace.normed[l])
    if trace.norm_mode == 'bn_middle':
        return _standardize_backward(g, trace.normed[l], trace.sigma[l], 0)
    if trace.norm_mode == 'layernorm':
        return _standardize_backward(g, trace.normed[l], trace.sigma[l], 1)
    return g


def vjp(trace, cotangent):
    """
    gradient of sum_{k,t} cotangent[k, t] f_k(t) with respect to every parameter

    Args:
        trace: ForwardTrace
        cotangent: C x T matrix
    Returns:
        list of (dW^l, db^l), l = 1 .. L
    """
    params = trace.params
    g = _output_pullback(trace, np.asarray(cotangent, dtype=float).T)
    grads = []
    for l in range(trace.L, 0, -1):
        grads.append((g.T @ trace.post[l - 1], g.sum(axis=0)))
        if l > 1:
            g = _hidden_pullback(trace, l - 1, g @ params.weights[l - 1])
    return grads[::-1]


def loss(trace, labels):
    """E = 1/(2T) sum_{k,t} (f_k(t) - y_k(t))^2 with labels shaped C x T"""
    residual = trace.outputs - labels
    return float(np.sum(residual * residual) / (2 * trace.T))


def loss_gradient(params, batch, labels, norm_mode=None, gamma=1.0, eps=0.0):
    """
    squared loss and its full-batch gradient by one vector-Jacobian product

    Args:
        labels: targets y_k(t), C x T
    Returns:
        (loss, gradient vector in Params.flatten order)
    """
    trace = forward(params, batch, norm_mode, gamma, eps)
    labels = np.asarray(labels, dtype=float)
    if labels.shape != (trace.C, trace.T):
        raise ConfigError(f'labels must be shaped {(trace.C, trace.T)}, got {labels.shape}')
    residual = trace.outputs - labels
    grads = vjp(trace, residual / trace.T)
    vector = np.concatenate([part.ravel() for pair in grads for part in pair])
    return float(np.sum(residual * residual) / (2 * trace.T)), vector


class _LayerFactor(object):
    def __init__(self, sens, inputs, coupled):
        """
        Args:
            sens: d u^L / d u^l, shaped (C, T, M_l) per sample, or
                (C, T, T, M_l) when samples are coupled
            inputs: h^{l-1}, shaped (T, M_{l-1})
            coupled: whether sens carries a separate sample axis
        """
        self.sens = sens
        self.inputs = inputs
        self.coupled = coupled

    @property
    def size(self):
        return self.sens.shape[-1] * (self.inputs.shape[1] + 1)

    def gram(self):
        C, T = self.sens.shape[:2]
        kernel = self.inputs @ self.inputs.T + 1.0
        if not self.coupled:
            flat = self.sens.reshape(C * T, -1)
            return (flat @ flat.T) * np.tile(kernel, (C, C))
        flat = self.sens.reshape(C * T, -1)
        mixed = np.einsum('ab,jtai->jtbi', kernel, self.sens).reshape(C * T, -1)
        return flat @ mixed.T

    def columns(self):
        C, T = self.sens.shape[:2]
        M = self.sens.shape[-1]
        if not self.coupled:
            weight = np.einsum('jai,ak->ikja', self.sens, self.inputs)
            bias = self.sens.reshape(C * T, M).T
        else:
            weight = np.einsum('jtai,ak->ikjt', self.sens, self.inputs)
            bias = self.sens.sum(axis=2).reshape(C * T, M).T
        return np.vstack([weight.reshape(-1, C * T), bias])


class JacobianBlock(object):
    def __init__(self, C, T, P, factors=None, mixing=None, matrix=None):
        """
        R of shape P x CT with columns grad f_k(t) / sqrt(T), k-major

        Args:
            C, T: outputs and samples
            P: parameter count
            factors: per-layer sensitivity factors of the readout u^L
            mixing: CT x CT matrix A with grad f = grad u^L A, None for identity
            matrix: explicit R, replaces the factors
        """
        self.C = int(C)
        self.T = int(T)
        self.P = int(P)
        self.factors = factors or []
        self.mixing = mixing
        self._matrix = None
        if matrix is not None:
            matrix = check_finite(np.asarray(matrix, dtype=float), 'Jacobian')
            if matrix.shape != (self.P, self.C * self.T):
                raise ConfigError(f'R must be {self.P} x {self.C * self.T}, got {matrix.shape}')
            self._matrix = matrix

    @classmethod
    def from_matrix(cls, matrix, C, T):
        matrix = np.asarray(matrix, dtype=float)
        return cls(C, T, matrix.shape[0], matrix=matrix)

    def __repr__(self):
        return f'JacobianBlock<P={self.P}, C={self.C}, T={self.T}>'

    @property
    def matrix(self):
        if self._matrix is None:
            R = np.vstack([factor.columns() for factor in self.factors]) / np.sqrt(self.T)
            if self.mixing is not None:
                R = R @ self.mixing
            self._matrix = check_finite(R, 'Jacobian')
        return self._matrix

    def column(self, k, t):
        return self.matrix[:, k * self.T + t]

    def gram(self):
        """R^T R without forming R when the factors are available"""
        if self._matrix is not None:
            return self._matrix.T @ self._matrix
        G = sum(factor.gram() for factor in self.factors) / self.T
        if self.mixing is not None:
            G = self.mixing.T @ G @ self.mixing
        return check_finite(G, 'reversed FIM')

    def mean_gradients(self):
        """E_t[grad f_k] for every k as a P x C matrix"""
        R = self.matrix.reshape(self.P, self.C, self.T)
        return R.mean(axis=2) * np.sqrt(self.T)


def _output_mixing(trace):
    """A with A[(j, a), (k, t)] = d f_k(t) / d u^L_j(a), None when f = u^L"""
    mode = trace.norm_mode
    C, T, L = trace.C, trace.T, trace.L
    if mode not in ('bn_last_meansub', 'bn_last_full', 'layernorm'):
        return None
    A = np.zeros((C * T, C * T))
    if mode in ('bn_last_meansub', 'bn_last_full'):
        centering = np.eye(T) - 1.0 / T
        for k in range(C):
            block = centering
            if mode == 'bn_last_full':
                n = trace.normed[L][:, k]
                block = (centering - np.outer(n, n) / T) / trace.sigma[L][0, k]
            A[k * T: (k + 1) * T, k * T: (k + 1) * T] = trace.gamma[k] * block
        return A
    for t in range(T):
        n = trace.normed[L][t]
        block = (np.eye(C) - 1.0 / C - np.outer(n, n) / C) / trace.sigma[L][t, 0]
        index = np.arange(C) * T + t
        A[np.ix_(index, index)] = block
    return A


def _sensitivities(trace):
    """d u^L / d u^l for l = L .. 1, newest last"""
    params = trace.params
    C, T, L = trace.C, trace.T, trace.L
    coupled = trace.norm_mode == 'bn_middle'
    if coupled:
        sens = np.eye(C)[:, None, None, :] * np.eye(T)[None, :, :, None]
    else:
        sens = np.broadcast_to(np.eye(C)[:, None, :], (C, T, C)).copy()
    result = [sens]
    for l in range(L - 1, 0, -1):
        sens = sens @ params.weights[l]
        sens = sens * params.spec.activations[l - 1].dphi(trace.normed[l])
        if coupled:
            sens = _standardize_backward(sens, trace.normed[l], trace.sigma[l], 2)
        elif trace.norm_mode == 'layernorm':
            sens = _standardize_backward(sens, trace.normed[l][None], trace.sigma[l][None], 2)
        result.append(sens)
    return result[::-1], coupled


def jacobian(params, batch, norm_mode=None, gamma=1.0, eps=0.0, trace=None, raw_output=False):
    """
    exact per-output, per-sample parameter gradients

    Args:
        params, batch, norm_mode, gamma, eps: as for forward
        trace: reuse a ForwardTrace of the same arguments
        raw_output: Jacobian of the readout u^L instead of f
    Returns:
        JacobianBlock
    """
    if trace is None:
        trace = forward(params, batch, norm_mode, gamma, eps)
    sens, coupled = _sensitivities(trace)
    factors = [
        _LayerFactor(sens[l - 1], trace.post[l - 1], coupled) for l in range(1, trace.L + 1)
    ]
    mixing = None if raw_output else _output_mixing(trace)
    return JacobianBlock(trace.C, trace.T, params.num_params, factors=factors, mixing=mixing)


def empirical_backward_order_params(params, batch, unit=0):
    """
    qtilde_{M,t}^l = mean_t sum_i delta_i^l(t)^2 and qtilde_{M,st}^l averaged over
    distinct sample pairs, delta^l = d u^L_unit / d u^l of the un-normalized chain

    Returns:
        (qtilde_t, qtilde_st), arrays over l = 0 .. L with index 0 unused
    """
    if not 0 <= unit < params.spec.C:
        raise ConfigError(f'output unit {unit} out of range')
    trace = forward(params, batch, 'none')
    sens, _ = _sensitivities(trace)
    T, L = trace.T, trace.L
    qtilde_t = np.full(L + 1, np.nan)
    qtilde_st = np.full(L + 1, np.nan)
    for l in range(1, L + 1):
        delta = sens[l - 1][unit]
        overlaps = delta @ delta.T
        qtilde_t[l] = np.trace(overlaps) / T
        if T > 1:
            qtilde_st[l] = (overlaps.sum() - np.trace(overlaps)) / (T * (T - 1))
    return qtilde_t, qtilde_st


def finite_diff_check(params, batch, norm_mode=None, epsilon=1e-5, gamma=1.0, eps=0.0):
    """
    largest deviation between sqrt(T) R and central differences of the outputs,
    relative to the largest Jacobian entry (absolute when R vanishes)
    """
    if not epsilon > 0:
        raise ConfigError(f'epsilon must be positive, got {epsilon}')
    trace = forward(params, batch, norm_mode, gamma, eps)
    exact = jacobian(params, batch, trace=trace).matrix * np.sqrt(batch.T)
    theta = params.flatten()
    numeric = np.empty_like(exact)
    for p in range(theta.size):
        step = np.zeros_like(theta)
        step[p] = epsilon
        plus = forward(params.from_flat(theta + step), batch, trace.norm_mode, gamma, eps).outputs
        minus = forward(params.from_flat(theta - step), batch, trace.norm_mode, gamma, eps).outputs
        numeric[p] = ((plus - minus) / (2 * epsilon)).ravel()
    scale = np.max(np.abs(exact))
    error = np.max(np.abs(numeric - exact))
    return float(error / scale) if scale > 0 else float(error)
