# -*- coding: utf-8 -*-
"""
Reversed FIM F* = R^T R, its normalized variants and their spectra.

F* is CT x CT with rows and columns ordered k-major (index k * T + t) and
shares its nonzero eigenvalues with the P x P FIM F = R R^T.
"""
import logging

import numpy as np
from scipy import linalg

from . import netlab
from .exceptions import (
    ConfigError,
    CenteredNetworkError,
    DegenerateNormalizationError,
    NumericalError,
)
from .utils import (
    DENSE_EIGEN_LIMIT,
    PURPOSE_POWER_ITERATION,
    check_finite,
    substream,
)


logger = logging.getLogger('fim-alchemy')


SYMMETRY_TOLERANCE = 1e-10
PSD_TOLERANCE = 1e-8
POWER_TOLERANCE = 1e-10
POWER_MAX_ITERATIONS = 100000


class ReversedFIM(object):
    def __init__(
        self, matrix, mode, C, T, P, M=None, seed=None, spec=None, symmetric_form=None
    ):
        """
        Args:
            matrix: CT x CT reversed FIM, or the product Q F*_mBN of the
                projector path which need not be symmetric
            mode: normalization mode of the network it came from
            C, T: outputs and samples
            P: parameter count used to normalize traces
            M, seed, spec: provenance
            symmetric_form: symmetric matrix similar to a non-symmetric
                `matrix` (nonzero spectra agree); None when `matrix` is symmetric
        """
        matrix = check_finite(np.asarray(matrix, dtype=float), 'reversed FIM')
        if matrix.shape != (C * T, C * T):
            raise ConfigError(f'reversed FIM must be {C * T} x {C * T}, got {matrix.shape}')
        if symmetric_form is None:
            scale = max(np.max(np.abs(matrix)), np.finfo(float).tiny)
            if np.max(np.abs(matrix - matrix.T)) > SYMMETRY_TOLERANCE * scale:
                raise NumericalError('reversed FIM is not symmetric')
        else:
            symmetric_form = check_finite(np.asarray(symmetric_form, dtype=float), 'reversed FIM')
        self.matrix = matrix
        self.symmetric_form = symmetric_form
        self.mode = mode
        self.C = int(C)
        self.T = int(T)
        self.P = int(P)
        self.M = M
        self.seed = seed
        self.spec = spec

    def __repr__(self):
        return f'ReversedFIM<{self.mode}, C={self.C}, T={self.T}, P={self.P}>'

    @property
    def symmetric(self):
        """symmetric matrix carrying the nonzero spectrum"""
        return self.matrix if self.symmetric_form is None else self.symmetric_form

    def block(self, k, j):
        """T x T block (k, j)"""
        T = self.T
        return self.matrix[k * T: (k + 1) * T, j * T: (j + 1) * T]

    def derive(self, matrix, symmetric_form=None, mode=None):
        return ReversedFIM(
            matrix, self.mode if mode is None else mode, self.C, self.T, self.P,
            M=self.M, seed=self.seed, spec=self.spec, symmetric_form=symmetric_form,
        )


class SpectrumStats(object):
    def __init__(
        self, m_lambda, s_lambda, lambda_max, P, eigenvalues=None,
        solver='dense', iterations=None
    ):
        """
        Args:
            m_lambda: Trace(F*) / P
            s_lambda: Trace(F*^2) / P
            lambda_max: largest eigenvalue
            P: parameter count
            eigenvalues: full spectrum of F*, descending, when requested
            solver: 'dense' or 'power'
            iterations: power-iteration count
        """
        self.m_lambda = float(m_lambda)
        self.s_lambda = float(s_lambda)
        self.lambda_max = float(lambda_max)
        self.P = int(P)
        self.eigenvalues = None if eigenvalues is None else [float(v) for v in eigenvalues]
        self.solver = solver
        self.iterations = iterations

    def __repr__(self):
        return f'SpectrumStats<lambda_max={self.lambda_max:.6g}, m={self.m_lambda:.6g}>'

    def __eq__(self, other):
        if not isinstance(other, SpectrumStats):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def moment_sandwich(self, rtol=1e-8):
        """s/m <= lambda_max <= sqrt(P s)"""
        upper = np.sqrt(self.P * self.s_lambda)
        if self.m_lambda <= 0:
            return self.lambda_max <= upper * (1 + rtol) + rtol
        lower = self.s_lambda / self.m_lambda
        return lower <= self.lambda_max * (1 + rtol) and self.lambda_max <= upper * (1 + rtol)

    def to_dict(self):
        return {
            'm_lambda': self.m_lambda,
            's_lambda': self.s_lambda,
            'lambda_max': self.lambda_max,
            'P': self.P,
            'eigenvalues': self.eigenvalues,
            'solver': self.solver,
            'iterations': self.iterations,
        }


class AlignmentReport(object):
    def __init__(self, cosines, vector_cosines, M=None, mode=None):
        """
        Args:
            cosines: cosines of the principal angles, descending, one per output
            vector_cosines: for each top eigenvector of F, the cosine to the
                span of the mean gradients
            M: base width
            mode: normalization mode
        """
        self.cosines = [float(c) for c in np.clip(cosines, 0.0, 1.0)]
        self.vector_cosines = [float(c) for c in np.clip(vector_cosines, 0.0, 1.0)]
        self.M = M
        self.mode = mode

    @property
    def angles(self):
        return [float(np.arccos(c)) for c in self.cosines]

    @property
    def top_cosine(self):
        return self.cosines[0]

    def __repr__(self):
        return f'AlignmentReport<{self.top_cosine:.4f}, M={self.M}>'

    def __eq__(self, other):
        if not isinstance(other, AlignmentReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            'cosines': list(self.cosines),
            'angles': self.angles,
            'vector_cosines': list(self.vector_cosines),
            'M': self.M,
            'mode': self.mode,
        }


def reversed_fim(R, mode='none', M=None, seed=None, spec=None):
    """
    Gram matrix R^T R, symmetrized

    Args:
        R: JacobianBlock or a P x CT matrix (then wrapped with C = 1)
    """
    if not isinstance(R, netlab.JacobianBlock):
        R = netlab.JacobianBlock.from_matrix(R, 1, np.shape(R)[1])
    gram = R.gram()
    gram = (gram + gram.T) / 2.0
    return ReversedFIM(gram, mode, R.C, R.T, R.P, M=M, seed=seed, spec=spec)


def _check_dimension(fim, C, T):
    if fim.C != C or fim.T != T:
        raise ConfigError(f'{fim} does not have C = {C}, T = {T}')


def mean_subtraction_projector(C, T):
    """I_C kron G with G = I_T - 1 1^T / T"""
    return np.kron(np.eye(C), np.eye(T) - 1.0 / T)


def project_mean_subtraction(fim, C, T):
    """(I_C kron G) F* (I_C kron G)"""
    _check_dimension(fim, C, T)
    projector = mean_subtraction_projector(C, T)
    matrix = projector @ fim.matrix @ projector
    return fim.derive((matrix + matrix.T) / 2.0, mode='bn_last_meansub')


def _centered_rows(values, axis, what):
    values = np.asarray(values, dtype=float)
    sigma = np.sqrt(np.mean(values * values, axis=axis, keepdims=True))
    if not np.all(sigma > 0):
        index = int(np.flatnonzero(~(sigma.ravel() > 0))[0])
        raise DegenerateNormalizationError(f'zero {what} variance at index {index}', index=index)
    return values / sigma, sigma


def apply_variance_projector(fim_meansub, centered_outputs, C, T):
    """
    Q F*_mBN with Q(k, k) = (1 / sigma_k^2)(I_T - ubar_k ubar_k^T / (T sigma_k^2))

    Q(k, k) is 1/sigma_k^2 times a projector, so the symmetric form
    Q^{1/2} F*_mBN Q^{1/2} carries the same nonzero spectrum.

    Args:
        fim_meansub: reversed FIM of the mean-subtracted readout
        centered_outputs: ubar_k(t) = u_k(t) - mu_k, C x T
    """
    _check_dimension(fim_meansub, C, T)
    ubar = np.asarray(centered_outputs, dtype=float)
    if ubar.shape != (C, T):
        raise ConfigError(f'centered outputs must be {C} x {T}, got {ubar.shape}')
    normed, sigma = _centered_rows(ubar, 1, 'output')
    root = np.zeros((C * T, C * T))
    for k in range(C):
        n = normed[k]
        root[k * T: (k + 1) * T, k * T: (k + 1) * T] = (np.eye(T) - np.outer(n, n) / T) / sigma[k, 0]
    product = root @ root @ fim_meansub.matrix
    symmetric = root @ fim_meansub.matrix @ root
    return fim_meansub.derive(product, symmetric_form=(symmetric + symmetric.T) / 2.0, mode='bn_last_full')


def layernorm_mean_projector(C, T):
    """(I_C - 1 1^T / C) kron I_T, unit centering per sample in k-major order"""
    return np.kron(np.eye(C) - 1.0 / C, np.eye(T))


def project_layernorm_mean(fim, C, T):
    """B F* B with B the per-sample centering across the C readout units"""
    _check_dimension(fim, C, T)
    projector = layernorm_mean_projector(C, T)
    matrix = projector @ fim.matrix @ projector
    return fim.derive((matrix + matrix.T) / 2.0, mode='layernorm_meansub')


def apply_layernorm_projector(fim_mln, centered_outputs, C, T):
    """
    Q F*_mLN where Q is diagonal in t with (1 / sigma(t)^2)(I_C - ubar(t) ubar(t)^T / (C sigma(t)^2))

    Args:
        fim_mln: reversed FIM after per-sample unit centering
        centered_outputs: ubar_k(t) = u_k(t) - mu(t), C x T
    """
    _check_dimension(fim_mln, C, T)
    ubar = np.asarray(centered_outputs, dtype=float)
    if ubar.shape != (C, T):
        raise ConfigError(f'centered outputs must be {C} x {T}, got {ubar.shape}')
    normed, sigma = _centered_rows(ubar, 0, 'layer')
    root = np.zeros((C * T, C * T))
    for t in range(T):
        n = normed[:, t]
        index = np.arange(C) * T + t
        root[np.ix_(index, index)] = (np.eye(C) - np.outer(n, n) / C) / sigma[0, t]
    product = root @ root @ fim_mln.matrix
    symmetric = root @ fim_mln.matrix @ root
    return fim_mln.derive(product, symmetric_form=(symmetric + symmetric.T) / 2.0, mode='layernorm')


def _power_iteration(matrix, seed, tol, max_iterations):
    vector = substream(seed, 0, PURPOSE_POWER_ITERATION).standard_normal(matrix.shape[0])
    vector /= np.linalg.norm(vector)
    value = 0.0
    for iteration in range(1, max_iterations + 1):
        image = matrix @ vector
        new_value = float(vector @ image)
        norm = np.linalg.norm(image)
        if norm == 0:
            return 0.0, iteration
        vector = image / norm
        if abs(new_value - value) <= tol * abs(new_value):
            return new_value, iteration
        value = new_value
    raise NumericalError(
        f'power iteration did not converge within {max_iterations} iterations',
        iterations=max_iterations,
    )


def spectrum(fim, P=None, full=False, seed=0, tol=POWER_TOLERANCE, max_iterations=POWER_MAX_ITERATIONS):
    """
    eigenvalue statistics of F*; dense symmetric eigensolver up to
    DENSE_EIGEN_LIMIT rows, power iteration above

    Args:
        fim: ReversedFIM
        P: parameter count, defaults to fim.P
        full: keep the whole spectrum (dense solver only)
        seed: start vector seed of the power iteration
    Returns:
        SpectrumStats
    """
    P = fim.P if P is None else int(P)
    if P < 1:
        raise ConfigError(f'parameter count must be positive, got {P}')
    matrix = fim.symmetric
    m_lambda = np.trace(matrix) / P
    s_lambda = np.sum(matrix * matrix) / P
    n = matrix.shape[0]
    if n <= DENSE_EIGEN_LIMIT:
        eigenvalues = linalg.eigh(matrix, eigvals_only=True)[::-1]
        lambda_max = float(eigenvalues[0])
        if eigenvalues[-1] < -PSD_TOLERANCE * max(lambda_max, 0.0) - np.finfo(float).tiny:
            raise NumericalError(f'reversed FIM is not positive semi-definite, min eigenvalue {eigenvalues[-1]:.3g}')
        return SpectrumStats(
            m_lambda, s_lambda, max(lambda_max, 0.0), P,
            eigenvalues=eigenvalues if full else None, solver='dense',
        )
    if full:
        logger.warning(f'full spectrum of a {n} x {n} matrix skipped, using power iteration')
    lambda_max, iterations = _power_iteration(matrix, seed, tol, max_iterations)
    return SpectrumStats(m_lambda, s_lambda, lambda_max, P, solver='power', iterations=iterations)


def _inverse_sqrt(gram, what):
    values, vectors = linalg.eigh(gram)
    if values[0] <= PSD_TOLERANCE * max(values[-1], np.finfo(float).tiny):
        raise NumericalError(f'{what} span is rank deficient')
    return (vectors / np.sqrt(values)) @ vectors.T


def top_eigvec_alignment(R, fim=None, spec=None, M=None):
    """
    principal angles between the top-C eigenvectors of F and span{E[grad f_k]}

    Both subspaces are images under R of CT-vectors (top eigenvectors U of F*
    and block means N), so every inner product is taken in the F* metric.

    Args:
        R: JacobianBlock
        fim: reversed_fim(R), recomputed when omitted
        spec: NetSpec, refused when the network is centered
        M: base width for the report
    Returns:
        AlignmentReport
    """
    if spec is not None and not spec.is_non_centered:
        raise CenteredNetworkError(
            'eigenvectors align with the mean gradients only for non-centered networks'
        )
    fim = reversed_fim(R) if fim is None else fim
    C, T = fim.C, fim.T
    gram = fim.symmetric
    values, vectors = linalg.eigh(gram)
    top_values = values[::-1][:C]
    top = vectors[:, ::-1][:, :C]
    if top_values[-1] <= 0:
        raise NumericalError('reversed FIM has fewer than C positive eigenvalues')
    means = np.kron(np.eye(C), np.ones((T, 1))) / np.sqrt(T)
    mean_basis = _inverse_sqrt(means.T @ gram @ means, 'mean gradient')
    cross = (top.T @ gram @ means) / np.sqrt(top_values)[:, None] @ mean_basis
    cosines = linalg.svdvals(cross)
    vector_cosines = np.linalg.norm(cross, axis=1)
    mode = getattr(fim, 'mode', None)
    return AlignmentReport(cosines, vector_cosines, M=M, mode=mode)


def hessian_fim_consistency(spec, M, T, seed, label_offset=0.0, step=1e-4, max_params=2000):
    """
    largest deviation between the Hessian of the squared loss and F = R R^T,
    relative to the largest entry of F

    Labels are the network's own outputs plus `label_offset`; with zero offset
    every residual vanishes and the Hessian reduces to F. The Hessian is taken
    by central differences of the exact gradient.
    """
    params = netlab.init_params(spec, M, seed)
    if params.num_params > max_params:
        raise ConfigError(f'{params.num_params} parameters exceed the Hessian limit {max_params}')
    batch = netlab.make_batch(spec, M, T, seed)
    trace = netlab.forward(params, batch)
    labels = trace.outputs + label_offset
    R = netlab.jacobian(params, batch, trace=trace).matrix
    fisher = R @ R.T
    theta = params.flatten()
    hessian = np.empty((theta.size, theta.size))
    for p in range(theta.size):
        shift = np.zeros_like(theta)
        shift[p] = step
        _, plus = netlab.loss_gradient(params.from_flat(theta + shift), batch, labels)
        _, minus = netlab.loss_gradient(params.from_flat(theta - shift), batch, labels)
        hessian[:, p] = (plus - minus) / (2 * step)
    hessian = (hessian + hessian.T) / 2.0
    scale = np.max(np.abs(fisher))
    return float(np.max(np.abs(hessian - fisher)) / scale)


def output_deviations(values):
    """per-row standard deviation of a C x T output matrix, sigma_k"""
    values = np.asarray(values, dtype=float)
    centered = values - values.mean(axis=1, keepdims=True)
    _, sigma = _centered_rows(centered, 1, 'output')
    return sigma.ravel()


def layernorm_statistics(values):
    """
    eta1 = mean_t 1/sigma(t)^2, eta2 = mean_t 1/sigma(t)^4 and
    eta3 = mean_{t,t'} g(t, t') / (sigma(t) sigma(t')), where sigma(t) is the
    deviation over units of sample t and g(t, t') the unit-averaged product of
    the standardized readouts

    Args:
        values: raw readout u_k(t), C x T
    """
    values = np.asarray(values, dtype=float)
    C = values.shape[0]
    centered = values - values.mean(axis=0, keepdims=True)
    normed, sigma = _centered_rows(centered, 0, 'layer')
    sigma = sigma.ravel()
    g = normed.T @ normed / C
    inverse = 1.0 / sigma
    return {
        'eta1': float(np.mean(inverse ** 2)),
        'eta2': float(np.mean(inverse ** 4)),
        'eta3': float(np.mean(g * np.outer(inverse, inverse))),
    }


def measure_normalization_stats(trace, mode=None):
    """
    plug-in statistics of the readout u^L

    Returns:
        {'sigma_k': [...]} for the batch-norm readouts,
        {'eta1', 'eta2', 'eta3'} for layer norm
    """
    mode = trace.norm_mode if mode is None else mode
    raw = trace.pre[trace.L].T
    if mode in ('none', 'bn_last_meansub', 'bn_last_full'):
        return {'sigma_k': [float(s) for s in output_deviations(raw)]}
    if mode == 'layernorm':
        return layernorm_statistics(raw)
    raise ConfigError(f'no readout statistics for mode {mode}')


def gamma_scaled_fim(params, batch, gamma):
    """reversed FIM of the batch-normalized readout with per-output scales gamma"""
    mode = params.spec.norm_mode
    if mode not in ('bn_last_meansub', 'bn_last_full'):
        raise ConfigError(f'gamma applies to last-layer batch norm only, spec has {mode}')
    R = netlab.jacobian(params, batch, gamma=gamma)
    return reversed_fim(R, mode=mode, M=params.M, seed=params.seed, spec=params.spec)
