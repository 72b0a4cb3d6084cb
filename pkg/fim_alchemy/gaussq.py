# -*- coding: utf-8 -*-
"""
Gaussian expectations by deterministic quadrature: Gauss-Hermite in one
dimension, a polar Laguerre x Legendre product rule in two.

All integrals are against the standard normal density, Du = du exp(-u^2/2)/sqrt(2 pi).
"""
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.laguerre import laggauss
from numpy.polynomial.legendre import leggauss

from .exceptions import ConfigError, DomainError
from .utils import DEFAULT_QUADRATURE_ORDER


# correlations closer than this to +-1 are treated as exactly +-1
CORRELATION_SNAP = 1e-9


class QuadratureGrid(object):
    def __init__(self, nodes, weights):
        """
        Args:
            nodes: abscissae for the standard normal measure
            weights: positive weights summing to one
        """
        nodes = np.array(nodes, dtype=float)
        weights = np.array(weights, dtype=float)
        nodes.setflags(write=False)
        weights.setflags(write=False)
        self.nodes = nodes
        self.weights = weights

    @property
    def order(self):
        return self.nodes.size

    def __repr__(self):
        return f'QuadratureGrid<{self.order}>'

    def __eq__(self, other):
        if not isinstance(other, QuadratureGrid):
            return NotImplemented
        return np.array_equal(self.nodes, other.nodes) and np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash((self.order, self.nodes.tobytes()))

    def moment(self, power):
        """quadrature value of E[u^power]"""
        return float(np.dot(self.weights, self.nodes ** power))


@lru_cache(maxsize=16)
def build_grid(order=DEFAULT_QUADRATURE_ORDER):
    """
    Gauss-Hermite grid normalized to the standard Gaussian measure

    Args:
        order: number of nodes, at least 2
    Returns:
        QuadratureGrid
    """
    if int(order) != order or order < 2:
        raise ConfigError(f'quadrature order must be an integer >= 2, got {order}')
    nodes, weights = hermegauss(int(order))
    # exact mirror symmetry; hermegauss is symmetric only to rounding
    nodes = (nodes - nodes[::-1]) / 2.0
    weights = (weights + weights[::-1]) / 2.0
    weights = weights / weights.sum()
    return QuadratureGrid(nodes, weights)


def _grid(grid):
    return build_grid() if grid is None else grid


def _paired_sum(grid, values):
    # mirrored nodes are summed pairwise so odd integrands cancel exactly
    half = grid.order // 2
    low = values[:half][::-1]
    high = values[grid.order - half:]
    total = np.dot(grid.weights[grid.order - half:], low + high)
    if grid.order % 2:
        total += grid.weights[half] * values[half]
    return float(total)


def check_moments(a, b=None):
    """raise DomainError unless a > 0 and |b| <= a"""
    if not a > 0:
        raise DomainError(f'variance must be positive, got {a}')
    if b is not None and not abs(b) <= a * (1 + 1e-12):
        raise DomainError(f'covariance {b} exceeds variance {a}')


def expect1(f, q, grid=None):
    """
    E[f(sqrt(q) u)] for u standard normal

    Args:
        f: vectorized scalar function
        q: variance, > 0
        grid: QuadratureGrid, default order grid when omitted
    """
    check_moments(q)
    grid = _grid(grid)
    values = np.broadcast_to(f(np.sqrt(q) * grid.nodes), grid.nodes.shape)
    return _paired_sum(grid, values)


@lru_cache(maxsize=16)
def _polar_rule(order):
    # radial weight r exp(-r^2/2) dr is exp(-s) ds with s = r^2/2
    s, radial_weights = laggauss(order)
    angles, angle_weights = leggauss(max(order // 2, 2))
    return np.sqrt(2 * s), radial_weights, angles, angle_weights


def expect2(f, g, a, b, grid=None):
    """
    E[f(u) g(v)] for (u, v) centered Gaussian with Var u = Var v = a, Cov(u, v) = b

    The plane is integrated as a tensor product in polar coordinates, radius
    by Gauss-Laguerre and angle by Gauss-Legendre panels split where either
    argument changes sign, so activations with a kink at zero are integrated
    without kink error. Angles are folded onto [0, pi) by pairing (r, -r).

    Args:
        f, g: vectorized scalar functions
        a: common variance, > 0
        b: covariance, |b| <= a
        grid: QuadratureGrid, its order sets the radial and angular node counts
    """
    check_moments(a, b)
    grid = _grid(grid)
    c = min(max(b / a, -1.0), 1.0)
    if c > 1 - CORRELATION_SNAP:
        return expect1(lambda u: f(u) * g(u), a, grid)
    if c < -1 + CORRELATION_SNAP:
        return expect1(lambda u: f(u) * g(-u), a, grid)
    radii, radial_weights, angles, angle_weights = _polar_rule(grid.order)
    psi = np.arccos(c)
    cuts = sorted({0.0, np.pi / 2, (psi + np.pi / 2) % np.pi, np.pi})
    root = np.sqrt(a)
    total = 0.0
    for low, high in zip(cuts[:-1], cuts[1:]):
        if high - low < 1e-15:
            continue
        theta = (high - low) / 2 * angles + (high + low) / 2
        u = root * radii[:, None] * np.cos(theta)[None, :]
        v = root * radii[:, None] * np.cos(theta - psi)[None, :]
        values = np.broadcast_to(f(u) * g(v) + f(-u) * g(-v), u.shape)
        total += radial_weights @ values @ ((high - low) / 2 * angle_weights)
    return float(total / (2 * np.pi))
