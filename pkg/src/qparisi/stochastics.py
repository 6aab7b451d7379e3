"""Seeded randomness, Gaussian quadrature, and Monte Carlo error bars.

Every stochastic routine in the package draws from an :class:`RngStream`,
a named node in a seed tree. Child streams are derived from (seed, path)
pairs, so results are reproducible for a fixed root seed regardless of
evaluation order or worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MIN_QUAD_NODES = 2
MAX_QUAD_NODES = 128


@dataclass(frozen=True)
class RngStream:
    """A node in a reproducible seed tree.

    Parameters
    ----------
    seed:
        Root seed shared by the whole tree.
    path:
        Tuple of non-negative integers naming this node. Children extend
        the path, so streams for different sample indices, workers, or
        subsystems never collide.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not all(isinstance(p, (int, np.integer)) and p >= 0 for p in self.path):
            raise ValueError("stream path entries must be non-negative integers")

    def child(self, *labels: int) -> "RngStream":
        """Return the stream at ``path + labels``."""
        return RngStream(self.seed, self.path + tuple(int(x) for x in labels))

    def generator(self) -> np.random.Generator:
        """Fresh generator for this node; repeated calls are identical."""
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))


def gaussian_samples(stream: RngStream, count: int, dim: int | None = None) -> np.ndarray:
    """Standard normal draws from ``stream``.

    Returns a vector of length ``count``, or a ``(count, dim)`` array when
    ``dim`` is given.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    gen = stream.generator()
    if dim is None:
        return gen.standard_normal(count)
    return gen.standard_normal((count, dim))


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for an expectation against the standard normal."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-d arrays of equal length")
        if np.any(weights < 0):
            raise ValueError("quadrature weights must be non-negative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("quadrature weights must sum to one")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def expect(self, values: np.ndarray, axis: int = -1) -> np.ndarray:
        """Contract ``values`` with the weights along ``axis``."""
        return np.tensordot(np.asarray(values), self.weights, axes=([axis], [0]))


def gauss_hermite(n_nodes: int) -> QuadratureRule:
    """Gauss-Hermite rule normalized for the standard normal measure.

    ``sum w_i = 1`` exactly (renormalized) and ``sum w_i x_i^2 = 1`` to
    quadrature precision, so low moments are reproduced even at small node
    counts.
    """
    if not MIN_QUAD_NODES <= n_nodes <= MAX_QUAD_NODES:
        raise ValueError(f"n_nodes must lie in [{MIN_QUAD_NODES}, {MAX_QUAD_NODES}]")
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / weights.sum()
    return QuadratureRule(nodes=nodes, weights=weights)


def mc_quadrature(stream: RngStream, n_nodes: int) -> QuadratureRule:
    """Equal-weight Monte Carlo 'rule' with seeded normal nodes.

    Drop-in fallback for :func:`gauss_hermite` when node grids would be too
    large (deep hierarchies). Moments hold only statistically, so the strict
    rule invariants are not enforced here beyond weight normalization.
    """
    nodes = gaussian_samples(stream, n_nodes)
    weights = np.full(n_nodes, 1.0 / n_nodes)
    return QuadratureRule(nodes=nodes, weights=weights)


@dataclass(frozen=True)
class MCEstimate:
    """Mean, standard error, and sample count of a Monte Carlo average."""

    mean: float
    stderr: float
    n_samples: int

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not math.isfinite(self.mean):
            raise ValueError("mean must be finite")
        if self.stderr < 0 or not math.isfinite(self.stderr):
            raise ValueError("stderr must be finite and non-negative")

    def within(self, other: float, n_sigma: float = 3.0, atol: float = 0.0) -> bool:
        """True when ``other`` lies inside ``n_sigma`` error bars (+ ``atol``)."""
        return abs(self.mean - other) <= n_sigma * self.stderr + atol


def mc_estimate(values: Sequence[float] | np.ndarray) -> MCEstimate:
    """Summarize i.i.d. samples; requires at least two for an error bar."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError("values must be one-dimensional")
    if arr.size < 2:
        raise ValueError("need at least two samples for an error bar")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples must be finite")
    mean = stable_sum(arr) / arr.size
    var = stable_sum((arr - mean) ** 2) / (arr.size - 1)
    return MCEstimate(mean=float(mean), stderr=float(math.sqrt(var / arr.size)), n_samples=arr.size)


def combine_difference(a: MCEstimate, b: MCEstimate) -> MCEstimate:
    """Estimate of ``a - b`` for independent estimates, errors in quadrature."""
    return MCEstimate(
        mean=a.mean - b.mean,
        stderr=math.hypot(a.stderr, b.stderr),
        n_samples=min(a.n_samples, b.n_samples),
    )


def stable_sum(values: Sequence[float] | np.ndarray) -> float:
    """Order-robust compensated sum (exact rounding via ``math.fsum``).

    Used for final reductions so that results do not depend on how work was
    chunked across workers.
    """
    arr = np.asarray(values, dtype=float)
    return math.fsum(arr.ravel().tolist())


def pairwise_sum(values: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """Fast pairwise summation for hot paths (numpy's blocked algorithm)."""
    return np.sum(np.asarray(values, dtype=float), axis=axis)
