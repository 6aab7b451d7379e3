"""Classical path representation of the quantum trace.

Slicing the transverse-field trace into ``M`` imaginary-time steps maps the
``N``-spin quantum model onto a classical Ising system on an ``M x N``
cylinder: every site gains a periodic time direction with bond strength
``K`` fixed by ``tanh(beta K) = exp(-2 beta b / M)`` (equivalently
``exp(-2 beta K) = tanh(beta b / M)``), and the sliced trace factorizes as

    Tr [ (e^{-beta H_diag / M} e^{(beta b / M) sum_j S^x_j})^M ]
        = C_{M,N} * sum over path configs sigma of exp(-beta H_path(sigma)),

an exact identity at every finite ``M`` with
``log C_{M,N} = (M N / 2) log( sinh(2 beta b / M) / 2 )``. The path energy
carries the rescaled couplings, the longitudinal field, and the time bonds:

    H_path = - sum_l [ (1/(M sqrt(N))) sum_{i<j} g_ij s_li s_lj
                       + (c/M) sum_i s_li ]
             - K sum_{l,i} s_li s_{l+1,i}        (periodic in l).

Averaging an independent imaginary copy of the couplings out of the path
sum produces the self-overlap corrected energy

    H_eff = H_path + (beta N / (4 M^2)) sum_{l,l'} [ t rho_{ll'}^2
                                                     - 2 rho_{ll'} y_{ll'} ],

where ``rho_{ll'}`` is the slice-overlap matrix of the configuration; the
constant ``exp(beta^2 / 4)`` closes the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .core_quantum import DisorderSample, ModelParams, spin_table
from .stochastics import RngStream, stable_sum

ENUMERATION_CAP = 24
PATH_STATS_CAP = 18
IDENTITY_CAP = 16


@dataclass(frozen=True)
class TrotterConfig:
    """Slice count plus the derived time-bond coupling and prefactor."""

    m_slices: int
    beta: float
    b: float

    def __post_init__(self) -> None:
        if self.m_slices < 1:
            raise ValueError("m_slices must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.b < 0:
            raise ValueError("transverse field must be non-negative")

    @property
    def is_classical(self) -> bool:
        """True when b = 0, where time slices lock and the coupling diverges."""
        return self.b == 0.0

    @property
    def coupling(self) -> float:
        return trotter_coupling(self.beta, self.b, self.m_slices)

    def log_prefactor(self, n_spins: int) -> float:
        return log_prefactor(self.beta, self.b, self.m_slices, n_spins)


def trotter_coupling(beta: float, b: float, m_slices: int) -> float:
    """Time-bond coupling K with tanh(beta K) = exp(-2 beta b / M).

    Returns ``math.inf`` at b = 0 (the classical marker: slices lock into a
    single layer and the path representation degenerates).
    """
    if beta <= 0 or m_slices < 1 or b < 0:
        raise ValueError("need beta > 0, b >= 0, m_slices >= 1")
    if b == 0.0:
        return math.inf
    # atanh(exp(-x)) = -log(tanh(x/2)) / 2, stable for small x
    x = 2.0 * beta * b / m_slices
    if x == 0.0:
        # 2 beta b / M underflowed: slices lock exactly as at b = 0
        return math.inf
    if x < 1e-8:
        # tanh(x/2) = x/2 to double precision, but x/2 itself can underflow
        return -0.5 * (math.log(x) - math.log(2.0)) / beta
    return -0.5 * math.log(math.tanh(x / 2.0)) / beta


def log_prefactor(beta: float, b: float, m_slices: int, n_spins: int) -> float:
    """log C_{M,N} = (M N / 2) log( sinh(2 beta b / M) / 2 )."""
    if b == 0.0:
        raise ValueError("prefactor undefined at b = 0 (classical marker)")
    if beta <= 0 or m_slices < 1 or n_spins < 1:
        raise ValueError("need beta > 0, m_slices >= 1, n_spins >= 1")
    x = 2.0 * beta * b / m_slices
    if x == 0.0:
        raise ValueError("prefactor underflow: 2 beta b / M is zero at double precision")
    if x < 1e-8:
        # sinh(x) = x to double precision, but x/2 itself can underflow
        return 0.5 * m_slices * n_spins * (math.log(x) - math.log(2.0))
    return 0.5 * m_slices * n_spins * math.log(0.5 * math.sinh(x))


@dataclass(frozen=True)
class PathConfiguration:
    """One classical path: an (M, N) array of +-1 slice spins."""

    spins: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.spins)
        if arr.ndim != 2:
            raise ValueError("path configuration must be an (M, N) array")
        if not np.all(np.abs(arr) == 1):
            raise ValueError("path spins must be +-1")
        object.__setattr__(self, "spins", arr.astype(np.int8))

    @property
    def m_slices(self) -> int:
        return self.spins.shape[0]

    @property
    def n_spins(self) -> int:
        return self.spins.shape[1]


def self_overlap(config: PathConfiguration) -> np.ndarray:
    """Slice-overlap matrix rho_{ll'} = (1/N) sum_i s_li s_l'i (diag = 1)."""
    s = config.spins.astype(np.float64)
    return (s @ s.T) / config.n_spins


def path_energy(
    config: PathConfiguration,
    sample: DisorderSample,
    params: ModelParams,
    trotter: TrotterConfig,
) -> float:
    """Classical path energy H_path(sigma); weight is exp(-beta H_path)."""
    if sample.order != 2:
        raise ValueError("path representation needs pair couplings")
    if config.n_spins != params.n_spins:
        raise ValueError("configuration size does not match params")
    if trotter.is_classical:
        raise ValueError("path energy undefined at b = 0 (classical marker)")
    s = config.spins.astype(np.float64)
    m = trotter.m_slices
    pair_term = 0.0
    for (i, j), g in zip(sample.index_tuples(), sample.values):
        pair_term += g * float(np.dot(s[:, i], s[:, j]))
    field_term = params.c * float(s.sum())
    bonds = float(np.sum(s * np.roll(s, -1, axis=0)))
    return (
        -pair_term / (m * math.sqrt(params.n_spins))
        - field_term / m
        - trotter.coupling * bonds
    )


def effective_path_energy(
    config: PathConfiguration,
    sample: DisorderSample,
    params: ModelParams,
    trotter: TrotterConfig,
    t: float = 1.0,
    kernel: np.ndarray | None = None,
) -> float:
    """Self-overlap corrected path energy at interpolation weight ``t``.

    ``kernel`` is an optional (M, M) matrix y coupling slice overlaps;
    omitted means y = 0.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    base = path_energy(config, sample, params, trotter)
    rho = self_overlap(config)
    m = trotter.m_slices
    n = params.n_spins
    quad = t * float(np.sum(rho**2))
    cross = 0.0 if kernel is None else 2.0 * float(np.sum(rho * _as_kernel(kernel, m)))
    return base + params.beta * n / (4.0 * m**2) * (quad - cross)


def _as_kernel(kernel: np.ndarray, m_slices: int) -> np.ndarray:
    arr = np.asarray(kernel, dtype=float)
    if arr.shape != (m_slices, m_slices):
        raise ValueError(f"kernel must be ({m_slices}, {m_slices})")
    return arr


@dataclass(frozen=True)
class PathTable:
    """Sufficient statistics of all 2^{MN} path configurations.

    Rows are ordered by the integer whose bit (l * N + i) gives the spin at
    slice l, site i. Stored statistics make every path sum a matrix product:
    ``pair_prods`` holds sum_l s_li s_lj per coupling pair, ``bond_sum`` the
    periodic time-bond total, ``site_mag`` the per-site time sums, ``rho``
    the slice-overlap matrices, and ``rho_sq_sum`` their squared totals.
    """

    m_slices: int
    n_spins: int
    spins: np.ndarray
    pair_prods: np.ndarray
    bond_sum: np.ndarray
    site_mag: np.ndarray
    rho: np.ndarray
    rho_sq_sum: np.ndarray


@lru_cache(maxsize=8)
def path_table(m_slices: int, n_spins: int) -> PathTable:
    bits_total = m_slices * n_spins
    if bits_total > PATH_STATS_CAP:
        raise ValueError(
            f"size cap exceeded: M*N = {bits_total} > {PATH_STATS_CAP} for path statistics"
        )
    n_cfg = 2**bits_total
    states = np.arange(n_cfg, dtype=np.uint64)
    bits = (states[:, None] >> np.arange(bits_total, dtype=np.uint64)) & 1
    spins = (1 - 2 * bits.astype(np.int8)).reshape(n_cfg, m_slices, n_spins)
    sf = spins.astype(np.float64)
    pairs = [(i, j) for i in range(n_spins) for j in range(i + 1, n_spins)]
    if pairs:
        pair_prods = np.stack(
            [np.einsum("cm,cm->c", sf[:, :, i], sf[:, :, j]) for (i, j) in pairs], axis=1
        )
    else:
        pair_prods = np.zeros((n_cfg, 0))
    bond_sum = np.einsum("cmi,cmi->c", sf, np.roll(sf, -1, axis=1))
    site_mag = sf.sum(axis=1)
    rho = np.einsum("cmi,cni->cmn", sf, sf) / n_spins
    rho_sq_sum = np.einsum("cmn,cmn->c", rho, rho)
    return PathTable(
        m_slices=m_slices,
        n_spins=n_spins,
        spins=spins,
        pair_prods=pair_prods,
        bond_sum=bond_sum,
        site_mag=site_mag,
        rho=rho,
        rho_sq_sum=rho_sq_sum,
    )


def _path_log_weights(
    sample: DisorderSample, params: ModelParams, trotter: TrotterConfig
) -> np.ndarray:
    """-beta * H_path for every configuration, via the cached table."""
    table = path_table(trotter.m_slices, params.n_spins)
    beta, m = params.beta, trotter.m_slices
    a = table.pair_prods @ sample.values * (beta / (m * math.sqrt(params.n_spins)))
    a += (beta * params.c / m) * table.site_mag.sum(axis=1)
    a += beta * trotter.coupling * table.bond_sum
    return a


def enumerate_log_partition(
    params: ModelParams, sample: DisorderSample, m_slices: int
) -> float:
    """log of the sliced trace by brute enumeration of all 2^{MN} paths."""
    bits = m_slices * params.n_spins
    if bits > ENUMERATION_CAP:
        raise ValueError(f"size cap exceeded: M*N = {bits} > {ENUMERATION_CAP}")
    trotter = TrotterConfig(m_slices=m_slices, beta=params.beta, b=params.b)
    if trotter.is_classical:
        raise ValueError("enumeration needs b > 0 (classical marker)")
    if bits <= PATH_STATS_CAP:
        log_w = _path_log_weights(sample, params, trotter)
        return trotter.log_prefactor(params.n_spins) + float(logsumexp(log_w))
    return _streamed_log_partition(params, sample, trotter)


def _streamed_log_partition(
    params: ModelParams, sample: DisorderSample, trotter: TrotterConfig
) -> float:
    """Blockwise enumeration beyond the cached-table cap (fixed block order)."""
    m, n = trotter.m_slices, params.n_spins
    beta = params.beta
    bits_total = m * n
    pairs = sample.index_tuples()
    block_bits = 18
    partials = []
    for start in range(0, 2**bits_total, 2**block_bits):
        count = min(2**block_bits, 2**bits_total - start)
        states = np.arange(start, start + count, dtype=np.uint64)
        bits = (states[:, None] >> np.arange(bits_total, dtype=np.uint64)) & 1
        sf = (1 - 2 * bits.astype(np.int8)).reshape(count, m, n).astype(np.float64)
        a = np.zeros(count)
        for (i, j), g in zip(pairs, sample.values):
            a += g * np.einsum("cm,cm->c", sf[:, :, i], sf[:, :, j])
        a *= beta / (m * math.sqrt(n))
        a += (beta * params.c / m) * sf.sum(axis=(1, 2))
        a += beta * trotter.coupling * np.einsum("cmi,cmi->c", sf, np.roll(sf, -1, axis=1))
        partials.append(float(logsumexp(a)))
    return trotter.log_prefactor(n) + float(logsumexp(partials))


def trotter_log_partition(
    params: ModelParams, sample: DisorderSample, m_slices: int
) -> float:
    """log of the sliced trace by exact transfer-matrix contraction.

    Algebraically identical to :func:`enumerate_log_partition` (the path sum
    telescopes into a product of 2^N x 2^N slice matrices) but with cost
    M * 4^N instead of 2^{MN}, so large slice counts stay cheap.
    """
    trotter = TrotterConfig(m_slices=m_slices, beta=params.beta, b=params.b)
    if trotter.is_classical:
        raise ValueError("path representation needs b > 0 (classical marker)")
    n = params.n_spins
    if n > 10:
        raise ValueError("transfer contraction capped at 10 spins")
    beta, m = params.beta, m_slices
    sz = spin_table(n).astype(np.float64)
    slice_energy = np.zeros(2**n)
    for (i, j), g in zip(sample.index_tuples(), sample.values):
        slice_energy += g * sz[:, i] * sz[:, j]
    slice_energy /= math.sqrt(n)
    slice_energy += params.c * sz.sum(axis=1)
    diag = (beta / m) * slice_energy

    states = np.arange(2**n, dtype=np.int64)
    xor = states[:, None] ^ states[None, :]
    popcount = np.zeros(xor.shape, dtype=np.int64)
    for j in range(n):
        popcount += (xor >> j) & 1
    agree = n - 2 * popcount  # sum_i s_i(s) s_i(s')
    log_bond = beta * trotter.coupling * agree.astype(np.float64)

    # multiply M slice matrices in scaled space to avoid overflow
    log_t = diag[:, None] + log_bond
    shift = float(log_t.max())
    t_mat = np.exp(log_t - shift)
    acc = np.eye(2**n)
    log_scale = 0.0
    for _ in range(m):
        acc = acc @ t_mat
        peak = float(acc.max())
        acc /= peak
        log_scale += math.log(peak)
    trace = float(np.trace(acc))
    return (
        trotter.log_prefactor(n)
        + log_scale
        + m * shift
        + math.log(trace)
    )


class IdentityCheck(NamedTuple):
    """Comparison of the imaginary-coupling average against its closed form."""

    lhs: float  # log of the Monte Carlo inner average of the path sum
    rhs: float  # log of exp(beta^2/4) * sum_sigma exp(-beta H_eff)
    gap_sigmas: float  # (mean - closed form) / stderr, on the linear scale
    stderr_log: float  # relative error of the linear-scale mean


def corrected_identity_check(
    params: ModelParams,
    sample: DisorderSample,
    m_slices: int,
    n_mc: int,
    stream: RngStream,
) -> IdentityCheck:
    """Monte Carlo check of the annealed imaginary-coupling identity.

    Draws antithetic pairs of imaginary coupling copies, averages the
    complex path sums (exactly real per pair), and compares against
    exp(beta^2/4) times the self-overlap corrected path sum at t = 1, y = 0.
    The identity is exact at every finite M and N, so the gap is pure Monte
    Carlo noise.
    """
    bits = m_slices * params.n_spins
    if bits > IDENTITY_CAP:
        raise ValueError(f"size cap exceeded: M*N = {bits} > {IDENTITY_CAP}")
    if n_mc < 4 or n_mc % 2 != 0:
        raise ValueError("n_mc must be even and >= 4")
    trotter = TrotterConfig(m_slices=m_slices, beta=params.beta, b=params.b)
    if trotter.is_classical:
        raise ValueError("identity check needs b > 0 (classical marker)")

    table = path_table(m_slices, params.n_spins)
    log_w = _path_log_weights(sample, params, trotter)
    shift = float(log_w.max())
    w = np.exp(log_w - shift)

    beta, m, n = params.beta, m_slices, params.n_spins
    rhs_linear = math.exp(beta**2 / 4.0) * float(
        np.exp(-beta**2 * n / (4.0 * m**2) * table.rho_sq_sum) @ w
    )

    n_pairs = n_mc // 2
    gen = stream.generator()
    g1 = gen.standard_normal((n_pairs, sample.values.size))
    phases = (beta / (m * math.sqrt(n))) * (table.pair_prods @ g1.T)
    samples = (w[:, None] * np.cos(phases)).sum(axis=0)

    mean = stable_sum(samples) / n_pairs
    var = stable_sum((samples - mean) ** 2) / max(n_pairs - 1, 1)
    stderr = math.sqrt(var / n_pairs)
    if mean <= 0:
        raise RuntimeError("inner average of the path sum is non-positive")
    gap = (mean - rhs_linear) / stderr if stderr > 0 else 0.0
    return IdentityCheck(
        lhs=shift + math.log(mean),
        rhs=shift + math.log(rhs_linear),
        gap_sigmas=float(gap),
        stderr_log=float(stderr / mean),
    )
