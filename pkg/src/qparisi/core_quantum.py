"""Exact diagonalization of transverse-field mean-field spin glasses.

Spins live on ``N`` sites with Pauli matrices ``S^z`` (diagonal, eigenvalues
+-1) and ``S^x`` (bit flip). The Hamiltonian is

    H = -N^{-1/2} sum_{i<j} g_ij S^z_i S^z_j - sum_j (c S^z_j + b S^x_j)

for the pair model, with the pair term replaced by a normalized p-tuple sum
for the even p-spin variant. Everything here is dense and exact: partition
functions, Gibbs and Duhamel brackets, and the corrected partition function
in which an independent imaginary copy of the couplings is averaged out.

Operator dumps use a little-endian binary layout: magic ``b"QPOP"``, uint32
version, uint64 row and column counts, then the row-major complex128 matrix.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .stochastics import MCEstimate, RngStream, mc_estimate, stable_sum

HILBERT_CAP = 14
CORRECTED_CAP = 6

_DUMP_MAGIC = b"QPOP"
_DUMP_VERSION = 1


@dataclass(frozen=True)
class ModelParams:
    """Inverse temperature and field strengths of one model instance."""

    beta: float
    b: float
    c: float
    n_spins: int

    def __post_init__(self) -> None:
        if self.beta <= 0 or not math.isfinite(self.beta):
            raise ValueError("beta must be positive and finite")
        if self.b < 0:
            raise ValueError("transverse field b must be non-negative")
        if not math.isfinite(self.b) or not math.isfinite(self.c):
            raise ValueError("fields must be finite")
        if self.n_spins < 1:
            raise ValueError("n_spins must be positive")


@dataclass(frozen=True)
class DisorderSample:
    """Couplings for all ``binomial(N, p)`` interaction tuples.

    Values are ordered like ``itertools.combinations(range(N), p)``.
    """

    order: int
    n_spins: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.order < 2 or self.order % 2 != 0:
            raise ValueError("interaction order must be even and >= 2")
        values = np.asarray(self.values, dtype=float)
        expected = math.comb(self.n_spins, self.order)
        if values.shape != (expected,):
            raise ValueError(f"expected {expected} coupling values, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("couplings must be finite")
        object.__setattr__(self, "values", values)

    def index_tuples(self) -> list[tuple[int, ...]]:
        return list(combinations(range(self.n_spins), self.order))

    def pair_matrix(self) -> np.ndarray:
        """Symmetric ``(N, N)`` coupling matrix (pair interactions only)."""
        if self.order != 2:
            raise ValueError("pair_matrix only defined for order-2 samples")
        mat = np.zeros((self.n_spins, self.n_spins))
        for (i, j), g in zip(self.index_tuples(), self.values):
            mat[i, j] = mat[j, i] = g
        return mat

    def restrict(self, sites: tuple[int, ...]) -> "DisorderSample":
        """Sub-sample on ``sites`` (relabeled 0..len-1 in order), keeping values.

        ``sites`` must be sorted; the monotone relabeling then preserves the
        lexicographic tuple order, so filtered values stay aligned.
        """
        if list(sites) != sorted(set(sites)):
            raise ValueError("sites must be sorted and distinct")
        site_set = set(sites)
        vals = [
            g
            for tup, g in zip(self.index_tuples(), self.values)
            if site_set.issuperset(tup)
        ]
        return DisorderSample(self.order, len(sites), np.array(vals))


@dataclass(frozen=True)
class ComplexCoupledSample:
    """A disorder draw together with an independent imaginary copy."""

    real_part: DisorderSample
    imag_part: DisorderSample

    def __post_init__(self) -> None:
        if (
            self.real_part.order != self.imag_part.order
            or self.real_part.n_spins != self.imag_part.n_spins
        ):
            raise ValueError("real and imaginary parts must have matching shape")

    def conjugate(self) -> "ComplexCoupledSample":
        flipped = DisorderSample(
            self.imag_part.order, self.imag_part.n_spins, -self.imag_part.values
        )
        return ComplexCoupledSample(self.real_part, flipped)


@dataclass(frozen=True)
class SpectralData:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a Hamiltonian."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    @property
    def n_spins(self) -> int:
        n = self.dim.bit_length() - 1
        if 2**n != self.dim:
            raise ValueError("spectral dimension is not a power of two")
        return n


def draw_disorder(n_spins: int, order: int, stream: RngStream) -> DisorderSample:
    """Standard normal couplings for every interaction tuple."""
    count = math.comb(n_spins, order)
    gen = stream.generator()
    return DisorderSample(order, n_spins, gen.standard_normal(count))


def _check_cap(n_spins: int, cap: int = HILBERT_CAP) -> None:
    if n_spins > cap:
        raise ValueError(f"system size {n_spins} exceeds the dense cap of {cap} spins")


def spin_table(n_spins: int) -> np.ndarray:
    """``(2^N, N)`` table of S^z eigenvalues; bit 0 of the state is site 0."""
    states = np.arange(2**n_spins, dtype=np.uint32)
    bits = (states[:, None] >> np.arange(n_spins)) & 1
    return 1 - 2 * bits.astype(np.int8)


def diagonal_coupling_energy(sample: DisorderSample) -> np.ndarray:
    """Diagonal of the normalized interaction term, one entry per basis state.

    For order p the normalization is sqrt(p! / (2 N^{p-1})); at p = 2 this is
    the familiar 1/sqrt(N).
    """
    n, p = sample.n_spins, sample.order
    sz = spin_table(n).astype(np.float64)
    pref = math.sqrt(math.factorial(p) / (2.0 * n ** (p - 1)))
    total = np.zeros(2**n)
    for tup, g in zip(sample.index_tuples(), sample.values):
        prod = sz[:, tup[0]].copy()
        for site in tup[1:]:
            prod *= sz[:, site]
        total += g * prod
    return -pref * total


def _transverse_part(n_spins: int, b: float) -> np.ndarray:
    dim = 2**n_spins
    h = np.zeros((dim, dim))
    if b == 0.0:
        return h
    states = np.arange(dim)
    for j in range(n_spins):
        flipped = states ^ (1 << j)
        h[states, flipped] -= b
    return h


def build_sk_hamiltonian(params: ModelParams, sample: DisorderSample) -> np.ndarray:
    """Dense pair-interaction Hamiltonian with longitudinal and transverse fields."""
    if sample.order != 2:
        raise ValueError("pair Hamiltonian needs an order-2 sample")
    if sample.n_spins != params.n_spins:
        raise ValueError("sample size does not match params")
    _check_cap(params.n_spins)
    sz = spin_table(params.n_spins).astype(np.float64)
    diag = diagonal_coupling_energy(sample) - params.c * sz.sum(axis=1)
    h = _transverse_part(params.n_spins, params.b)
    h[np.diag_indices_from(h)] += diag
    return h


def build_pspin_hamiltonian(params: ModelParams, sample: DisorderSample) -> np.ndarray:
    """Dense even p-tuple Hamiltonian with the same field terms."""
    if sample.n_spins != params.n_spins:
        raise ValueError("sample size does not match params")
    _check_cap(params.n_spins)
    sz = spin_table(params.n_spins).astype(np.float64)
    diag = diagonal_coupling_energy(sample) - params.c * sz.sum(axis=1)
    h = _transverse_part(params.n_spins, params.b)
    h[np.diag_indices_from(h)] += diag
    return h


def spectral_decompose(hamiltonian: np.ndarray) -> SpectralData:
    """Eigensystem of a Hermitian operator; validates Hermiticity first."""
    h = np.asarray(hamiltonian)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError("operator must be square")
    scale = max(1.0, float(np.abs(h).max()))
    if np.abs(h - h.conj().T).max() > 1e-12 * scale:
        raise ValueError("operator is not Hermitian")
    vals, vecs = np.linalg.eigh(h)
    return SpectralData(eigenvalues=vals, eigenvectors=vecs)


def log_partition(spectral: SpectralData, beta: float) -> float:
    """log Tr exp(-beta H), overflow-safe."""
    return float(logsumexp(-beta * spectral.eigenvalues))


def _gibbs_weights(spectral: SpectralData, beta: float) -> np.ndarray:
    e = spectral.eigenvalues
    w = np.exp(-beta * (e - e.min()))
    return w / w.sum()


def gibbs_expectation(operator: np.ndarray, spectral: SpectralData, beta: float) -> float:
    """Thermal expectation <A> = Tr(A e^{-beta H}) / Z."""
    p = _gibbs_weights(spectral, beta)
    v = spectral.eigenvectors
    diag = np.einsum("im,ij,jm->m", v.conj(), operator, v, optimize=True)
    val = np.dot(p, diag)
    if abs(val.imag) > 1e-10 * max(1.0, abs(val.real)):
        raise ValueError("Gibbs expectation of a non-Hermitian operator")
    return float(val.real)


def duhamel(a: np.ndarray, b: np.ndarray, spectral: SpectralData, beta: float) -> float:
    """Duhamel two-point function (A, B).

    In the eigenbasis this is sum_{mn} A_mn B_nm phi(E_m, E_n) / Z with
    phi(E, E') = (e^{-beta E} - e^{-beta E'}) / (beta (E' - E)) and the
    diagonal limit phi(E, E) = e^{-beta E}. Evaluated through the symmetric
    exp((E+E')/2) * sinhc form so near-degenerate pairs are stable.
    """
    e = spectral.eigenvalues - spectral.eigenvalues.min()
    v = spectral.eigenvectors
    at = v.conj().T @ a @ v
    bt = v.conj().T @ b @ v
    mid = 0.5 * (e[:, None] + e[None, :])
    half_gap = 0.5 * beta * (e[None, :] - e[:, None])
    # sinh(x)/x with the x -> 0 limit handled exactly
    small = np.abs(half_gap) < 1e-6
    sinhc = np.where(small, 1.0 + half_gap**2 / 6.0, np.sinh(np.where(small, 1.0, half_gap)) / np.where(small, 1.0, half_gap))
    phi = np.exp(-beta * mid) * sinhc
    z = np.exp(-beta * e).sum()
    val = np.sum(at * bt.T * phi) / z
    if abs(val.imag) > 1e-9 * max(1.0, abs(val.real)):
        raise ValueError("Duhamel bracket expected to be real for Hermitian inputs")
    return float(val.real)


def overlap_second_moment(spectral: SpectralData, beta: float) -> float:
    """(1/N^2) sum_{ij} <S^z_i S^z_j>^2, diagonal included (>= 1/N)."""
    n = spectral.n_spins
    p = _gibbs_weights(spectral, beta)
    v = spectral.eigenvectors
    state_weights = (np.abs(v) ** 2) @ p
    sz = spin_table(n).astype(np.float64)
    corr = sz.T @ (state_weights[:, None] * sz)
    return float(np.sum(corr**2) / n**2)


def quenched_free_energy(
    params: ModelParams,
    n_samples: int,
    stream: RngStream,
    order: int = 2,
    workers: int = 1,
) -> MCEstimate:
    """Disorder average of (1/N) log Z by exact diagonalization per draw.

    Per-sample seeds come from child streams indexed by sample number, so
    the result is bit-identical for any worker count.
    """
    if n_samples < 2:
        raise ValueError("need at least two disorder samples")
    _check_cap(params.n_spins)

    def one(j: int) -> float:
        sample = draw_disorder(params.n_spins, order, stream.child(j))
        build = build_sk_hamiltonian if order == 2 else build_pspin_hamiltonian
        h = build(params, sample)
        vals = np.linalg.eigvalsh(h)
        return float(logsumexp(-params.beta * vals)) / params.n_spins

    values = _map_ordered(one, n_samples, workers)
    return mc_estimate(values)


def _map_ordered(fn, n_items: int, workers: int) -> list:
    """Apply ``fn`` to 0..n_items-1, preserving index order in the output."""
    if workers <= 1:
        return [fn(j) for j in range(n_items)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_items)))


def complex_coupled_hamiltonian(
    params: ModelParams, coupled: ComplexCoupledSample
) -> np.ndarray:
    """Dense complex Hamiltonian for couplings g + i g' (diagonal imaginary part)."""
    base = build_sk_hamiltonian(params, coupled.real_part)
    imag_diag = diagonal_coupling_energy(coupled.imag_part)
    return base.astype(np.complex128) + 1j * np.diag(imag_diag)


def corrected_log_partition(
    params: ModelParams,
    sample: DisorderSample,
    n_inner: int,
    stream: RngStream,
    zero_imaginary: bool = False,
) -> float:
    """log of the inner average of Tr exp(-beta H(g + i g')) over g'.

    The imaginary copies are drawn in antithetic pairs (g', -g'). Flipping
    g' conjugates the trace, so each pair averages to the real part of the
    g' member exactly; the estimate is real by construction. Raises if the
    averaged trace is not positive (cannot take a log).
    """
    if sample.order != 2:
        raise ValueError("corrected partition function is defined for pair couplings")
    _check_cap(params.n_spins, CORRECTED_CAP)
    if n_inner < 2 or n_inner % 2 != 0:
        raise ValueError("n_inner must be even and >= 2")

    base = build_sk_hamiltonian(params, sample).astype(np.complex128)
    if zero_imaginary:
        vals = np.linalg.eigvalsh(base.real)
        return float(logsumexp(-params.beta * vals))

    n_pairs = n_inner // 2
    gen = stream.generator()
    n_pairs_couplings = math.comb(params.n_spins, 2)
    sz = spin_table(params.n_spins).astype(np.float64)
    pref = 1.0 / math.sqrt(params.n_spins)
    pair_prods = np.empty((2**params.n_spins, n_pairs_couplings))
    for k, (i, j) in enumerate(combinations(range(params.n_spins), 2)):
        pair_prods[:, k] = sz[:, i] * sz[:, j]

    # scale traces by exp(-shift) against overflow; shift cancels in the log
    ground = float(np.linalg.eigvalsh(base.real).min())
    traces = np.empty(n_pairs, dtype=np.complex128)
    block = 256
    for start in range(0, n_pairs, block):
        stop = min(start + block, n_pairs)
        g1 = gen.standard_normal((stop - start, n_pairs_couplings))
        imag_diags = -pref * (g1 @ pair_prods.T)
        mats = base[None, :, :] + 1j * imag_diags[:, :, None] * np.eye(base.shape[0])
        lam = np.linalg.eigvals(mats)
        traces[start:stop] = np.exp(-params.beta * (lam - ground)).sum(axis=1)

    # the antithetic partner contributes the conjugate trace, so each pair
    # averages to the real part exactly
    mean_trace = stable_sum(traces.real) / n_pairs
    if mean_trace <= 0:
        raise RuntimeError(
            f"inner average of the corrected trace is non-positive ({mean_trace:.3e}); "
            "increase n_inner or reduce beta"
        )
    return float(math.log(mean_trace) - params.beta * ground)


def corrected_log_partition_classical(params: ModelParams, sample: DisorderSample) -> float:
    """Closed form of the corrected log partition at b = 0.

    With no transverse field the trace factorizes and the imaginary average
    is a Gaussian characteristic function, giving
    log Z_classical - beta^2 (N - 1) / 4 exactly.
    """
    if params.b != 0.0:
        raise ValueError("closed form requires b = 0")
    sz = spin_table(params.n_spins).astype(np.float64)
    energy = diagonal_coupling_energy(sample) - params.c * sz.sum(axis=1)
    log_z = float(logsumexp(-params.beta * energy))
    return log_z - params.beta**2 * (params.n_spins - 1) / 4.0


def superadditivity_gap(
    left: int,
    right: int,
    beta: float,
    b: float,
    c: float,
    n_samples: int,
    n_inner: int,
    stream: RngStream,
    workers: int = 1,
) -> MCEstimate:
    """Estimate (L+M) p_{L+M} - L p_L - M p_M + beta^2/4 for the corrected model.

    Sub-block couplings are restrictions of the full draw (a valid coupling
    of identically distributed systems), which correlates the three terms
    and shrinks the variance of the gap estimate.
    """
    total = left + right
    _check_cap(total, CORRECTED_CAP)
    if min(left, right) < 1:
        raise ValueError("block sizes must be positive")

    p_full = ModelParams(beta=beta, b=b, c=c, n_spins=total)
    p_left = ModelParams(beta=beta, b=b, c=c, n_spins=left)
    p_right = ModelParams(beta=beta, b=b, c=c, n_spins=right)

    def one(j: int) -> float:
        node = stream.child(j)
        g_full = draw_disorder(total, 2, node.child(0))
        g_left = g_full.restrict(tuple(range(left)))
        g_right = g_full.restrict(tuple(range(left, total)))
        lp_full = corrected_log_partition(p_full, g_full, n_inner, node.child(1))
        lp_left = corrected_log_partition(p_left, g_left, n_inner, node.child(2))
        lp_right = corrected_log_partition(p_right, g_right, n_inner, node.child(3))
        return lp_full - lp_left - lp_right + beta**2 / 4.0

    values = _map_ordered(one, n_samples, workers)
    return mc_estimate(values)


def save_operator(operator: np.ndarray, path: str | Path) -> None:
    """Write a matrix as the documented binary dump (complex128, row-major)."""
    op = np.ascontiguousarray(np.asarray(operator, dtype=np.complex128))
    if op.ndim != 2:
        raise ValueError("only matrices can be dumped")
    header = _DUMP_MAGIC + struct.pack("<IQQ", _DUMP_VERSION, op.shape[0], op.shape[1])
    Path(path).write_bytes(header + op.tobytes())


def load_operator(path: str | Path) -> np.ndarray:
    """Read a matrix written by :func:`save_operator`."""
    raw = Path(path).read_bytes()
    if raw[:4] != _DUMP_MAGIC:
        raise ValueError("not an operator dump")
    version, rows, cols = struct.unpack("<IQQ", raw[4 : 4 + 20])
    if version != _DUMP_VERSION:
        raise ValueError(f"unsupported dump version {version}")
    data = np.frombuffer(raw[24:], dtype=np.complex128)
    if data.size != rows * cols:
        raise ValueError("dump payload size mismatch")
    return data.reshape(rows, cols).copy()
