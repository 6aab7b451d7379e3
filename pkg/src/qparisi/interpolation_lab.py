"""Two-dial interpolation between the path model and its hierarchical bound.

Dial ``s`` slides the pair-coupled path model (s = 1) into independent sites
dressed with a tree of Gaussian fields (s = 0); dial ``t`` scales the
self-overlap correction. Both imaginary Gaussian families of the construction
are averaged out analytically before any sampling, so every weight handled
here is real and positive:

* the imaginary pair coupling leaves ``s t * (beta^2/4 - (beta^2 N / 4 M^2)
  sum_{l,l'} rho_{ll'}^2)`` in the exponent,
* the imaginary deepest field level leaves the per-site penalty
  ``-(1-s) (beta^2 xi'(q_k) / 2 M^2) sum_i (sum_l s_li)^2``.

Everything in this module (free-energy estimates, nested two-replica
brackets, the interpolation sum rule, tilted pair partition functions,
concentration scans) rides on one enumeration of the ``2^(M N)`` path
configurations, so system sizes stay deliberately tiny. At ``b = 0`` the
slices lock and the engine degrades to its one-slice classical form, with the
kernel entering through its mean only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core_quantum import DisorderSample, ModelParams, _map_ordered, draw_disorder
from .rsb_functional import (
    MixtureFunction,
    QuadratureSpec,
    RsbParams,
    SelfOverlapKernel,
    SingleSiteModel,
    _field_gaps,
    elog_zeta0,
    parisi_functional,
)
from .stochastics import MCEstimate, RngStream, gaussian_samples, mc_estimate
from .trotter_rep import PathConfiguration, PathTable, TrotterConfig, path_table

PHI_SITE_CAP = 6
PHI_SLICE_CAP = 6
PHI_DEPTH_CAP = 2
BRACKET_BITS_CAP = 12
PAIR_BITS_CAP = 8
VECTOR_NODE_CAP = 4096
DEVIATION_RANGE = 4.0


@dataclass(frozen=True)
class InterpPoint:
    """Position ``(s, t)`` of the interpolation, both dials in [0, 1]."""

    s: float
    t: float

    def __post_init__(self) -> None:
        for name, value in (("s", self.s), ("t", self.t)):
            if not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class NSequence:
    """Two-replica exponent sequence ``n_0 <= ... <= n_k`` for coupling level ``r``.

    Replicas share the Gaussian levels below ``r`` and carry half the single
    -replica exponent there, so that the pair system reproduces ``Z^{m_p}``
    once the two copies are contracted.
    """

    r: int
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.r < 1:
            raise ValueError("coupling level r must be at least 1")
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 2:
            raise ValueError("need exponents n_0..n_k with k >= 1")
        if vals[0] != 0.0:
            raise ValueError("n_0 must be zero")
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise ValueError("exponents must be nondecreasing")
        if vals[-1] > 1.0:
            raise ValueError("exponents cannot exceed one")
        if self.r > len(vals) - 1:
            raise ValueError("coupling level exceeds the hierarchy depth")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_rsb(cls, rsb: RsbParams, r: int) -> "NSequence":
        """Halve the exponents of the shared levels ``p < r``, keep the rest."""
        if not 1 <= r <= rsb.k:
            raise ValueError(f"coupling level must lie in 1..{rsb.k}")
        values = tuple(
            0.5 * rsb.m[p] if p < r else rsb.m[p] for p in range(rsb.k + 1)
        )
        return cls(r=r, values=values)

    def delta(self, level: int) -> float:
        """Increment ``n_level - n_{level-1}``; nonnegative by construction."""
        if not 1 <= level <= len(self.values) - 1:
            raise ValueError("level out of range")
        return self.values[level] - self.values[level - 1]


@dataclass(frozen=True)
class TiltParams:
    """Deviation threshold ``u`` and exponential tilt rate ``lam`` at level ``r``."""

    r: int
    u: float
    lam: float

    def __post_init__(self) -> None:
        if self.r < 1:
            raise ValueError("coupling level r must be at least 1")
        if not 0.0 <= self.u <= DEVIATION_RANGE:
            raise ValueError(f"threshold u must lie in [0, {DEVIATION_RANGE}]")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError("tilt rate must be finite and non-negative")


@dataclass(frozen=True)
class GaussianLevels:
    """One draw of the field hierarchy for a replica pair plus pair couplings.

    ``fields[p, a, i]`` is the level-``p`` standard normal seen by replica
    ``a`` at site ``i`` for the numeric levels ``p = 0..k-1`` (the deepest
    level is always handled analytically). Levels below ``shared_below`` hold
    identical values in both replicas; level 0 is therefore always shared.
    """

    shared_below: int
    fields: np.ndarray
    pair: np.ndarray

    def __post_init__(self) -> None:
        fields = np.asarray(self.fields, dtype=float)
        pair = np.asarray(self.pair, dtype=float)
        if fields.ndim != 3 or fields.shape[0] < 1 or fields.shape[1] != 2:
            raise ValueError("fields must have shape (depth, 2, n_sites)")
        if not 1 <= self.shared_below <= fields.shape[0]:
            raise ValueError("shared_below must lie in 1..depth")
        shared = fields[: self.shared_below]
        if not np.array_equal(shared[:, 0], shared[:, 1]):
            raise ValueError("levels below the coupling level must coincide")
        if pair.ndim != 1 or pair.size != math.comb(fields.shape[2], 2):
            raise ValueError("pair couplings must match binomial(n_sites, 2)")
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "pair", pair)

    @classmethod
    def draw(
        cls, stream: RngStream, depth: int, shared_below: int, n_sites: int
    ) -> "GaussianLevels":
        if depth < 1 or n_sites < 1:
            raise ValueError("depth and n_sites must be positive")
        first = gaussian_samples(stream.child(0), depth, n_sites)
        fresh = gaussian_samples(stream.child(1), depth, n_sites)
        second = np.concatenate([first[:shared_below], fresh[shared_below:]])
        pair = gaussian_samples(stream.child(2), math.comb(n_sites, 2))
        return cls(
            shared_below=shared_below,
            fields=np.stack([first, second], axis=1),
            pair=pair,
        )


class PathEngine:
    """Enumerated path statistics with the interpolation's coupling constants.

    All interpolated weights share the same per-configuration building blocks
    (pair products, time bonds, site magnetizations, the kernel quadratic
    form), so they are computed once here. ``b = 0`` collapses the time
    direction to a single slice with no bond term and no prefactor.
    """

    def __init__(
        self,
        params: ModelParams,
        m_slices: int,
        kernel: SelfOverlapKernel,
        mix: MixtureFunction | None = None,
    ) -> None:
        mix = MixtureFunction(2) if mix is None else mix
        if mix.order != 2:
            raise ValueError("the interpolation is built on pair disorder")
        if kernel.m_slices != m_slices:
            raise ValueError("kernel slice count must match m_slices")
        if params.b == 0.0:
            m_eff = 1
            coupling = 0.0
            log_prefactor = 0.0
            kernel_matrix = np.array([[kernel.mean()]])
        else:
            trotter = TrotterConfig(m_slices, params.beta, params.b)
            m_eff = m_slices
            coupling = trotter.coupling
            log_prefactor = trotter.log_prefactor(params.n_spins)
            kernel_matrix = kernel.matrix()
        self.params = params
        self.m_slices = m_slices
        self.m_eff = m_eff
        self.coupling = coupling
        self.log_prefactor = log_prefactor
        self.mix = mix
        self.table = path_table(m_eff, params.n_spins)
        self.spins_f = self.table.spins.astype(np.float64)
        self.y_quad = params.n_spins * np.einsum(
            "cmn,mn->c", self.table.rho, kernel_matrix
        )
        self.mag_sq = np.einsum("ci,ci->c", self.table.site_mag, self.table.site_mag)
        self.diag_field = self.table.site_mag.sum(axis=1)
        self.n_pairs = self.table.pair_prods.shape[1]

    @property
    def n_configs(self) -> int:
        return self.table.spins.shape[0]

    def base_log_weights(
        self, point: InterpPoint, couplings: np.ndarray, rsb: RsbParams
    ) -> np.ndarray:
        """Log weight of every configuration, fields at their level means.

        Contains the real pair part at strength ``sqrt(s)``, the diagonal and
        kernel terms, and both annealed compensators; the numeric Gaussian
        levels are added separately through :meth:`field_shift`.
        """
        beta = self.params.beta
        m = self.m_eff
        n = self.params.n_spins
        w = (beta * self.params.c / m) * self.diag_field
        w = w + (beta * self.coupling) * self.table.bond_sum
        w = w + (beta**2 / (2.0 * m**2)) * self.y_quad
        if self.n_pairs and point.s > 0:
            scale = math.sqrt(point.s) * beta / (m * math.sqrt(n))
            w = w + scale * (self.table.pair_prods @ np.asarray(couplings, float))
        st = point.s * point.t
        if st > 0:
            w = w + st * (beta**2 / 4.0)
            w = w - st * (beta**2 * n / (4.0 * m**2)) * self.table.rho_sq_sum
        if point.s < 1:
            xi_k = self.mix.xi_prime(rsb.q[rsb.k])
            w = w - (1.0 - point.s) * (beta**2 * xi_k / (2.0 * m**2)) * self.mag_sq
        return w

    def field_shift(self, z: np.ndarray) -> np.ndarray:
        """``(beta/M) sum_i T_i z_i`` per configuration; batches along rows of z."""
        arr = np.asarray(z, dtype=float)
        return (self.params.beta / self.m_eff) * (self.table.site_mag @ arr.T)

    def field_coefficients(self, s: float, rsb: RsbParams) -> np.ndarray:
        """Strength of each numeric field level at dial position ``s``."""
        return math.sqrt(1.0 - s) * np.sqrt(_field_gaps(rsb, self.mix))


def interp_path_energy(
    point: InterpPoint,
    config: PathConfiguration,
    sample: DisorderSample,
    levels: GaussianLevels,
    rsb: RsbParams,
    kernel: SelfOverlapKernel,
    params: ModelParams,
    m_slices: int,
    mix: MixtureFunction | None = None,
) -> float:
    """Energy of one path under the interpolated Hamiltonian at ``(s, t)``.

    The configuration's weight is ``exp(-beta * energy)`` up to the global
    prefactor; the two annealed compensators appear as explicit energy terms.
    Replica 0 of ``levels`` supplies the field values. At ``(1, 0)`` this is
    the plain path energy plus the kernel term; at ``(0, t)`` it splits into
    independent single-site summands.
    """
    mix = MixtureFunction(2) if mix is None else mix
    if mix.order != 2 or sample.order != 2:
        raise ValueError("the interpolation is built on pair disorder")
    if params.b == 0.0:
        raise ValueError("single-path energies need b > 0 (use the engine at b = 0)")
    if config.m_slices != m_slices or config.n_spins != params.n_spins:
        raise ValueError("configuration shape must match (m_slices, n_spins)")
    if kernel.m_slices != m_slices:
        raise ValueError("kernel slice count must match m_slices")
    if levels.fields.shape[0] != rsb.k or levels.fields.shape[2] != params.n_spins:
        raise ValueError("field draw must provide k levels for every site")
    trotter = TrotterConfig(m_slices, params.beta, params.b)
    beta, m, n = params.beta, m_slices, params.n_spins
    spins = config.spins.astype(np.float64)
    site_sums = spins.sum(axis=0)

    pair_term = 0.0
    for (i, j), g in zip(sample.index_tuples(), sample.values):
        pair_term += g * float(np.dot(spins[:, i], spins[:, j]))
    x = math.sqrt(point.s) * (beta / (m * math.sqrt(n))) * pair_term

    coef = math.sqrt(1.0 - point.s) * np.sqrt(_field_gaps(rsb, mix))
    x += (beta / m) * float(coef @ (levels.fields[:, 0, :] @ site_sums))
    x += (beta * params.c / m) * float(site_sums.sum())
    x += beta * trotter.coupling * float(np.sum(spins * np.roll(spins, -1, axis=0)))
    x += (beta**2 / (2.0 * m**2)) * float(
        np.einsum("li,lk,ki->", spins, kernel.matrix(), spins)
    )
    st = point.s * point.t
    rho = (spins @ spins.T) / n
    x += st * (beta**2 / 4.0 - (beta**2 * n / (4.0 * m**2)) * float(np.sum(rho**2)))
    xi_k = mix.xi_prime(rsb.q[rsb.k])
    x -= (1.0 - point.s) * (beta**2 * xi_k / (2.0 * m**2)) * float(site_sums @ site_sums)
    return -x / beta


def _vector_nodes(
    quad: QuadratureSpec, level: int, n_sites: int, stream: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Joint nodes and log weights for one Gaussian level over all sites.

    Gauss mode takes the per-site tensor product (guarded by a node cap); MC
    mode draws that many joint vectors from the caller's stream so that every
    disorder sample stays independently seeded.
    """
    count = quad.node_count(level)
    if quad.mode == "gauss":
        if count**n_sites > VECTOR_NODE_CAP:
            raise ValueError(
                f"{count}^{n_sites} product nodes exceed the cap of {VECTOR_NODE_CAP};"
                " use mc mode for this size"
            )
        rule = quad.rule(level)
        grids = np.meshgrid(*([rule.nodes] * n_sites), indexing="ij")
        vectors = np.stack(grids, axis=-1).reshape(-1, n_sites)
        logs = np.meshgrid(*([np.log(rule.weights)] * n_sites), indexing="ij")
        log_weights = np.stack(logs, axis=-1).reshape(-1, n_sites).sum(axis=1)
        return vectors, log_weights
    vectors = gaussian_samples(stream, count, n_sites)
    return vectors, np.full(count, -math.log(count))


def _default_vector_quad(n_sites: int) -> QuadratureSpec:
    if 12**n_sites <= VECTOR_NODE_CAP:
        return QuadratureSpec(mode="gauss", nodes=12, seed=0)
    return QuadratureSpec(mode="mc", nodes=128, seed=0)


def _legendre_rule(lo: float, hi: float, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights for an integral over ``[lo, hi]``."""
    x, w = np.polynomial.legendre.leggauss(count)
    mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return mid + half * x, half * w


def _check_phi_sizes(params: ModelParams, m_slices: int, rsb: RsbParams) -> None:
    if params.n_spins > PHI_SITE_CAP:
        raise ValueError(f"n_spins capped at {PHI_SITE_CAP} for interpolation runs")
    if m_slices > PHI_SLICE_CAP:
        raise ValueError(f"m_slices capped at {PHI_SLICE_CAP} for interpolation runs")
    if rsb.k > PHI_DEPTH_CAP:
        raise ValueError(f"hierarchy depth capped at {PHI_DEPTH_CAP} here")


def phi_estimate(
    point: InterpPoint,
    params: ModelParams,
    m_slices: int,
    rsb: RsbParams,
    kernel: SelfOverlapKernel,
    quad: QuadratureSpec | None = None,
    n_disorder: int = 256,
    stream: RngStream | None = None,
    workers: int = 1,
    mix: MixtureFunction | None = None,
) -> MCEstimate:
    """Monte Carlo estimate of the interpolated free energy ``(1/N) E log Z``.

    The deepest level is analytic, level 0 is sampled with the outer
    disorder, and an inner ``k = 2`` level is contracted through the
    ``(E Z^{m_1})^{1/m_1}`` power mean over joint quadrature nodes. Levels
    whose strength vanishes (in particular the whole tree at ``s = 1``)
    collapse exactly and are skipped.
    """
    engine = PathEngine(params, m_slices, kernel, mix)
    _check_phi_sizes(params, m_slices, rsb)
    if stream is None:
        stream = RngStream(seed=0 if quad is None else quad.seed).child(7171)
    if quad is None:
        quad = _default_vector_quad(params.n_spins)
    n = params.n_spins
    m_inner = rsb.m[1] if rsb.k >= 2 else 1.0

    def one_sample(idx: int) -> float:
        child = stream.child(idx)
        g = draw_disorder(n, 2, child.child(0)).values
        coef = engine.field_coefficients(point.s, rsb)
        w = engine.base_log_weights(point, g, rsb)
        if coef[0] > 0:
            z0 = gaussian_samples(child.child(1), n)
            w = w + coef[0] * engine.field_shift(z0)
        if rsb.k == 2 and coef[1] > 0:
            vectors, log_qw = _vector_nodes(quad, 1, n, child.child(2))
            log_z = engine.log_prefactor + logsumexp(
                w[:, None] + coef[1] * engine.field_shift(vectors), axis=0
            )
            return float(logsumexp(log_qw + m_inner * log_z) / m_inner) / n
        return float(engine.log_prefactor + logsumexp(w)) / n

    values = _map_ordered(one_sample, n_disorder, workers)
    return mc_estimate(values)


def psi(
    s: float,
    rsb: RsbParams,
    mix: MixtureFunction,
    site: SingleSiteModel,
    quad: QuadratureSpec | None = None,
) -> float:
    """Hierarchy value with the self-overlap telescope scaled by ``s``.

    ``psi(1, ...)`` is the full variational functional; ``psi(0, ...)`` drops
    the correction entirely and matches the interpolated free energy at the
    decoupled endpoint.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    quad = QuadratureSpec.default_for(rsb.k) if quad is None else quad
    telescope = sum(
        rsb.m[level] * (mix.theta(rsb.q[level + 1]) - mix.theta(rsb.q[level]))
        for level in range(1, rsb.k + 1)
    )
    return elog_zeta0(rsb, mix, site, quad) - s * (site.beta**2 / 2.0) * telescope


def deviation_moment(
    first: PathConfiguration, second: PathConfiguration, q_r: float
) -> float:
    """Mean squared deviation of the same-slice replica overlap from ``q_r``.

    ``D^2 = (1/M) sum_l ((1/N) sum_i s^1_li s^2_li - q_r)^2``, bounded by
    ``(1 + |q_r|)^2 <= 4`` for admissible ``q_r``.
    """
    if first.spins.shape != second.spins.shape:
        raise ValueError("replica configurations must share a shape")
    a = first.spins.astype(np.float64)
    b = second.spins.astype(np.float64)
    overlap = (a * b).mean(axis=1)
    return float(np.mean((overlap - q_r) ** 2))


def _deviation_sq_matrix(table: PathTable, q_r: float) -> np.ndarray:
    """``D^2`` for every ordered pair of enumerated configurations."""
    sf = table.spins.astype(np.float64)
    cross = np.einsum("cli,dli->cdl", sf, sf) / table.spins.shape[2]
    return ((cross - q_r) ** 2).mean(axis=2)


@dataclass(frozen=True)
class ReplicaPairState:
    """One disorder and shared-field draw with its inner-level node system.

    ``config_log_weights[c, j]`` is the log weight of configuration ``c`` of
    one replica at inner node ``j``; ``node_log_weights`` are the quadrature
    log weights and ``log_z_raw`` the per-node log partition sums (without
    the slicing prefactor, which cancels from every bracket).
    """

    engine: PathEngine
    point: InterpPoint
    rsb: RsbParams
    config_log_weights: np.ndarray
    node_log_weights: np.ndarray
    log_z_raw: np.ndarray

    @property
    def n_configs(self) -> int:
        return self.config_log_weights.shape[0]


def replica_pair_state(
    point: InterpPoint,
    params: ModelParams,
    m_slices: int,
    rsb: RsbParams,
    kernel: SelfOverlapKernel,
    quad: QuadratureSpec,
    stream: RngStream,
    mix: MixtureFunction | None = None,
) -> ReplicaPairState:
    """Draw the shared randomness for one two-replica bracket evaluation."""
    engine = PathEngine(params, m_slices, kernel, mix)
    if engine.m_eff * params.n_spins > PAIR_BITS_CAP:
        raise ValueError(
            f"pair enumeration capped at M*N <= {PAIR_BITS_CAP} effective bits"
        )
    _check_phi_sizes(params, m_slices, rsb)
    g = draw_disorder(params.n_spins, 2, stream.child(0)).values
    coef = engine.field_coefficients(point.s, rsb)
    w = engine.base_log_weights(point, g, rsb)
    if coef[0] > 0:
        z0 = gaussian_samples(stream.child(1), params.n_spins)
        w = w + coef[0] * engine.field_shift(z0)
    if rsb.k == 2 and coef[1] > 0:
        vectors, log_qw = _vector_nodes(quad, 1, params.n_spins, stream.child(2))
        weights = w[:, None] + coef[1] * engine.field_shift(vectors)
    else:
        weights = w[:, None]
        log_qw = np.zeros(1)
    return ReplicaPairState(
        engine=engine,
        point=point,
        rsb=rsb,
        config_log_weights=weights,
        node_log_weights=log_qw,
        log_z_raw=logsumexp(weights, axis=0),
    )


def modified_bracket(
    f: float | np.ndarray, state: ReplicaPairState, nseq: NSequence
) -> float:
    """Nested two-replica average of a pair observable for one draw.

    ``f`` is a constant or a ``(C, C)`` matrix over ordered configuration
    pairs (replica 1 rows, replica 2 columns). Replicas couple through the
    shared levels of ``state``; the inner level is contracted with the
    exponents of ``nseq`` (independent node pairs below the coupling level,
    a shared node at or above it). The outer disorder average is the
    caller's job. Constants pass through exactly: ``modified_bracket(1.0)``
    is ``1.0`` regardless of exponents.
    """
    n_cfg = state.n_configs
    matrix = np.asarray(f, dtype=float)
    if matrix.ndim == 0:
        matrix = np.full((n_cfg, n_cfg), float(matrix))
    if matrix.shape != (n_cfg, n_cfg):
        raise ValueError("f must be scalar or a (C, C) pair observable")
    probs = np.exp(state.config_log_weights - state.log_z_raw)
    node_means = probs.T @ matrix @ probs
    if state.node_log_weights.size == 1:
        return float(node_means[0, 0])
    n_inner = nseq.values[1]
    if nseq.r == 1:
        node_probs = _softmax(state.node_log_weights + n_inner * state.log_z_raw)
        return float(node_probs @ node_means @ node_probs)
    node_probs = _softmax(state.node_log_weights + 2.0 * n_inner * state.log_z_raw)
    return float(node_probs @ np.diag(node_means))


def _softmax(log_values: np.ndarray) -> np.ndarray:
    shifted = np.exp(log_values - np.max(log_values))
    return shifted / shifted.sum()


@dataclass(frozen=True)
class GuerraReport:
    """Both sides of the interpolation sum rule and their paired difference."""

    lhs: MCEstimate
    rhs: MCEstimate
    difference: MCEstimate
    gap_sigmas: float


def guerra_identity_residual(
    t: float,
    params: ModelParams,
    m_slices: int,
    rsb: RsbParams,
    kernel: SelfOverlapKernel,
    quad: QuadratureSpec | None = None,
    n_disorder: int = 400,
    stream: RngStream | None = None,
    workers: int = 1,
    mix: MixtureFunction | None = None,
    s_nodes: int = 8,
    t_nodes: int = 8,
) -> GuerraReport:
    """Check the finite-size sum rule joining the free energy to the bound.

    The rule equates the interpolated free energy at ``(1, t)`` to the
    variational functional plus three exactly known pieces:

        lhs = P_k + t beta^2/(4N)
              - (beta^2/(4M)) sum_r (m_r - m_{r-1})
                  * integral_0^1 ds  E< sum_l (rho^{12}_{ll} - q_r)^2 >_{s,1}^r
              + (beta^2/(4M^2)) integral_t^1 dt'  E< sum_{ll'} rho_{ll'}^2 >_{1,t'}

    where the s-integrand is the level-``r`` two-replica bracket and the
    t'-integrand a plain Gibbs average (the field tree is dead at ``s = 1``).
    Both integrals use interior Gauss-Legendre nodes; each disorder sample
    evaluates lhs and rhs with the same couplings so the difference
    concentrates far faster than either side. ``t = 1`` drops the t'-term
    structurally. The report's ``gap_sigmas`` is the paired difference in
    units of its standard error.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    engine = PathEngine(params, m_slices, kernel, mix)
    if engine.m_eff * params.n_spins > BRACKET_BITS_CAP:
        raise ValueError(
            f"bracket enumeration capped at M*N <= {BRACKET_BITS_CAP} effective bits"
        )
    _check_phi_sizes(params, m_slices, rsb)
    if stream is None:
        stream = RngStream(seed=0).child(4242)
    if quad is None:
        quad = _default_vector_quad(params.n_spins)
    mix = engine.mix
    beta = params.beta
    n = params.n_spins
    m_eff = engine.m_eff
    site = SingleSiteModel(beta, params.b, params.c, m_slices, kernel=kernel)
    p_value = parisi_functional(rsb, mix, site, QuadratureSpec(mode="gauss", nodes=24))
    deltas = [rsb.m[r] - rsb.m[r - 1] for r in range(1, rsb.k + 1)]
    s_grid, s_weights = _legendre_rule(0.0, 1.0, s_nodes)
    if t < 1.0:
        t_grid, t_weights = _legendre_rule(t, 1.0, t_nodes)
    else:
        t_grid, t_weights = np.zeros(0), np.zeros(0)
    endpoint = InterpPoint(s=1.0, t=t)

    def one_sample(idx: int) -> tuple[float, float]:
        child = stream.child(idx)
        g = draw_disorder(n, 2, child.child(0)).values
        z0 = gaussian_samples(child.child(1), n)
        lhs = float(
            engine.log_prefactor
            + logsumexp(engine.base_log_weights(endpoint, g, rsb))
        ) / n
        s_term = 0.0
        for s_val, s_wt in zip(s_grid, s_weights):
            brackets = _overlap_deviation_brackets(
                engine, InterpPoint(s=float(s_val), t=1.0), rsb, quad, g, z0, child
            )
            s_term += s_wt * sum(d * b for d, b in zip(deltas, brackets))
        t_term = 0.0
        for t_val, t_wt in zip(t_grid, t_weights):
            w = engine.base_log_weights(InterpPoint(s=1.0, t=float(t_val)), g, rsb)
            t_term += t_wt * float(_softmax(w) @ engine.table.rho_sq_sum)
        rhs = (
            p_value
            + t * beta**2 / (4.0 * n)
            - (beta**2 / (4.0 * m_eff)) * s_term
            + (beta**2 / (4.0 * m_eff**2)) * t_term
        )
        return lhs, rhs

    pairs = _map_ordered(one_sample, n_disorder, workers)
    lhs_values = np.array([p[0] for p in pairs])
    rhs_values = np.array([p[1] for p in pairs])
    difference = mc_estimate(lhs_values - rhs_values)
    if difference.stderr > 0:
        gap = abs(difference.mean) / difference.stderr
    else:
        gap = 0.0 if difference.mean == 0 else math.inf
    return GuerraReport(
        lhs=mc_estimate(lhs_values),
        rhs=mc_estimate(rhs_values),
        difference=difference,
        gap_sigmas=gap,
    )


def _overlap_deviation_brackets(
    engine: PathEngine,
    point: InterpPoint,
    rsb: RsbParams,
    quad: QuadratureSpec,
    couplings: np.ndarray,
    z0: np.ndarray,
    stream: RngStream,
) -> list[float]:
    """Level-``r`` brackets of ``sum_l (rho^{12}_ll - q_r)^2`` for ``r = 1..k``.

    The observable is quadratic in each replica, so every bracket reduces to
    contractions of single-replica slice correlators ``G_l = <s_l s_l^T>`` and
    magnetizations ``m_l = <s_l>``: independent node pairs factorize through
    exponent-weighted aggregates of ``G`` and ``m``, a shared node keeps the
    per-node products. This avoids any ``C^2`` pair enumeration.
    """
    n = engine.params.n_spins
    coef = engine.field_coefficients(point.s, rsb)
    w = engine.base_log_weights(point, couplings, rsb)
    if coef[0] > 0:
        w = w + coef[0] * engine.field_shift(z0)
    if rsb.k == 2 and coef[1] > 0:
        vectors, log_qw = _vector_nodes(quad, 1, n, stream.child(2))
        weights = w[:, None] + coef[1] * engine.field_shift(vectors)
    else:
        weights = w[:, None]
        log_qw = np.zeros(1)
    log_z = logsumexp(weights, axis=0)
    probs = np.exp(weights - log_z)
    corr = np.einsum("cj,cli,clm->jlim", probs, engine.spins_f, engine.spins_f)
    mag = np.einsum("cj,cli->jli", probs, engine.spins_f)

    def quadratic(g_l: np.ndarray, g_r: np.ndarray, m_l, m_r, q_r: float) -> float:
        cross = float(np.einsum("lim,lim->", g_l, g_r)) / n**2
        linear = float(np.einsum("li,li->", m_l, m_r)) / n
        return cross - 2.0 * q_r * linear + engine.m_eff * q_r**2

    brackets: list[float] = []
    for r in range(1, rsb.k + 1):
        q_r = rsb.q[r]
        if weights.shape[1] == 1:
            brackets.append(quadratic(corr[0], corr[0], mag[0], mag[0], q_r))
            continue
        node_probs = _softmax(log_qw + rsb.m[1] * log_z)
        if r == 1:
            g_bar = np.einsum("j,jlim->lim", node_probs, corr)
            m_bar = np.einsum("j,jli->li", node_probs, mag)
            brackets.append(quadratic(g_bar, g_bar, m_bar, m_bar, q_r))
        else:
            per_node = [
                quadratic(corr[j], corr[j], mag[j], mag[j], q_r)
                for j in range(len(node_probs))
            ]
            brackets.append(float(node_probs @ np.asarray(per_node)))
    return brackets


def _log_sandwich(weights: np.ndarray, log_factor: np.ndarray) -> np.ndarray:
    """``log sum_{c,d} e^{w_nc} F_cd e^{w_md}`` for all node pairs ``(n, m)``.

    ``log_factor`` may contain ``-inf`` (hard indicators); rows are shifted
    by their maxima so the linear-domain products stay in range.
    """
    col_max = weights.max(axis=0)
    a = np.exp(weights - col_max)
    finite = log_factor[np.isfinite(log_factor)]
    shift = float(finite.max()) if finite.size else 0.0
    factor = np.exp(log_factor - shift)
    inner = a.T @ factor @ a
    with np.errstate(divide="ignore"):
        out = np.log(inner)
    return out + shift + col_max[:, None] + col_max[None, :]


@dataclass(frozen=True)
class TiltedPartitionReport:
    """Restricted and exponentially tilted pair partition functions.

    ``log_v`` averages ``(1/N) log V_0`` (the tilt), ``log_w`` the indicator
    restriction; ``indicator_empty`` flags a threshold above every reachable
    deviation, in which case ``W`` vanishes identically and ``omega`` is
    ``-inf``.
    """

    log_v: MCEstimate
    log_w: MCEstimate | None
    omega: float
    indicator_empty: bool


def tilted_partitions(
    s: float,
    tilt: TiltParams,
    params: ModelParams,
    m_slices: int,
    rsb: RsbParams,
    kernel: SelfOverlapKernel,
    quad: QuadratureSpec | None = None,
    n_disorder: int = 256,
    stream: RngStream | None = None,
    workers: int = 1,
    mix: MixtureFunction | None = None,
) -> TiltedPartitionReport:
    """Estimate the restricted and tilted two-replica partition functions.

    Both start from the honest enumeration of ordered configuration pairs:
    ``W`` keeps pairs with deviation ``D_r^2 >= u``, ``V`` reweights them by
    ``exp(N lam (D_r^2 - u))``. The inner level is contracted with the
    replica-pair exponents (independent node pairs below the coupling level,
    a shared node at it), and the slicing prefactor enters squared. At
    ``lam = 0`` the tilt matrix is constant, every node-pair product
    telescopes, and ``(1/N) log V_0`` reproduces twice the single-replica
    free-energy sample exactly, node for node.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    if not 1 <= tilt.r <= rsb.k:
        raise ValueError(f"tilt level must lie in 1..{rsb.k}")
    engine = PathEngine(params, m_slices, kernel, mix)
    if engine.m_eff * params.n_spins > PAIR_BITS_CAP:
        raise ValueError(
            f"pair enumeration capped at M*N <= {PAIR_BITS_CAP} effective bits"
        )
    _check_phi_sizes(params, m_slices, rsb)
    if stream is None:
        stream = RngStream(seed=0).child(5151)
    if quad is None:
        quad = _default_vector_quad(params.n_spins)
    point = InterpPoint(s=s, t=1.0)
    nseq = NSequence.from_rsb(rsb, tilt.r)
    n_inner = nseq.values[1]
    n = params.n_spins
    deviation = _deviation_sq_matrix(engine.table, rsb.q[tilt.r])
    indicator = deviation >= tilt.u
    indicator_empty = not bool(indicator.any())
    with np.errstate(divide="ignore"):
        log_indicator = np.log(indicator.astype(float))
    log_tilt = n * tilt.lam * (deviation - tilt.u)

    def one_sample(idx: int) -> tuple[float, float]:
        state = replica_pair_state(
            point, params, m_slices, rsb, kernel, quad, stream.child(idx), mix
        )
        prefactor = 2.0 * engine.log_prefactor
        log_v_nodes = _log_sandwich(state.config_log_weights, log_tilt)
        log_v0 = prefactor + _power_mean_pair(
            state.node_log_weights, log_v_nodes, n_inner, tilt.r
        )
        if indicator_empty:
            return log_v0 / n, -math.inf
        log_w_nodes = _log_sandwich(state.config_log_weights, log_indicator)
        log_w0 = prefactor + _power_mean_pair(
            state.node_log_weights, log_w_nodes, n_inner, tilt.r
        )
        return log_v0 / n, log_w0 / n

    results = _map_ordered(one_sample, n_disorder, workers)
    log_v = mc_estimate([r[0] for r in results])
    if indicator_empty:
        return TiltedPartitionReport(
            log_v=log_v, log_w=None, omega=-math.inf, indicator_empty=True
        )
    log_w = mc_estimate([r[1] for r in results])
    return TiltedPartitionReport(
        log_v=log_v, log_w=log_w, omega=log_w.mean, indicator_empty=False
    )


def _power_mean_pair(
    node_log_weights: np.ndarray, log_values: np.ndarray, n_inner: float, r: int
) -> float:
    """``(E [pair]^n)^(1/n)`` over the inner level, in the log domain.

    Below the coupling level the two replicas see independent nodes, so the
    expectation runs over ordered node pairs; at the coupling level they
    share one node, whose partition product carries twice the halved
    exponent.
    """
    if node_log_weights.size == 1:
        return float(log_values[0, 0])
    lw = node_log_weights
    if r == 1:
        stacked = lw[:, None] + lw[None, :] + n_inner * log_values
        return float(logsumexp(stacked) / n_inner)
    return float(logsumexp(lw + n_inner * np.diag(log_values)) / n_inner)


@dataclass(frozen=True)
class ConcentrationRow:
    """One system size of a deviation-probability scan."""

    n_spins: int
    estimate: MCEstimate
    zero_event: bool


@dataclass(frozen=True)
class ConcentrationScan:
    """Bracket probabilities of ``D_r^2 >= u`` across sizes with a decay fit.

    ``slope`` is the least-squares slope of ``log p`` against ``N`` over the
    rows with nonzero estimates (``None`` when fewer than two such rows
    exist). Purely diagnostic: no acceptance gate rides on the fit.
    """

    u: float
    r: int
    s: float
    rows: tuple[ConcentrationRow, ...]
    slope: float | None


def concentration_scan(
    u: float,
    r: int,
    s: float,
    params: ModelParams,
    m_slices: int,
    rsb: RsbParams,
    kernel: SelfOverlapKernel,
    n_values: Sequence[int],
    quad: QuadratureSpec | None = None,
    n_disorder: int = 256,
    stream: RngStream | None = None,
    workers: int = 1,
    mix: MixtureFunction | None = None,
) -> ConcentrationScan:
    """Scan ``E< 1(D_r^2 >= u) >^r_{s,1}`` over system sizes.

    Each row estimates the level-``r`` two-replica bracket of the hard
    indicator at the same interpolation position; ``u = 0`` gives exactly one
    and ``u`` above the reachable range gives exactly zero (flagged rather
    than fitted).
    """
    if not 0.0 <= u <= DEVIATION_RANGE:
        raise ValueError(f"threshold u must lie in [0, {DEVIATION_RANGE}]")
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    if not 1 <= r <= rsb.k:
        raise ValueError(f"coupling level must lie in 1..{rsb.k}")
    if stream is None:
        stream = RngStream(seed=0).child(6161)
    rows: list[ConcentrationRow] = []
    for size_index, n_val in enumerate(n_values):
        sized = replace(params, n_spins=int(n_val))
        size_quad = _default_vector_quad(sized.n_spins) if quad is None else quad
        point = InterpPoint(s=s, t=1.0)
        nseq = NSequence.from_rsb(rsb, r)
        probe_engine = PathEngine(sized, m_slices, kernel, mix)
        if probe_engine.m_eff * sized.n_spins > PAIR_BITS_CAP:
            raise ValueError(
                f"pair enumeration capped at M*N <= {PAIR_BITS_CAP} effective bits"
            )
        deviation = _deviation_sq_matrix(probe_engine.table, rsb.q[r])
        indicator = deviation >= u
        with np.errstate(divide="ignore"):
            log_indicator = np.log(indicator.astype(float))
        size_stream = stream.child(size_index)

        def one_sample(idx: int) -> float:
            state = replica_pair_state(
                point, sized, m_slices, rsb, kernel, size_quad,
                size_stream.child(idx), mix,
            )
            if not indicator.any():
                return 0.0
            log_s = _log_sandwich(state.config_log_weights, log_indicator)
            lw = state.node_log_weights
            lz = state.log_z_raw
            n_inner = nseq.values[1]
            if lw.size == 1:
                return float(np.exp(log_s[0, 0] - 2.0 * lz[0]))
            if r == 1:
                num = logsumexp(
                    lw[:, None] + lw[None, :]
                    + (n_inner - 1.0) * (lz[:, None] + lz[None, :])
                    + log_s
                )
                den = 2.0 * logsumexp(lw + n_inner * lz)
            else:
                num = logsumexp(lw + (2.0 * n_inner - 2.0) * lz + np.diag(log_s))
                den = logsumexp(lw + 2.0 * n_inner * lz)
            return float(np.exp(num - den))

        values = _map_ordered(one_sample, n_disorder, workers)
        estimate = mc_estimate(values)
        rows.append(
            ConcentrationRow(
                n_spins=sized.n_spins,
                estimate=estimate,
                zero_event=estimate.mean <= 0.0,
            )
        )
    valid = [(row.n_spins, row.estimate.mean) for row in rows if row.estimate.mean > 0]
    slope = None
    if len(valid) >= 2:
        xs = np.array([v[0] for v in valid], dtype=float)
        ys = np.log([v[1] for v in valid])
        slope = float(np.polyfit(xs, ys, 1)[0])
    return ConcentrationScan(u=u, r=r, s=s, rows=tuple(rows), slope=slope)


@dataclass(frozen=True)
class OverlapVarianceReport:
    """Thermal and disorder fluctuations of the mean squared self-overlap."""

    thermal: MCEstimate
    disorder: MCEstimate
    total: float


def selfoverlap_variance_diag(
    t: float,
    params: ModelParams,
    m_slices: int,
    kernel: SelfOverlapKernel,
    n_disorder: int = 256,
    stream: RngStream | None = None,
    workers: int = 1,
) -> OverlapVarianceReport:
    """Split the fluctuations of ``(1/M^2) sum_{ll'} rho_{ll'}`` at ``(1, t)``.

    ``thermal`` averages the within-sample Gibbs variance, ``disorder`` is the
    plug-in variance of the thermal means across coupling draws, ``total``
    their sum. Diagnostic only; the interesting content is the trend in
    ``N``, which the caller scans.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    engine = PathEngine(params, m_slices, kernel)
    if engine.m_eff * params.n_spins > BRACKET_BITS_CAP:
        raise ValueError(
            f"bracket enumeration capped at M*N <= {BRACKET_BITS_CAP} effective bits"
        )
    if stream is None:
        stream = RngStream(seed=0).child(8181)
    point = InterpPoint(s=1.0, t=t)
    table = engine.table
    rho_total = table.rho.sum(axis=(1, 2))
    m_sq = float(engine.m_eff**2)
    trivial = RsbParams(k=1, m=(0.0, 1.0), q=(0.0, 0.0, 0.0))

    def one_sample(idx: int) -> tuple[float, float]:
        child = stream.child(idx)
        g = draw_disorder(params.n_spins, 2, child.child(0)).values
        probs = _softmax(engine.base_log_weights(point, g, trivial))
        mean_rho = np.einsum("c,cmn->mn", probs, table.rho)
        thermal = (float(probs @ table.rho_sq_sum) - float(np.sum(mean_rho**2))) / m_sq
        return thermal, float(probs @ rho_total) / m_sq

    results = _map_ordered(one_sample, n_disorder, workers)
    thermal = mc_estimate([r[0] for r in results])
    means = np.array([r[1] for r in results])
    centered_sq = (means - means.mean()) ** 2
    scale = len(means) / max(len(means) - 1, 1)
    disorder = mc_estimate(scale * centered_sq)
    return OverlapVarianceReport(
        thermal=thermal, disorder=disorder, total=thermal.mean + disorder.mean
    )
