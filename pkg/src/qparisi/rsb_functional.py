"""Hierarchical variational functional for the sliced mean-field models.

This module evaluates the single-site partition function of the path
representation under a hierarchy of Gaussian fields, contracts the hierarchy
into the step-RSB functional with its self-overlap correction, optimizes the
order parameters, and solves the outer envelope problem that trades the
correction for a quadratic penalty on a slice-translation-invariant kernel.

The deepest Gaussian level carries an imaginary coefficient; its average is
always taken analytically, which turns it into an explicit negative-definite
penalty on the slice magnetization and keeps everything real and positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, logit, logsumexp

from .stochastics import (
    MCEstimate,
    QuadratureRule,
    RngStream,
    gauss_hermite,
    mc_estimate,
    mc_quadrature,
)
from .trotter_rep import TrotterConfig, path_table, trotter_coupling

SITE_PATH_CAP = 14
HOPF_LAX_CAP = 12
PSPIN_SITE_CAP = 16
GAUSS_LEVEL_LIMIT = 3
DEFAULT_GAUSS_NODES = 24
DEFAULT_MC_NODES = 48

_LOGIT_CLIP = 36.0


@dataclass(frozen=True)
class MixtureFunction:
    """Covariance profile xi(q) = q^p / 2 of a pure even-order interaction.

    ``theta(q) = q xi'(q) - xi(q)`` is the Legendre-type combination entering
    the correction term of the functional; for order 2 it reduces to q^2 / 2.
    """

    order: int

    def __post_init__(self) -> None:
        if self.order < 2 or self.order % 2 != 0:
            raise ValueError("interaction order must be an even integer >= 2")

    def xi(self, q: float) -> float:
        return 0.5 * q**self.order

    def xi_prime(self, q: float) -> float:
        return 0.5 * self.order * q ** (self.order - 1)

    def theta(self, q: float) -> float:
        return 0.5 * (self.order - 1) * q**self.order


@dataclass(frozen=True)
class RsbParams:
    """Order parameters of a depth-k hierarchy.

    ``m`` holds m_0..m_k with 0 = m_0 < m_1 <= ... <= m_k = 1 and ``q`` holds
    q_0..q_{k+1} with 0 = q_0 <= q_1 <= ... <= q_k <= 1.  The trailing entry
    q_{k+1} = 0 is stored explicitly: the telescoping correction then carries
    the self-overlap endpoint term without special-casing.
    """

    k: int
    m: tuple[float, ...]
    q: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("depth k must be a positive integer")
        m = tuple(float(v) for v in self.m)
        q = tuple(float(v) for v in self.q)
        if len(m) != self.k + 1:
            raise ValueError(f"m must have {self.k + 1} entries m_0..m_k")
        if len(q) != self.k + 2:
            raise ValueError(f"q must have {self.k + 2} entries q_0..q_{{k+1}}")
        if m[0] != 0.0:
            raise ValueError("m_0 must be 0")
        if m[-1] != 1.0:
            raise ValueError("m_k must be 1")
        if self.k >= 1 and m[1] <= 0.0:
            raise ValueError("m_1 must be strictly positive")
        if any(m[i] > m[i + 1] for i in range(1, self.k)):
            raise ValueError("m must be nondecreasing")
        if q[0] != 0.0 or q[-1] != 0.0:
            raise ValueError("q_0 and q_{k+1} must both be 0")
        inner = q[1 : self.k + 1]
        if any(v < 0.0 or v > 1.0 for v in inner):
            raise ValueError("q levels must lie in [0, 1]")
        if any(inner[i] > inner[i + 1] for i in range(len(inner) - 1)):
            raise ValueError("q must be nondecreasing up to q_k")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "q", q)

    def insert_level(self, r: int, m_new: float) -> "RsbParams":
        """Duplicate breakpoint q_r, splicing ``m_new`` into the exponents.

        The inserted Gaussian level has zero variance gap, so the value of the
        functional is unchanged for any m_new between m_{r-1} and m_r.
        """
        if not 1 <= r <= self.k:
            raise ValueError("insertion level must satisfy 1 <= r <= k")
        if not self.m[r - 1] <= m_new <= self.m[r]:
            raise ValueError("inserted exponent must sit between its neighbours")
        q = self.q[: r + 1] + (self.q[r],) + self.q[r + 1 :]
        m = self.m[:r] + (float(m_new),) + self.m[r:]
        return RsbParams(k=self.k + 1, m=m, q=q)


@dataclass(frozen=True)
class SelfOverlapKernel:
    """Slice-translation-invariant symmetric kernel y_{l,l'} = yhat((l-l') mod M).

    The profile yhat must satisfy yhat(d) = yhat((M-d) mod M), so the kernel
    has floor(M/2)+1 independent coordinates (the half profile).
    """

    m_slices: int
    profile: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.m_slices < 1:
            raise ValueError("m_slices must be positive")
        prof = tuple(float(v) for v in self.profile)
        if len(prof) != self.m_slices:
            raise ValueError("profile must have one entry per slice offset")
        if any(v < 0.0 or v > 1.0 for v in prof):
            raise ValueError("profile values must lie in [0, 1]")
        m = self.m_slices
        if any(prof[d] != prof[(m - d) % m] for d in range(m)):
            raise ValueError("profile must satisfy yhat(d) = yhat((M-d) mod M)")
        object.__setattr__(self, "profile", prof)

    @classmethod
    def zeros(cls, m_slices: int) -> "SelfOverlapKernel":
        return cls(m_slices=m_slices, profile=(0.0,) * m_slices)

    @classmethod
    def uniform(cls, value: float, m_slices: int) -> "SelfOverlapKernel":
        return cls(m_slices=m_slices, profile=(float(value),) * m_slices)

    @classmethod
    def from_half_profile(
        cls, half: Sequence[float], m_slices: int
    ) -> "SelfOverlapKernel":
        """Build the full profile from its floor(M/2)+1 free coordinates."""
        half = [float(v) for v in half]
        if len(half) != m_slices // 2 + 1:
            raise ValueError("half profile must have floor(M/2)+1 entries")
        prof = [0.0] * m_slices
        for d in range(m_slices):
            prof[d] = half[min(d, m_slices - d)]
        return cls(m_slices=m_slices, profile=tuple(prof))

    def half_profile(self) -> tuple[float, ...]:
        return tuple(self.profile[d] for d in range(self.m_slices // 2 + 1))

    def multiplicities(self) -> np.ndarray:
        """How many offsets d = 0..M-1 each half-profile coordinate covers."""
        m = self.m_slices
        mult = np.full(m // 2 + 1, 2, dtype=np.int64)
        mult[0] = 1
        if m % 2 == 0:
            mult[-1] = 1
        return mult

    def matrix(self) -> np.ndarray:
        m = self.m_slices
        idx = (np.arange(m)[:, None] - np.arange(m)[None, :]) % m
        return np.asarray(self.profile, dtype=np.float64)[idx]

    def mean(self) -> float:
        """Average entry (1/M^2) sum_{l,l'} y_{l,l'}."""
        return float(np.mean(self.profile))

    def sum_sq(self, other: "SelfOverlapKernel | None" = None) -> float:
        """sum_{l,l'} (y - other)^2 over all ordered slice pairs."""
        a = np.asarray(self.profile, dtype=np.float64)
        if other is None:
            diff = a
        else:
            if other.m_slices != self.m_slices:
                raise ValueError("kernels must share the slice count")
            diff = a - np.asarray(other.profile, dtype=np.float64)
        return self.m_slices * float(np.sum(diff**2))


@dataclass(frozen=True)
class QuadratureSpec:
    """How each numeric Gaussian level is averaged.

    ``gauss`` mode uses Gauss-Hermite nodes, ``mc`` mode a seeded sample set
    with equal weights; ``nodes`` may be a single count or one per level.
    """

    mode: str = "gauss"
    nodes: int | tuple[int, ...] = DEFAULT_GAUSS_NODES
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("gauss", "mc"):
            raise ValueError("mode must be 'gauss' or 'mc'")
        counts = (self.nodes,) if isinstance(self.nodes, int) else tuple(self.nodes)
        if any(n < 2 for n in counts):
            raise ValueError("each level needs at least 2 nodes")
        object.__setattr__(
            self, "nodes", self.nodes if isinstance(self.nodes, int) else counts
        )

    @classmethod
    def default_for(cls, k: int, seed: int = 0) -> "QuadratureSpec":
        """Gauss-Hermite for shallow hierarchies, seeded MC beyond."""
        if k <= GAUSS_LEVEL_LIMIT:
            return cls(mode="gauss", nodes=DEFAULT_GAUSS_NODES, seed=seed)
        return cls(mode="mc", nodes=DEFAULT_MC_NODES, seed=seed)

    def node_count(self, level: int) -> int:
        if isinstance(self.nodes, int):
            return self.nodes
        if level >= len(self.nodes):
            raise ValueError(f"no node count configured for level {level}")
        return self.nodes[level]

    def rule(self, level: int) -> QuadratureRule:
        n = self.node_count(level)
        if self.mode == "gauss":
            return gauss_hermite(n)
        return mc_quadrature(RngStream(seed=self.seed).child(level), n)


class SingleSiteModel:
    """Single-site path sum reduced to slice-magnetization groups.

    The 2^M single-site paths enter every field evaluation only through the
    slice magnetization S = sum_l sigma_l, so the kernel and time-bond terms
    are folded into one log-weight per S group once.  Each later evaluation of
    the partition function is then an (M+1)-term log-sum-exp in the field h
    and the magnetization penalty coefficient.

    ``b = 0`` degrades to a single locked +-1 spin: the kernel contributes
    only through its mean, the bond term and prefactor drop, and the result
    is independent of the slice count.
    """

    def __init__(
        self,
        beta: float,
        b: float,
        c: float,
        m_slices: int,
        kernel: SelfOverlapKernel | None = None,
    ) -> None:
        if beta <= 0:
            raise ValueError("beta must be positive")
        if b < 0:
            raise ValueError("transverse field must be non-negative")
        if m_slices < 1:
            raise ValueError("m_slices must be positive")
        if kernel is None:
            kernel = SelfOverlapKernel.zeros(m_slices)
        if kernel.m_slices != m_slices:
            raise ValueError("kernel slice count must match m_slices")
        self.beta = float(beta)
        self.b = float(b)
        self.c = float(c)
        self.m_slices = int(m_slices)
        self.kernel = kernel
        self.coupling = trotter_coupling(beta, b, m_slices)
        # an underflowed time-bond coupling locks the slices just like b = 0
        if b == 0.0 or math.isinf(self.coupling):
            base = 0.5 * beta**2 * kernel.mean()
            self._s_values = np.array([-1.0, 1.0])
            self._group_log = np.array([base, base])
            self._h_scale = beta
            self._pen_scale = 0.5 * beta**2
            self.log_prefactor = 0.0
        else:
            if m_slices > SITE_PATH_CAP:
                raise ValueError(
                    f"size cap exceeded: M = {m_slices} > {SITE_PATH_CAP}"
                )
            table = path_table(m_slices, 1)
            sigma = table.spins[:, :, 0].astype(np.float64)
            mags = table.site_mag[:, 0]
            y = kernel.matrix()
            terms = (
                beta**2 / (2.0 * m_slices**2)
                * np.einsum("cl,lm,cm->c", sigma, y, sigma)
                + beta * self.coupling * table.bond_sum
            )
            s_values = np.arange(-m_slices, m_slices + 1, 2, dtype=np.float64)
            group_log = np.empty(m_slices + 1)
            for i, s in enumerate(s_values):
                group_log[i] = logsumexp(terms[mags == s])
            self._s_values = s_values
            self._group_log = group_log
            self._h_scale = beta / m_slices
            self._pen_scale = beta**2 / (2.0 * m_slices**2)
            self.log_prefactor = TrotterConfig(m_slices, beta, b).log_prefactor(1)
        self._s_sq = self._s_values**2

    @property
    def is_classical(self) -> bool:
        return self.b == 0.0

    def with_kernel(self, kernel: SelfOverlapKernel) -> "SingleSiteModel":
        return SingleSiteModel(self.beta, self.b, self.c, self.m_slices, kernel)

    def log_zeta(self, h, xi_prime_k: float):
        """log of the single-site partition function at field h.

        ``xi_prime_k`` is the analytic magnetization-penalty coefficient left
        by the imaginary deepest field level.  Vectorized over ``h``.
        """
        harr = np.asarray(h, dtype=np.float64)
        expo = (
            self._group_log
            + self._h_scale * harr[..., None] * self._s_values
            - self._pen_scale * xi_prime_k * self._s_sq
        )
        out = self.log_prefactor + logsumexp(expo, axis=-1)
        return float(out) if harr.ndim == 0 else out


def _field_gaps(rsb: RsbParams, mix: MixtureFunction) -> np.ndarray:
    """Variance gaps xi'(q_{p+1}) - xi'(q_p) of the real levels p = 0..k-1."""
    q = np.asarray(rsb.q)
    gaps = np.array(
        [mix.xi_prime(q[p + 1]) - mix.xi_prime(q[p]) for p in range(rsb.k)]
    )
    return np.clip(gaps, 0.0, None)


def zeta_initial(
    z_fields: Sequence[float],
    rsb: RsbParams,
    mix: MixtureFunction,
    site: SingleSiteModel,
) -> float:
    """Single-site partition function at one draw of the real field levels.

    ``z_fields`` holds z^0..z^{k-1}; the deepest level is already integrated
    out analytically, so the returned value is real and strictly positive.
    """
    z = np.asarray(z_fields, dtype=np.float64)
    if z.shape != (rsb.k,):
        raise ValueError(f"expected {rsb.k} field values z^0..z^{{k-1}}")
    h = site.c + float(np.sqrt(_field_gaps(rsb, mix)) @ z)
    return math.exp(site.log_zeta(h, mix.xi_prime(rsb.q[rsb.k])))


def elog_zeta0(
    rsb: RsbParams,
    mix: MixtureFunction,
    site: SingleSiteModel,
    quad: QuadratureSpec,
) -> float:
    """E log zeta_0 via the descending power-mean recursion.

    Level l is contracted as log zeta_{l-1} = (1/m_l) LSE(log w + m_l log
    zeta_l) for l = k-1..1; the strict positivity of every exponent is
    guaranteed by the RsbParams invariants.  The outermost level is a plain
    average of log zeta_0 over z^0.
    """
    k = rsb.k
    rules = [quad.rule(level) for level in range(k)]
    grids = np.meshgrid(*[r.nodes for r in rules], indexing="ij")
    scales = np.sqrt(_field_gaps(rsb, mix))
    h = site.c + sum(s * g for s, g in zip(scales, grids))
    log_z = site.log_zeta(h, mix.xi_prime(rsb.q[k]))
    for level in range(k - 1, 0, -1):
        m_l = rsb.m[level]
        log_w = np.log(rules[level].weights)
        log_z = logsumexp(log_w + m_l * log_z, axis=-1) / m_l
    return float(rules[0].weights @ np.atleast_1d(log_z))


def parisi_functional(
    rsb: RsbParams,
    mix: MixtureFunction,
    site: SingleSiteModel,
    quad: QuadratureSpec,
) -> float:
    """Depth-k functional: E log zeta_0 minus the telescoped correction.

    P_k = E log zeta_0 - (beta^2/2) sum_l m_l (theta(q_{l+1}) - theta(q_l)).
    The stored q_{k+1} = 0 makes the last term supply the self-overlap
    endpoint contribution + (beta^2/2) theta(q_k) automatically.
    """
    corr = sum(
        rsb.m[level] * (mix.theta(rsb.q[level + 1]) - mix.theta(rsb.q[level]))
        for level in range(1, rsb.k + 1)
    )
    return elog_zeta0(rsb, mix, site, quad) - 0.5 * site.beta**2 * corr


@dataclass(frozen=True)
class RsbOptimum:
    """Best parameters found, their value, and how the search ended."""

    params: RsbParams
    value: float
    converged: bool
    n_evaluations: int


def _params_from_q1(q1: float) -> RsbParams:
    return RsbParams(k=1, m=(0.0, 1.0), q=(0.0, float(q1), 0.0))


def _decode(u: np.ndarray, k: int) -> RsbParams:
    """Unconstrained coordinates -> admissible (m, q).

    q levels accumulate through q_r = 1 - prod_{j<=r}(1 - expit(u_j)), which
    is nondecreasing and stays inside [0, 1); the inner exponents descend
    from m_k = 1 through repeated multiplication by expit factors.
    """
    u = np.clip(u, -_LOGIT_CLIP, _LOGIT_CLIP)
    gaps = expit(u[:k])
    qs = 1.0 - np.cumprod(1.0 - gaps)
    ms = np.empty(k - 1)
    nxt = 1.0
    for j in range(k - 2, -1, -1):
        nxt = nxt * expit(u[k + j])
        ms[j] = nxt
    return RsbParams(
        k=k,
        m=(0.0, *ms, 1.0),
        q=(0.0, *qs, 0.0),
    )


def _encode(params: RsbParams) -> np.ndarray:
    """Inverse of _decode up to the logit clipping at the boundaries."""
    k = params.k
    tiny = 1e-15
    u = np.empty(2 * k - 1)
    prev = 0.0
    for r in range(k):
        ratio = (params.q[r + 1] - prev) / max(1.0 - prev, tiny)
        u[r] = logit(min(max(ratio, tiny), 1.0 - tiny))
        prev = params.q[r + 1]
    for j in range(k - 1):
        ratio = params.m[j + 1] / max(params.m[j + 2], tiny)
        u[k + j] = logit(min(max(ratio, tiny), 1.0 - tiny))
    return np.clip(u, -_LOGIT_CLIP, _LOGIT_CLIP)


def optimize_rsb(
    k: int,
    mix: MixtureFunction,
    site: SingleSiteModel,
    quad: QuadratureSpec,
    opt_budget: int = 1500,
    stream: RngStream | None = None,
    warm_start: RsbParams | None = None,
) -> RsbOptimum:
    """Minimize the depth-k functional over admissible (m, q).

    Depth 1 is a bounded scalar search in q_1 (with the q_1 = 0 endpoint
    probed explicitly).  Deeper hierarchies run restarted Nelder-Mead in the
    unconstrained coordinates of ``_decode``; one restart center embeds the
    optimum of depth k-1 by duplicating its last breakpoint, so the value is
    nonincreasing in k up to search tolerance.  Deterministic for fixed
    ``quad`` and ``stream`` seeds.
    """
    if k < 1:
        raise ValueError("depth k must be a positive integer")
    if opt_budget < 10:
        raise ValueError("optimization budget is too small to do anything")
    if stream is None:
        stream = RngStream(seed=quad.seed).child(9090)
    evaluations = [0]

    def value_at(params: RsbParams) -> float:
        evaluations[0] += 1
        return parisi_functional(params, mix, site, quad)

    if k == 1:
        res = minimize_scalar(
            lambda q1: value_at(_params_from_q1(q1)),
            bounds=(0.0, 1.0),
            method="bounded",
            options={"xatol": 1e-10, "maxiter": max(20, opt_budget - 2)},
        )
        candidates = [(value_at(_params_from_q1(0.0)), 0.0), (res.fun, float(res.x))]
        best_value, best_q1 = min(candidates, key=lambda cv: cv[0])
        return RsbOptimum(
            params=_params_from_q1(best_q1),
            value=float(best_value),
            converged=bool(res.success),
            n_evaluations=evaluations[0],
        )

    dim = 2 * k - 1
    centers: list[np.ndarray] = []
    if warm_start is not None:
        if warm_start.k != k:
            raise ValueError("warm start must have the requested depth")
        # a warm start is trusted: one polishing run keeps repeated calls cheap
        centers.append(_encode(warm_start))
    else:
        sub = optimize_rsb(
            k - 1, mix, site, quad, max(10, opt_budget // 3), stream.child(0)
        )
        evaluations[0] += sub.n_evaluations
        mid = 0.5 * (sub.params.m[k - 2] + sub.params.m[k - 1])
        centers.append(_encode(sub.params.insert_level(k - 1, mid)))
        centers.append(np.zeros(dim))
        gen = stream.child(1).generator()
        centers.append(gen.normal(scale=1.5, size=dim))

    remaining = opt_budget - evaluations[0]
    per_run = max(10, remaining // len(centers))
    finals: list[float] = []
    best: tuple[float, RsbParams] | None = None
    any_success = False
    for x0 in centers:
        if evaluations[0] >= opt_budget:
            break
        res = minimize(
            lambda u: value_at(_decode(u, k)),
            x0=x0,
            method="Nelder-Mead",
            options={
                "maxfev": min(per_run, opt_budget - evaluations[0]),
                "xatol": 1e-8,
                "fatol": 1e-11,
            },
        )
        any_success = any_success or bool(res.success)
        finals.append(float(res.fun))
        cand = (float(res.fun), _decode(res.x, k))
        if best is None or cand[0] < best[0]:
            best = cand
    assert best is not None
    return RsbOptimum(
        params=best[1],
        value=best[0],
        converged=any_success or _runs_agree(finals),
        n_evaluations=evaluations[0],
    )


def _runs_agree(finals: Sequence[float], tol: float = 1e-7) -> bool:
    """True when two independent restarts landed on the same value."""
    if len(finals) < 2:
        return False
    ordered = sorted(finals)
    return ordered[1] - ordered[0] <= tol * (1.0 + abs(ordered[0]))


@dataclass(frozen=True)
class StationarityReport:
    """Finite-difference gradient of the functional in each q level.

    ``one_sided[r-1]`` marks levels pinned against an ordering constraint
    where only a one-sided stencil fits.
    """

    residuals: np.ndarray
    one_sided: np.ndarray

    def max_interior(self) -> float:
        interior = self.residuals[~self.one_sided]
        return float(np.max(np.abs(interior))) if interior.size else 0.0


def stationarity_residual(
    rsb: RsbParams,
    mix: MixtureFunction,
    site: SingleSiteModel,
    quad: QuadratureSpec,
    step: float = 1e-4,
) -> StationarityReport:
    """dP/dq_r by central differences at fixed quadrature, per level r."""
    if step <= 0:
        raise ValueError("step must be positive")

    def value_with(r: int, q_r: float) -> float:
        q = list(rsb.q)
        q[r] = q_r
        return parisi_functional(replace(rsb, q=tuple(q)), mix, site, quad)

    residuals = np.empty(rsb.k)
    one_sided = np.zeros(rsb.k, dtype=bool)
    for r in range(1, rsb.k + 1):
        q_r = rsb.q[r]
        lo = rsb.q[r - 1]
        hi = rsb.q[r + 1] if r < rsb.k else 1.0
        if q_r - lo >= step and hi - q_r >= step:
            grad = (value_with(r, q_r + step) - value_with(r, q_r - step)) / (
                2.0 * step
            )
        elif hi - q_r >= step:
            grad = (value_with(r, q_r + step) - value_with(r, q_r)) / step
            one_sided[r - 1] = True
        elif q_r - lo >= step:
            grad = (value_with(r, q_r) - value_with(r, q_r - step)) / step
            one_sided[r - 1] = True
        else:
            raise ValueError(
                f"level {r} is pinned too tightly for a finite-difference probe"
            )
        residuals[r - 1] = grad
    return StationarityReport(residuals=residuals, one_sided=one_sided)


@dataclass(frozen=True)
class KernelSup:
    """Result of a sup over self-overlap kernels."""

    kernel: SelfOverlapKernel
    value: float
    converged: bool
    n_evaluations: int


def kernel_envelope_sup(
    value_fn: Callable[[SelfOverlapKernel], float],
    beta: float,
    m_slices: int,
    opt_budget: int = 300,
    stream: RngStream | None = None,
) -> KernelSup:
    """sup over kernels x of -(beta^2/(4M^2)) sum x^2 + value_fn(x).

    The search runs in the half-profile coordinates, bounded to [0, 1], from
    a zero start, a mid start, and one seeded random start.
    """
    if m_slices > HOPF_LAX_CAP:
        raise ValueError(f"size cap exceeded: M = {m_slices} > {HOPF_LAX_CAP}")
    if stream is None:
        stream = RngStream(seed=0).child(4242)
    dim = m_slices // 2 + 1
    mult = SelfOverlapKernel.zeros(m_slices).multiplicities().astype(np.float64)
    pen = beta**2 / (4.0 * m_slices**2) * m_slices
    evaluations = [0]

    def neg_objective(half: np.ndarray) -> float:
        evaluations[0] += 1
        kern = SelfOverlapKernel.from_half_profile(half, m_slices)
        return pen * float(mult @ (half**2)) - value_fn(kern)

    gen = stream.child(0).generator()
    centers = [np.zeros(dim), np.full(dim, 0.5), gen.uniform(size=dim)]
    per_run = max(10, opt_budget // len(centers))
    finals: list[float] = []
    best: tuple[float, np.ndarray] | None = None
    any_success = False
    for x0 in centers:
        if evaluations[0] >= opt_budget:
            break
        res = minimize(
            neg_objective,
            x0=x0,
            method="Nelder-Mead",
            bounds=[(0.0, 1.0)] * dim,
            options={
                "maxfev": min(per_run, max(10, opt_budget - evaluations[0])),
                "xatol": 1e-9,
                "fatol": 1e-12,
            },
        )
        any_success = any_success or bool(res.success)
        finals.append(float(res.fun))
        cand = (float(res.fun), np.asarray(res.x))
        if best is None or cand[0] < best[0]:
            best = cand
    assert best is not None
    return KernelSup(
        kernel=SelfOverlapKernel.from_half_profile(best[1], m_slices),
        value=-best[0],
        converged=any_success or _runs_agree(finals),
        n_evaluations=evaluations[0],
    )


@dataclass(frozen=True)
class HopfLaxResult:
    """Envelope value with the optimal kernel and the inner optimum there."""

    value: float
    kernel: SelfOverlapKernel
    inner: RsbOptimum
    converged: bool
    n_outer_evaluations: int


def hopf_lax_sup(
    k: int,
    mix: MixtureFunction,
    beta: float,
    b: float,
    c: float,
    m_slices: int,
    quad: QuadratureSpec,
    opt_budget: int = 200,
    inner_budget: int = 600,
    stream: RngStream | None = None,
) -> HopfLaxResult:
    """Outer envelope: sup_x [ -(beta^2/(4M^2)) sum x^2 + inf_{m,q} P_k(x) ].

    The inner minimization is warm-started across kernel iterates.  At b = 0
    the inner value depends on the kernel only through its mean, so the sup
    collapses to a bounded scalar search over uniform kernels (with the x = 1
    endpoint probed exactly).
    """
    if m_slices > HOPF_LAX_CAP:
        raise ValueError(f"size cap exceeded: M = {m_slices} > {HOPF_LAX_CAP}")
    if stream is None:
        stream = RngStream(seed=quad.seed).child(7171)
    state: dict[str, RsbParams | None] = {"warm": None}

    def inner_opt(kern: SelfOverlapKernel) -> RsbOptimum:
        site = SingleSiteModel(beta, b, c, m_slices, kern)
        opt = optimize_rsb(
            k, mix, site, quad, inner_budget, stream.child(1), warm_start=state["warm"]
        )
        state["warm"] = opt.params
        return opt

    if b == 0.0:
        evaluations = [0]

        def neg_scalar(x: float) -> float:
            evaluations[0] += 1
            kern = SelfOverlapKernel.uniform(x, m_slices)
            return beta**2 / 4.0 * x**2 - inner_opt(kern).value

        res = minimize_scalar(
            neg_scalar,
            bounds=(0.0, 1.0),
            method="bounded",
            options={"xatol": 1e-9, "maxiter": max(20, opt_budget - 2)},
        )
        candidates = [(neg_scalar(1.0), 1.0), (float(res.fun), float(res.x))]
        neg_best, x_best = min(candidates, key=lambda cv: cv[0])
        kern = SelfOverlapKernel.uniform(x_best, m_slices)
        return HopfLaxResult(
            value=-neg_best,
            kernel=kern,
            inner=inner_opt(kern),
            converged=bool(res.success),
            n_outer_evaluations=evaluations[0],
        )

    sup = kernel_envelope_sup(
        lambda kern: inner_opt(kern).value,
        beta,
        m_slices,
        opt_budget=opt_budget,
        stream=stream.child(2),
    )
    return HopfLaxResult(
        value=sup.value,
        kernel=sup.kernel,
        inner=inner_opt(sup.kernel),
        converged=sup.converged,
        n_outer_evaluations=sup.n_evaluations,
    )


@dataclass(frozen=True)
class QuadraticProxy:
    """Synthetic stand-in value function, quadratic around a center kernel.

    value(x) = level - curvature * (beta^2/(4M^2)) sum_{l,l'} (x - w)^2.
    Its envelope has the closed form used to validate the numeric machinery:
    chi(t, y) = level - [curvature/(1 + curvature (1-t))] * (beta^2/(4M^2))
    sum (y - w)^2, which solves the quadratic-transport equation exactly.
    """

    level: float
    curvature: float
    center: SelfOverlapKernel
    beta: float

    def __post_init__(self) -> None:
        if self.curvature < 0:
            raise ValueError("curvature must be non-negative")

    def _pen(self) -> float:
        m = self.center.m_slices
        return self.beta**2 / (4.0 * m**2)

    def __call__(self, kernel: SelfOverlapKernel) -> float:
        return self.level - self.curvature * self._pen() * kernel.sum_sq(self.center)

    def exact_envelope(self, t: float, y: SelfOverlapKernel) -> float:
        if not 0.0 <= t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        shrink = self.curvature / (1.0 + self.curvature * (1.0 - t))
        return self.level - shrink * self._pen() * y.sum_sq(self.center)


def hopf_lax_chi(
    t: float,
    y: SelfOverlapKernel,
    k: int,
    mix: MixtureFunction,
    site: SingleSiteModel,
    quad: QuadratureSpec,
    opt_budget: int = 300,
    inner_budget: int = 600,
    proxy: Callable[[SelfOverlapKernel], float] | None = None,
    stream: RngStream | None = None,
) -> float:
    """Envelope sup_x [ (beta^2/(4M^2(t-1))) sum (x-y)^2 + value(x) ] on [0,1).

    Since t - 1 < 0 the quadratic is a penalty anchored at y; at t = 1 the
    penalty is infinitely stiff and the value at y is returned directly.  The
    default value function is the warm-started inner optimum of the depth-k
    functional with the trial kernel; tests may pass a synthetic ``proxy``.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    m = y.m_slices
    if site.m_slices != m:
        raise ValueError("anchor kernel and site must share the slice count")
    if m > HOPF_LAX_CAP:
        raise ValueError(f"size cap exceeded: M = {m} > {HOPF_LAX_CAP}")
    if stream is None:
        stream = RngStream(seed=quad.seed).child(5151)
    if proxy is None:
        state: dict[str, RsbParams | None] = {"warm": None}

        def proxy(kern: SelfOverlapKernel) -> float:
            opt = optimize_rsb(
                k,
                mix,
                site.with_kernel(kern),
                quad,
                inner_budget,
                stream.child(1),
                warm_start=state["warm"],
            )
            state["warm"] = opt.params
            return opt.value

    if t == 1.0:
        return float(proxy(y))

    pen = site.beta**2 / (4.0 * m**2 * (1.0 - t)) * m
    mult = y.multiplicities().astype(np.float64)
    anchor = np.asarray(y.half_profile())
    dim = anchor.size

    def neg_objective(half: np.ndarray) -> float:
        kern = SelfOverlapKernel.from_half_profile(half, m)
        return pen * float(mult @ (half - anchor) ** 2) - proxy(kern)

    gen = stream.child(2).generator()
    centers = [anchor, np.clip(anchor + gen.normal(scale=0.2, size=dim), 0.0, 1.0)]
    best = math.inf
    for x0 in centers:
        res = minimize(
            neg_objective,
            x0=x0,
            method="Nelder-Mead",
            bounds=[(0.0, 1.0)] * dim,
            options={
                "maxfev": max(10, opt_budget // len(centers)),
                "xatol": 1e-9,
                "fatol": 1e-12,
            },
        )
        best = min(best, float(res.fun))
    return -best


def hopf_lax_pde_residual(
    t: float,
    y: SelfOverlapKernel,
    chi_fn: Callable[[float, SelfOverlapKernel], float],
    beta: float,
    step_t: float = 1e-3,
    step_profile: float = 1e-3,
) -> float:
    """|d chi/dt + (M^2/beta^2) sum_{l,l'} (d chi/dy_{l,l'})^2| by central FD.

    The kernel gradient is taken in the half-profile coordinates; a
    coordinate covering ``mult`` offsets aggregates M * mult equal matrix
    entries, so the squared-gradient sum is sum_d FD_d^2 / (M * mult_d).
    """
    if not step_t < t < 1.0 or t + step_t > 1.0:
        raise ValueError("t must be interior with room for the time stencil")
    m = y.m_slices
    half = np.asarray(y.half_profile())
    mult = y.multiplicities().astype(np.float64)
    if np.any(half - step_profile < 0.0) or np.any(half + step_profile > 1.0):
        raise ValueError("profile must be interior with room for the stencil")

    def at_half(values: np.ndarray) -> float:
        return chi_fn(t, SelfOverlapKernel.from_half_profile(values, m))

    dt = (chi_fn(t + step_t, y) - chi_fn(t - step_t, y)) / (2.0 * step_t)
    grad_sq = 0.0
    for d in range(half.size):
        up = half.copy()
        dn = half.copy()
        up[d] += step_profile
        dn[d] -= step_profile
        fd = (at_half(up) - at_half(dn)) / (2.0 * step_profile)
        grad_sq += fd**2 / (m * mult[d])
    return abs(dt + m**2 / beta**2 * grad_sq)


class CovarianceRow(NamedTuple):
    """One overlap cell of the interaction-covariance check."""

    overlap: float
    estimate: MCEstimate
    exact: float
    leading: float
    correction: float


def pspin_exact_covariance(p: int, n_sites: int, n_agree: int) -> float:
    """Exact (1/N) E U(s1) U(s2) when the configurations agree on n sites.

    Summing the product of +-1 entries over all p-subsets gives an
    alternating binomial convolution over how many disagreeing sites the
    subset picks up.
    """
    if p < 2 or p % 2 != 0:
        raise ValueError("interaction order must be an even integer >= 2")
    if not 0 <= n_agree <= n_sites:
        raise ValueError("agreement count out of range")
    total = sum(
        (-1) ** j * math.comb(n_sites - n_agree, j) * math.comb(n_agree, p - j)
        for j in range(max(0, p - n_agree), min(p, n_sites - n_agree) + 1)
    )
    return math.factorial(p) * total / (2.0 * n_sites**p)


def pspin_covariance_check(
    p: int,
    n_sites: int,
    n_samples: int,
    stream: RngStream,
    agreements: Sequence[int] | None = None,
) -> list[CovarianceRow]:
    """MC covariance of the interaction at prescribed overlaps vs the exact value.

    Each row fixes a pair (s1 = all up, s2 agreeing on n sites), estimates
    (1/N) E U(s1) U(s2) over fresh couplings, and reports it next to the
    combinatorial value, its leading term xi(rho), and the finite-size
    correction c_N = exact - xi(rho).
    """
    if n_sites > PSPIN_SITE_CAP:
        raise ValueError(f"size cap exceeded: N = {n_sites} > {PSPIN_SITE_CAP}")
    if p < 2 or p % 2 != 0 or p > n_sites:
        raise ValueError("need even order with 2 <= p <= N")
    if n_samples < 2:
        raise ValueError("need at least two samples")
    if agreements is None:
        agreements = range(n_sites + 1)
    agreements = sorted(set(int(n) for n in agreements))
    if any(n < 0 or n > n_sites for n in agreements):
        raise ValueError("agreement counts must lie in 0..N")

    tuples = np.array(list(combinations(range(n_sites), p)), dtype=np.int64)
    weight_vecs = []
    for n in agreements:
        v = np.ones(n_sites)
        v[n:] = -1.0
        weight_vecs.append(np.prod(v[tuples], axis=1))
    scale = math.factorial(p) / (2.0 * n_sites ** (p - 1)) / n_sites

    block = 2048
    collected: list[list[np.ndarray]] = [[] for _ in agreements]
    done = 0
    block_idx = 0
    while done < n_samples:
        count = min(block, n_samples - done)
        g = stream.child(block_idx).generator().standard_normal((count, len(tuples)))
        u1 = g.sum(axis=1)
        for row, w in enumerate(weight_vecs):
            collected[row].append(scale * u1 * (g @ w))
        done += count
        block_idx += 1

    mix = MixtureFunction(p)
    rows = []
    for n, chunks in zip(agreements, collected):
        rho = (2.0 * n - n_sites) / n_sites
        exact = pspin_exact_covariance(p, n_sites, n)
        leading = mix.xi(rho)
        rows.append(
            CovarianceRow(
                overlap=rho,
                estimate=mc_estimate(np.concatenate(chunks)),
                exact=exact,
                leading=leading,
                correction=exact - leading,
            )
        )
    return rows
