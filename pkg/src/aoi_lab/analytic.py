"""Closed-form stationary distributions for the size-1 and size-2 queues.

Every function here is a pure function of its arguments.  PMFs are returned
as :class:`~aoi_lab.core.Pmf` with a tail bound from
:func:`~aoi_lab.core.geometric_tail_bound`; single state probabilities are
plain floats.

Notation used throughout: ``s = (1-p)(1-gamma)``, ``a = p + gamma - p*gamma``,
``N = (p + gamma - 2 p gamma) gamma + p^2 (1-gamma)^2`` for the
non-replacing size-2 queue and ``D = a^2 - p gamma`` for the replacing one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (
    BER_G_1_1, BER_GEO_1_1, BER_GEO_1_2, BER_GEO_1_2_STAR, BER_GEO_1_C,
    IllConditioned, InvalidParameters, InvalidState, ModelSpec, NearSingular,
    NonNormalizable, Pmf, PreemptionPolicy, ServiceDistribution,
    StationaryTable, SystemParams, default_n_p, geometric_tail_bound,
    validate_age_state,
)

SINGULAR_GAP = 1e-9
DEFAULT_N_MAX = 512


def _require_gap(params: SystemParams):
    if abs(params.gamma - params.p) <= SINGULAR_GAP:
        raise NearSingular(
            f"|gamma - p| <= {SINGULAR_GAP}: closed form divides by (gamma - p); "
            "use the chain engine instead")


def _tail(params: SystemParams, n_max: int) -> float:
    return geometric_tail_bound(n_max, max(1.0 - params.p, 1.0 - params.gamma))


def _aoi_pmf(probs: np.ndarray, params: SystemParams, n_max: int) -> Pmf:
    probs = np.clip(probs, 0.0, None)
    return Pmf(1, probs, _tail(params, n_max))


# ---------------------------------------------------------------------------
# Shared intermediate quantities
# ---------------------------------------------------------------------------

def n_pg(p: float, g: float) -> float:
    """N(p, gamma) for the non-replacing size-2 queue."""
    return (p + g - 2 * p * g) * g + p * p * (1 - g) ** 2


def n_pg_alt(p: float, g: float) -> float:
    """Equivalent factorised form of N(p, gamma)."""
    return (1 - p) * g * (p + g - p * g) + p * p * (1 - g)


def star_denominator(p: float, g: float) -> float:
    """(p + gamma - p gamma)^2 - p gamma, positive on the open unit square."""
    a = p + g - p * g
    return a * a - p * g


def occupancy_masses(p: float, g: float) -> tuple:
    """(M1, M2): mass of the empty states and of the one-packet states."""
    n = n_pg(p, g)
    return (1 - p) * g * g / n, p * g * (1 - g) / n


def preemptive_roots(p: float, g: float, n_p: int) -> tuple:
    return (1 - p, 1 - g, n_p * (1 - p) * (1 - g) / (n_p + 1))


def xi_coefficients(p: float, g: float, n_p: int) -> tuple:
    a = p + g - p * g
    den = n_p * g * a + g
    return (n_p * g + 1) * p * a / den, p * (1 - g) * a / den


def star_delta_tilde(p: float, g: float) -> tuple:
    d = star_denominator(p, g)
    return (p * g * (1 - g) * (p + 2 * g - 2 * p * g) / d,
            p * g * (1 - p) * (1 - g) * (p + g - p * g) / d)


def star_t(params: SystemParams, n) -> np.ndarray:
    """t_n: stationary mass of in-service age n for the replacing queue (n >= 0)."""
    p, g = params.p, params.gamma
    n = np.asarray(n)
    d = star_denominator(p, g)
    d1, d2 = star_delta_tilde(p, g)
    s = (1 - p) * (1 - g)
    nn = np.maximum(n, 1).astype(float)
    out = d1 * (1 - g) ** (nn - 1) - d2 * s ** (nn - 1)
    return np.where(n == 0, (1 - p) * g * g / d, out)


def f_function(p: float, service: ServiceDistribution, n: int) -> float:
    """F(p, n) of the non-preemptive general-service solution."""
    q1 = service.q1
    acc = math.fsum((1 - p) ** j * service.pmf(n - 1 - j) for j in range(0, n - 1))
    return (1 - p) ** (n - 1) + (1 - q1) / q1 * acc


@dataclass(frozen=True)
class AnalyticIntermediates:
    """Named intermediate quantities of the closed forms at one (p, gamma)."""

    N_pg: float
    M1: float
    M2: float
    xi1: Optional[float]
    xi2: Optional[float]
    t: Callable[[int], float]
    c123: Optional[tuple]
    roots: Optional[tuple]
    delta: Optional[tuple]
    delta_tilde: tuple
    F: Optional[Callable[[int], float]]
    alpha: Optional[np.ndarray]


def analytic_intermediates(params: SystemParams, n_p: Optional[int] = None,
                           service: Optional[ServiceDistribution] = None,
                           preemption: Optional[PreemptionPolicy] = None,
                           alpha_terms: int = 64) -> AnalyticIntermediates:
    """Collect the intermediate constants used by the closed forms.

    The preemptive quantities (xi, c, roots, delta) are filled when ``n_p``
    is given; F and alpha need a service distribution.
    """
    p, g = params.p, params.gamma
    m1, m2 = occupancy_masses(p, g)
    xi1 = xi2 = c123 = roots = delta = None
    if n_p is not None:
        sol = preemptive_geo_solution(params, n_p)
        xi1, xi2 = sol.xi1, sol.xi2
        c123, roots, delta = sol.c, sol.roots, sol.delta
    f = alpha = None
    if service is not None:
        f = lambda n: f_function(p, service, n)  # noqa: E731
        pol = preemption or PreemptionPolicy.none()
        alpha = _alpha_sequence(p, service, pol, alpha_terms)
    return AnalyticIntermediates(
        N_pg=n_pg(p, g), M1=m1, M2=m2, xi1=xi1, xi2=xi2,
        t=lambda n: float(star_t(params, n)), c123=c123, roots=roots,
        delta=delta, delta_tilde=star_delta_tilde(p, g), F=f, alpha=alpha)


# ---------------------------------------------------------------------------
# Ber/Geo/1/1
# ---------------------------------------------------------------------------

def ber_geo11_aoi_pmf(params: SystemParams, n_max: int = DEFAULT_N_MAX) -> Pmf:
    """AoI distribution of the size-1 geometric queue without preemption."""
    _require_gap(params)
    p, g = params.p, params.gamma
    a = p + g - p * g
    n = np.arange(1, n_max + 1, dtype=float)
    k1 = p * (1 - p) * g ** 3 / (a * (g - p) ** 2)
    k2 = (p * g) ** 2 / (a * (g - p))
    probs = k1 * ((1 - p) ** n - (1 - g) ** n) - k2 * n * (1 - g) ** n
    return _aoi_pmf(probs, params, n_max)


def ber_geo11_aoi_tail(params: SystemParams, k):
    """Pr{AoI > k} for k >= 0 (scalar or array)."""
    _require_gap(params)
    p, g = params.p, params.gamma
    a = p + g - p * g
    k = np.asarray(k, dtype=float)
    num = ((1 - p) ** (k + 2) * g ** 3
           - (p * (1 - p) * g * g + p * p * (g - p)) * (1 - g) ** (k + 1)
           - p * p * g * (g - p) * k * (1 - g) ** (k + 1))
    out = num / (a * (g - p) ** 2)
    return float(out) if out.ndim == 0 else out


def ber_geo11_aoi_cdf(params: SystemParams, k):
    """Pr{AoI <= k}."""
    t = ber_geo11_aoi_tail(params, k)
    return 1.0 - t


def ber_geo11_state_probs(params: SystemParams, n_max: int = DEFAULT_N_MAX) -> StationaryTable:
    """Stationary table over (n, m), 0 <= m < n <= n_max."""
    _require_gap(params)
    p, g = params.p, params.gamma
    a = p + g - p * g
    states = _pairs(n_max)
    n = states[:, 0].astype(float)
    m = states[:, 1].astype(float)
    empty = p * g * g / (a * (g - p)) * ((1 - p) ** n - (1 - g) ** n)
    busy = (p * g) ** 2 / (a * (g - p)) * ((1 - p) ** (n - m) * (1 - g) ** m - (1 - g) ** n)
    probs = np.where(states[:, 1] == 0, empty, busy)
    return StationaryTable(states, np.clip(probs, 0.0, None), 0.0, n_max)


def ber_geo11_service_recovery(table: StationaryTable) -> Pmf:
    """Distribution of the in-service age given a busy server."""
    m = table.states[:, 1]
    idle = float(table.probs[m == 0].sum())
    busy = 1.0 - idle
    m_max = int(m.max())
    mass = np.bincount(m, weights=table.probs, minlength=m_max + 1)[1:]
    probs = mass / busy
    # The stored table stops at n_max; the result may then fall short of 1
    # by the truncated mass, which we report as the tail bound.
    return Pmf(1, np.clip(probs, 0, 1), max(0.0, 1.0 - float(probs.sum())))


def _pairs(n_max: int) -> np.ndarray:
    n, m = np.tril_indices(n_max)
    return np.stack([n + 1, m], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# Ber/G/1/1 with probabilistic preemption
# ---------------------------------------------------------------------------

def _alpha_sequence(p: float, service: ServiceDistribution, pol: PreemptionPolicy,
                    count: int) -> np.ndarray:
    """alpha_j for j = 1..count: mass flowing from a preempted age-j packet."""
    g = pol.values(count, p)
    surv = service.survival_ge_array(count)
    keep = np.concatenate([[1.0], np.cumprod(1 - p * g)[:-1]])
    return keep * surv * g


def _series_budget(service: ServiceDistribution, pol: PreemptionPolicy, p: float,
                   n_max: int) -> int:
    support = service.max_support
    if support is not None:
        return max(support, 2)
    if service.kind == "geometric":
        r = 1.0 - service.gamma
        if r <= 0:
            return 2
        need = int(math.ceil(math.log(1e-18) / math.log(r))) + 2
        return max(2, min(need, 10 * n_max))
    return 10 * n_max


def ber_g11_state_probs(params: SystemParams, service: ServiceDistribution,
                        g: Optional[PreemptionPolicy] = None,
                        n_max: int = DEFAULT_N_MAX) -> StationaryTable:
    """Stationary table of the size-1 queue with general service and preemption.

    pi(n, 0) comes from the explicit convolution formula normalised by the
    infinite series for pi(1, 0); pi(n, 1) from forward recursion of its
    difference equation; pi(n, m), m >= 2, by propagating pi(n-m+1, 1).
    """
    pol = g or PreemptionPolicy.none()
    pol.validate_for(params.p)
    p = params.p
    q1 = service.q1
    if q1 <= 0:
        raise InvalidParameters("need q_1 > 0")
    budget = _series_budget(service, pol, p, n_max)
    width = max(budget, n_max) + 1
    qs = service.pmf_array(width)                  # q_1..q_width
    surv = service.survival_ge_array(width)       # P(B>=1)..P(B>=width)
    gv = pol.values(width, p)                      # g(1)..g(width)
    keep = np.concatenate([[1.0], np.cumprod(1 - p * gv)])  # prod_{l<=k}, k=0..width
    ratio = (1 - q1) / q1

    # a_k = prod_{l=1}^{k}[1 - p g(l)] q_k
    a_k = keep[1:width + 1] * qs
    # b_m = prod_{l=1}^{m-1}[1 - p g(l)] P(B >= m)
    b_m = keep[:width] * surv
    a_tail = a_k[:budget]
    b_tail = b_m[:budget]
    last = max(abs(a_tail[-1]), abs(b_tail[-1]))
    if service.max_support is None and last > 1e-16 * max(1.0, a_tail.sum() + b_tail.sum()):
        raise NonNormalizable("normalising series did not converge within its budget")
    inv_pi10 = 1.0 / p + ratio * (math.fsum(a_tail) / p + math.fsum(b_tail))
    pi10 = 1.0 / inv_pi10

    # pi(n, 0) = pi(1,0) {(1-p)^{n-1} + ratio * sum_{k=1}^{n-1} (1-p)^{n-1-k} a_k}
    conv = np.zeros(n_max + 1)
    acc = 0.0
    for n in range(2, n_max + 1):
        acc = acc * (1 - p) + a_k[n - 2]
        conv[n] = acc
    nn = np.arange(n_max + 1, dtype=float)
    pi_n0 = np.zeros(n_max + 1)
    pi_n0[1:] = pi10 * ((1 - p) ** (nn[1:] - 1) + ratio * conv[1:])

    # alpha_j = prod_{l<j}[1 - p g(l)] P(B >= j) g(j)
    alpha = keep[:width] * surv * gv
    pi_n1 = np.zeros(n_max + 1)
    if n_max >= 2:
        pi_n1[2] = pi10 * p * (1 - q1)
    for n in range(3, n_max + 1):
        j = np.arange(1, n - 1)
        pi_n1[n] = p * (1 - q1) * (pi_n0[n - 1] + float(np.dot(alpha[j - 1], pi_n1[n - j])))

    states = _pairs(n_max)
    n = states[:, 0]
    m = states[:, 1]
    probs = np.empty(len(states))
    empty = m == 0
    probs[empty] = pi_n0[n[empty]]
    busy = ~empty
    mb = m[busy]
    probs[busy] = pi_n1[n[busy] - mb + 1] * b_m[mb - 1]
    return StationaryTable(states, np.clip(probs, 0.0, None), 0.0, n_max)


def ber_g11_nopreempt_state_probs(params: SystemParams, service: ServiceDistribution,
                                  n_max: int = DEFAULT_N_MAX) -> StationaryTable:
    """Stationary table of the size-1 general-service queue without preemption.

    Uses the F(p, n) representation directly; serves as an oracle for the
    preemptive solver with g = 0.
    """
    p = params.p
    q1 = service.q1
    budget = _series_budget(service, PreemptionPolicy.none(), p, n_max)
    surv = service.survival_ge_array(max(budget, n_max) + 1)
    den = 1.0 + p * (1 - q1) * math.fsum(surv[:budget])
    qs = service.pmf_array(n_max + 1)
    f = np.zeros(n_max + 1)
    acc = 0.0
    for n in range(1, n_max + 1):
        if n >= 2:
            acc = acc * (1 - p) + qs[n - 2]
        f[n] = (1 - p) ** (n - 1) + (1 - q1) / q1 * acc
    states = _pairs(n_max)
    n = states[:, 0]
    m = states[:, 1]
    probs = np.where(
        m == 0,
        p * q1 * f[n] / den,
        p * p * q1 * (1 - q1) * f[np.maximum(n - m, 1)] * surv[np.maximum(m, 1) - 1] / den)
    return StationaryTable(states, np.clip(probs, 0.0, None), 0.0, n_max)


def table_aoi_pmf(table: StationaryTable, params: SystemParams) -> Pmf:
    """Sum a closed-form table over every component but the first."""
    n = table.states[:, 0]
    mass = np.bincount(n, weights=table.probs, minlength=table.truncation + 1)[1:]
    return _aoi_pmf(mass, params, table.truncation)


def ber_g11_aoi_pmf(params: SystemParams, service: ServiceDistribution,
                    g: Optional[PreemptionPolicy] = None,
                    n_max: int = DEFAULT_N_MAX) -> Pmf:
    table = ber_g11_state_probs(params, service, g, n_max)
    pmf = table_aoi_pmf(table, params)
    missing = max(0.0, 1.0 - pmf.total())
    return Pmf(1, pmf.probs, max(pmf.tail_bound if service.kind == "geometric" else 0.0, missing))


# ---------------------------------------------------------------------------
# Ber/Geo/1/1 with the increasing preemption family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreemptiveSolution:
    """Explicit solution of the preemptive geometric queue at one parameter point."""

    n_p: int
    xi1: float
    xi2: float
    roots: tuple
    delta: tuple
    seeds: tuple          # pi(3,1), pi(4,1), pi(5,1)
    c: tuple
    condition: float
    pi10: float
    pi21: float
    # Pr{AoI=n} = A[0] r1^n + A[1] r2^n + A[2] s^n + A[3] n s^n for n >= 3
    power_coefficients: tuple

    def pi_n0(self, n, params: SystemParams):
        p, g = params.p, params.gamma
        n = np.asarray(n, dtype=float)
        s = (1 - p) * (1 - g)
        return (self.xi1 * (1 - p) ** (n - 1)
                - self.xi2 * (1 + (self.n_p + n) * g) * s ** (n - 1))

    def pi_n1(self, n):
        n = np.asarray(n, dtype=float)
        out = sum(c * r ** n for c, r in zip(self.c, self.roots))
        return np.where(n == 2, self.pi21, out)


def _preemptive_seeds(params: SystemParams, n_p: int, xi1: float, xi2: float,
                      upto: int = 5) -> np.ndarray:
    """pi(n, 1) for n = 2..upto by direct recursion of the balance equations."""
    p, g = params.p, params.gamma
    s = (1 - p) * (1 - g)
    pi_n0 = lambda n: xi1 * (1 - p) ** (n - 1) - xi2 * (1 + (n_p + n) * g) * s ** (n - 1)  # noqa: E731
    pi1 = np.zeros(upto + 1)
    pi1[2] = pi_n0(1) * p * (1 - g)

    def pi_nm(n, m):
        return pi1[n - m + 1] * s ** (m - 1) * (n_p + m) / (n_p + 1)

    for n in range(3, upto + 1):
        acc = pi_n0(n - 1) * p * (1 - g)
        for j in range(1, n - 1):
            acc += pi_nm(n - 1, j) * (1 - (1 - p) * (n_p + j + 1) / (n_p + j)) * (1 - g)
        pi1[n] = acc
    return pi1


def preemptive_geo_solution(params: SystemParams, n_p: Optional[int] = None) -> PreemptiveSolution:
    """Coefficients of the explicit solution for the preemptive geometric queue."""
    n_p = default_n_p(params.p) if n_p is None else int(n_p)
    PreemptionPolicy.increasing(n_p).validate_for(params.p)
    p, g = params.p, params.gamma
    s = (1 - p) * (1 - g)
    xi1, xi2 = xi_coefficients(p, g, n_p)
    roots = preemptive_roots(p, g, n_p)
    # With N_p = 0 the third root is zero and the recursion drops to order two.
    active = [r for r in roots if r > 0.0]
    if len({round(r, 14) for r in active}) < len(active):
        raise IllConditioned("characteristic roots coincide; use the recursion or chain engine")
    seeds = _preemptive_seeds(params, n_p, xi1, xi2, 5)
    ks = (3, 4, 5)[:len(active)]
    mat = np.array([[r ** k for r in active] for k in ks])
    cond = float(np.linalg.cond(mat))
    if not np.isfinite(cond) or cond > 1e12:
        raise IllConditioned(f"root system condition number {cond:.3g} exceeds 1e12")
    c = list(np.linalg.solve(mat, seeds[list(ks)]))
    c += [0.0] * (3 - len(c))
    delta = tuple(s / r if r > 0 else math.inf for r in roots)
    pi10 = (n_p + 1) * p * g * (p + g - p * g) / (n_p * (p + g - p * g) + 1)
    pi21 = pi10 * p * (1 - g)

    # Expand the n >= 3 distribution on the basis r1^n, r2^n, s^n, n s^n.
    # The third root's own power cancels because N_p/(1-d3) + 1/(1-d3)^2 = 0.
    k_bar = 1 - p * g / s
    a1 = xi1 / (1 - p)
    a2 = 0.0
    a3 = -xi2 / s * (1 + g + (n_p - 1) * g * k_bar)
    a4 = -xi2 / s * g * k_bar
    for i, (ci, ri, di) in enumerate(zip(c, roots, delta)):
        if ci == 0.0:
            continue
        if i < 2:
            base = ci / (n_p + 1) * (n_p / (1 - di) + 1 / (1 - di) ** 2)
            if i == 0:
                a1 += base
            else:
                a2 += base
        w = ci * ri * ri / ((n_p + 1) * (1 - di) ** 2 * s * s)
        a3 -= w * (1 + (1 - di) * (n_p - 2))
        a4 -= w * (1 - di)
    return PreemptiveSolution(
        n_p=n_p, xi1=xi1, xi2=xi2, roots=roots, delta=delta,
        seeds=(seeds[3], seeds[4], seeds[5]), c=tuple(float(x) for x in c),
        condition=cond, pi10=pi10, pi21=pi21,
        power_coefficients=(a1, a2, a3, a4))


def _weighted_geometric_sum(n_p: int, d: float, count: np.ndarray) -> np.ndarray:
    """sum_{m=1}^{count} (n_p + m) d^(m-1), evaluated stably for any d."""
    count = np.asarray(count, dtype=float)
    if abs(1 - d) < 1e-9:
        return n_p * count + count * (count + 1) / 2
    return (n_p * (1 - d ** count) / (1 - d)
            + (1 - (count + 1) * d ** count + count * d ** (count + 1)) / (1 - d) ** 2)


def preemptive_geo_aoi_pmf(params: SystemParams, n_p: Optional[int] = None,
                           n_max: int = DEFAULT_N_MAX) -> Pmf:
    """AoI distribution of the geometric size-1 queue with the increasing preemption family."""
    sol = preemptive_geo_solution(params, n_p)
    p, g = params.p, params.gamma
    s = (1 - p) * (1 - g)
    n = np.arange(1, n_max + 1, dtype=float)
    k_bar = 1 - p * g / s
    out = (sol.xi1 * (1 - p) ** (n - 1)
           - sol.xi2 * (1 + g + (sol.n_p + n - 1) * g * k_bar) * s ** (n - 1))
    for ci, ri, di in zip(sol.c, sol.roots, sol.delta):
        if ci == 0.0:
            continue
        out = out + ci * ri ** n / (sol.n_p + 1) * _weighted_geometric_sum(sol.n_p, di, n - 2)
    out[0] = sol.pi10
    return _aoi_pmf(out, params, n_max)


def preemptive_geo_aoi_pmf_bracket(params: SystemParams, n_p: Optional[int] = None,
                                   n_max: int = DEFAULT_N_MAX, shift: int = 2) -> Pmf:
    """Same assembly through the closed bracket with factor ``(N_p + n - shift)``.

    ``shift=2`` is the reading that matches the direct weighted sum in
    :func:`preemptive_geo_aoi_pmf`; ``shift=1`` is the competing reading and
    is kept so tests can show it is not a distribution of this chain.
    """
    sol = preemptive_geo_solution(params, n_p)
    p, g = params.p, params.gamma
    s = (1 - p) * (1 - g)
    n = np.arange(1, n_max + 1, dtype=float)
    k_bar = 1 - p * g / s
    out = (sol.xi1 * (1 - p) ** (n - 1)
           - sol.xi2 * (1 + g + (sol.n_p + n - 1) * g * k_bar) * s ** (n - 1))
    for ci, ri, di in zip(sol.c, sol.roots, sol.delta):
        if ci == 0.0:
            continue
        bracket = (sol.n_p / (1 - di)
                   + (1 - (1 + (1 - di) * (sol.n_p + n - shift)) * di ** (n - 2)) / (1 - di) ** 2)
        out = out + ci * ri ** n / (sol.n_p + 1) * bracket
    out[0] = sol.pi10
    return _aoi_pmf(out, params, n_max)


def preemptive_geo_state_probs(params: SystemParams, n_p: Optional[int] = None,
                               n_max: int = DEFAULT_N_MAX) -> StationaryTable:
    """Stationary table of the preemptive geometric queue from its explicit solution."""
    sol = preemptive_geo_solution(params, n_p)
    p, g = params.p, params.gamma
    s = (1 - p) * (1 - g)
    states = _pairs(n_max)
    n = states[:, 0]
    m = states[:, 1]
    probs = np.empty(len(states))
    e = m == 0
    probs[e] = sol.pi_n0(n[e], params)
    b = ~e
    nb, mb = n[b], m[b]
    head = sol.pi_n1(nb - mb + 1)
    probs[b] = head * s ** (mb - 1) * (sol.n_p + mb) / (sol.n_p + 1)
    return StationaryTable(states, np.clip(probs, 0.0, None), 0.0, n_max)


# ---------------------------------------------------------------------------
# Ber/Geo/1/2
# ---------------------------------------------------------------------------

def _require_size2(params: SystemParams):
    params.require_stable()
    _require_gap(params)


def _check_state3(state) -> tuple:
    v = validate_age_state(state)
    if len(v) != 3:
        raise InvalidState(f"expected a 3-component age vector, got {v}")
    return v


def _geo12_vec(params: SystemParams, n, m, l):
    p, g = params.p, params.gamma
    nn = n_pg(p, g)
    n = np.asarray(n, dtype=float)
    m = np.asarray(m, dtype=float)
    l = np.asarray(l, dtype=float)
    empty = p * (1 - p) * g ** 3 / (nn * (g - p)) * ((1 - p) ** n - (1 - g) ** n)
    one = (p * p * g ** 3 / (nn * (g - p)) * ((1 - p) ** n * (1 - g) ** m - (1 - p) ** m * (1 - g) ** n)
           + p * g ** 3 / nn * ((1 - g) ** (n - 1) - (1 - p) ** m * (1 - g) ** (n - 1)))
    full = ((p * g) ** 3 / (nn * (g - p))
            * ((1 - p) ** (n - l) * (1 - g) ** m - (1 - p) ** (m - l) * (1 - g) ** n)
            + p * p * g ** 3 / nn * ((1 - g) ** (n - 1) - (1 - p) ** (m - l) * (1 - g) ** (n - 1)))
    return np.where(m == 0, empty, np.where(l == 0, one, full))


def ber_geo12_state_prob(params: SystemParams, state) -> float:
    """pi(n, m, l) of the non-replacing size-2 queue."""
    _require_size2(params)
    n, m, l = _check_state3(state)
    return float(_geo12_vec(params, n, m, l))


def _triples(n_max: int) -> np.ndarray:
    """All (n, m, l) with n_max >= n > m > l >= 0 (zeros trailing), lexicographic."""
    rows = []
    for n in range(1, n_max + 1):
        rows.append((n, 0, 0))
        for m in range(1, n):
            rows.append((n, m, 0))
            for l in range(1, m):
                rows.append((n, m, l))
    return np.array(rows, dtype=np.int64)


def ber_geo12_state_probs(params: SystemParams, n_max: int = 120) -> StationaryTable:
    _require_size2(params)
    st = _triples(n_max)
    probs = _geo12_vec(params, st[:, 0], st[:, 1], st[:, 2])
    return StationaryTable(st, np.clip(probs, 0.0, None), 0.0, n_max)


def ber_geo12_aoi_pmf(params: SystemParams, n_max: int = DEFAULT_N_MAX) -> Pmf:
    """AoI distribution of the non-replacing size-2 queue."""
    _require_size2(params)
    p, g = params.p, params.gamma
    nn = n_pg(p, g)
    n = np.arange(1, n_max + 1, dtype=float)
    probs = (p * (1 - p) ** 2 * g ** 4 / (nn * (g - p) ** 2) * ((1 - p) ** n - (1 - g) ** n)
             - p * p * g ** 3 / nn * (1 / (2 * (1 - g)) + (1 - p) / (g - p)) * n * (1 - g) ** n
             + p * p * g ** 3 / (2 * nn) * n * n * (1 - g) ** (n - 1))
    return _aoi_pmf(probs, params, n_max)


def ber_geo12_aoi_tail(params: SystemParams, k):
    """Pr{AoI > k} for the non-replacing size-2 queue."""
    _require_size2(params)
    p, g = params.p, params.gamma
    nn = n_pg(p, g)
    k = np.asarray(k, dtype=float)
    out = ((1 - p) ** 3 * g ** 4 / (nn * (g - p) ** 2) * (1 - p) ** k
           - p * (1 - g) / (nn * (g - p)) * ((1 - p) ** 2 * g ** 3 / (g - p) + p * p * (1 - g)) * (1 - g) ** k
           - p * p * g / nn * ((1 - p) * (1 - g) * g / (g - p) - (2 - g) / 2) * k * (1 - g) ** k
           + (p * g) ** 2 / (2 * nn) * k * k * (1 - g) ** k)
    return float(out) if out.ndim == 0 else out


def ber_geo12_aoi_cdf(params: SystemParams, k):
    return 1.0 - ber_geo12_aoi_tail(params, k)


def ber_geo12_system_time_pmf(params: SystemParams, m_max: int = DEFAULT_N_MAX) -> Pmf:
    """Stationary in-service age (0 when idle) of the non-replacing size-2 queue."""
    _require_size2(params)
    p, g = params.p, params.gamma
    nn = n_pg(p, g)
    m = np.arange(0, m_max + 1, dtype=float)
    probs = p * g * g / nn * (1 + (m - 1) * p) * (1 - g) ** m
    probs[0] = (1 - p) * g * g / nn
    return Pmf(0, probs, geometric_tail_bound(m_max, 1 - g))


def ber_geo12_waiting_time_pmf(params: SystemParams, l_max: int = DEFAULT_N_MAX) -> Pmf:
    """Stationary age of the queued packet (0 when none) of the non-replacing size-2 queue."""
    _require_size2(params)
    p, g = params.p, params.gamma
    nn = n_pg(p, g)
    l = np.arange(0, l_max + 1, dtype=float)
    probs = p * p * g / nn * (1 - g) ** (l + 1)
    probs[0] = (p + g - 2 * p * g) * g / nn
    return Pmf(0, probs, geometric_tail_bound(l_max, 1 - g))


# ---------------------------------------------------------------------------
# Ber/Geo/1/2* (the queued packet is replaced by any fresh arrival)
# ---------------------------------------------------------------------------

def _require_star(params: SystemParams):
    params.require_stable()


def _star_vec(params: SystemParams, n, m, l):
    p, g = params.p, params.gamma
    d = star_denominator(p, g)
    a = p + g - p * g
    b = p + 2 * g - 2 * p * g
    s = (1 - p) * (1 - g)
    n = np.asarray(n, dtype=float)
    m = np.asarray(m, dtype=float)
    l = np.asarray(l, dtype=float)
    empty = p * (1 - p) ** (n - 1) - p * (1 - g) * (1 + p * g * a / d * n) * s ** (n - 1)
    one = (p * p * (1 - p) ** (n - 2) * (1 - g) ** m * (1 - (1 - g) ** (n - m))
           + (p * g) ** 2 * b / d * m * (1 - p) ** (m - 1) * (1 - g) ** (n - 1)
           - p * p * g * (1 - g) * a / d * (p * (1 - g) * n + (g - p) * m) * s ** (n - 2))
    full = (p ** 3 * (1 - p) ** (n - m + l - 2) * (1 - g) ** m * (1 - (1 - g) ** (n - m))
            - p * p * g * a * (p * p * (1 - g) * (n - m) + (1 - p) * g) / d
            * (1 - p) ** (n - m + l - 2) * (1 - g) ** (n - 1)
            + (p * g) ** 2 * b / d * (1 - p) ** (l - 1) * (1 - g) ** (n - 1) * (1 - (1 - p) ** (m - l))
            + (p * g) ** 2 * a / d * s ** (n - 1))
    return np.where(m == 0, empty, np.where(l == 0, one, full))


def ber_geo12star_state_prob(params: SystemParams, state) -> float:
    """pi(n, m, l) of the replacing size-2 queue."""
    _require_star(params)
    n, m, l = _check_state3(state)
    return float(_star_vec(params, n, m, l))


def ber_geo12star_state_probs(params: SystemParams, n_max: int = 120) -> StationaryTable:
    _require_star(params)
    st = _triples(n_max)
    probs = _star_vec(params, st[:, 0], st[:, 1], st[:, 2])
    return StationaryTable(st, np.clip(probs, 0.0, None), 0.0, n_max)


def star_first_sum(params: SystemParams, n):
    """sum_{m=1}^{n-1} pi(n, m, 0) in closed form (n >= 2)."""
    p, g = params.p, params.gamma
    d = star_denominator(p, g)
    a = p + g - p * g
    b = p + 2 * g - 2 * p * g
    c2 = p + g - 2 * p * g
    s = (1 - p) * (1 - g)
    n = np.asarray(n, dtype=float)
    return (p * p * (1 - g) / ((1 - p) * g) * ((1 - p) ** (n - 1) - (1 + (n - 1) * g) * s ** (n - 1))
            + b * g * g / d * ((1 - g) ** (n - 1) - (1 + (n - 1) * p) * s ** (n - 1))
            - p * p * g * (1 - g) * a * c2 / (2 * d) * n * (n - 1) * s ** (n - 2))


def star_double_sum(params: SystemParams, n):
    """sum_{m=2}^{n-1} sum_{l=1}^{m-1} pi(n, m, l) in closed form (n >= 2)."""
    p, g = params.p, params.gamma
    d = star_denominator(p, g)
    a = p + g - p * g
    b = p + 2 * g - 2 * p * g
    c2 = p + g - 2 * p * g
    s = (1 - p) * (1 - g)
    n = np.asarray(n, dtype=float)
    t1 = p * p * (1 - g) ** 2 * (
        p / (g * (g - p)) * (1 - p) ** (n - 2)
        - g / (p * (g - p)) * (1 - g) ** (n - 2)
        + (1 / p + 1 / g + (n - 2)) * s ** (n - 2))
    t2 = -p * g * a / d * (
        c2 * (1 - g) / p * ((1 - g) ** (n - 2) - s ** (n - 2) - p * (n - 2) * s ** (n - 2))
        - p * p * (1 - g) ** 2 / 2 * (n - 1) * (n - 2) * s ** (n - 2))
    t3 = g * g * b / d * (p * (n - 2) * (1 - g) ** (n - 1) - 2 * (1 - p) * (1 - g) ** (n - 1)
                          + 2 * s ** (n - 1) + p * (n - 2) * s ** (n - 1))
    t4 = (p * g) ** 2 * a / (2 * d) * (n - 1) * (n - 2) * s ** (n - 1)
    return t1 + t2 + t3 + t4


def _star_pmf_values(params: SystemParams, n) -> np.ndarray:
    p, g = params.p, params.gamma
    d = star_denominator(p, g)
    n = np.asarray(n, dtype=float)
    empty = _star_vec(params, n, 0.0, 0.0)
    out = empty + star_first_sum(params, n) + star_double_sum(params, n)
    return np.where(n == 1, p * (1 - p) * g ** 3 / d, out)


def ber_geo12star_aoi_pmf(params: SystemParams, n_max: int = DEFAULT_N_MAX) -> Pmf:
    """AoI distribution of the replacing size-2 queue (closed-form sums)."""
    _require_star(params)
    _require_gap(params)
    n = np.arange(1, n_max + 1, dtype=float)
    return _aoi_pmf(_star_pmf_values(params, n), params, n_max)


def ber_geo12star_aoi_pmf_by_table(params: SystemParams, n_max: int = 200) -> Pmf:
    """Same distribution obtained by summing the state formulas entrywise."""
    table = ber_geo12star_state_probs(params, n_max)
    return table_aoi_pmf(table, params)


def ber_geo12star_aoi_tail(params: SystemParams, k, terms: Optional[int] = None):
    """Pr{AoI > k} by summing the closed-form PMF beyond k.

    Summation runs until the dominant geometric factor has shrunk by 1e-18,
    which keeps full relative accuracy even when the tail itself is tiny.
    """
    _require_star(params)
    _require_gap(params)
    p = params.p
    if terms is None:
        terms = int(math.ceil(math.log(1e-18) / math.log(1 - p))) + 64
    ks = np.atleast_1d(np.asarray(k, dtype=np.int64))
    out = np.empty(ks.size)
    for i, kk in enumerate(ks):
        n = np.arange(kk + 1, kk + 1 + terms, dtype=float)
        vals = _star_pmf_values(params, n)
        out[i] = math.fsum(vals[::-1])
    return float(out[0]) if np.ndim(k) == 0 else out


def ber_geo12star_aoi_cdf(params: SystemParams, k):
    return 1.0 - ber_geo12star_aoi_tail(params, k)


def ber_geo12star_system_time_pmf(params: SystemParams, m_max: int = DEFAULT_N_MAX) -> Pmf:
    _require_star(params)
    p, g = params.p, params.gamma
    d = star_denominator(p, g)
    s = (1 - p) * (1 - g)
    m = np.arange(0, m_max + 1, dtype=float)
    probs = (p * g * (p + 2 * g - 2 * p * g) / d * (1 - g) ** m
             - p * g * (p + g - p * g) / d * s ** m)
    probs[0] = (1 - p) * g * g / d
    return Pmf(0, probs, geometric_tail_bound(m_max, 1 - g))


def ber_geo12star_waiting_time_pmf(params: SystemParams, l_max: int = DEFAULT_N_MAX) -> Pmf:
    _require_star(params)
    p, g = params.p, params.gamma
    d = star_denominator(p, g)
    a = p + g - p * g
    s = (1 - p) * (1 - g)
    l = np.arange(0, l_max + 1, dtype=float)
    probs = p * p * (1 - g) ** 2 * a / d * s ** (l - 1)
    probs[0] = g * (p + g - 2 * p * g) / d
    return Pmf(0, probs, geometric_tail_bound(l_max, s))


def conditional_positive(pmf: Pmf) -> Pmf:
    """Renormalise a PMF on {0, 1, ...} to its part on {1, 2, ...}."""
    if pmf.support_start != 0:
        raise InvalidParameters("expected a PMF starting at 0")
    rest = pmf.probs[1:]
    mass = 1.0 - float(pmf.probs[0])
    return Pmf(1, rest / mass, pmf.tail_bound / mass)


# ---------------------------------------------------------------------------
# Model dispatch and violation exponents
# ---------------------------------------------------------------------------

def aoi_pmf(model: ModelSpec, n_max: int = DEFAULT_N_MAX) -> Pmf:
    """Closed-form AoI PMF for any model that has one."""
    params = model.params
    v = model.variant
    if v == BER_GEO_1_1 or (v == BER_GEO_1_C and model.c == 1):
        return ber_geo11_aoi_pmf(params, n_max)
    if v == BER_GEO_1_2 or (v == BER_GEO_1_C and model.c == 2):
        return ber_geo12_aoi_pmf(params, n_max)
    if v == BER_GEO_1_2_STAR:
        return ber_geo12star_aoi_pmf(params, n_max)
    if v == BER_G_1_1:
        svc = model.service
        pol = model.preemption
        if svc.kind == "geometric" and abs(svc.gamma - params.gamma) < 1e-15:
            if pol.kind == "increasing":
                return preemptive_geo_aoi_pmf(params, pol.n_p, n_max)
            if pol.kind == "none":
                return ber_geo11_aoi_pmf(params, n_max)
        return ber_g11_aoi_pmf(params, svc, pol, n_max)
    raise InvalidParameters(f"no closed form for {model.describe()}")


def has_closed_form(model: ModelSpec) -> bool:
    return not (model.variant == BER_GEO_1_C and model.c >= 3)


def system_time_pmf(model: ModelSpec, m_max: int = DEFAULT_N_MAX) -> Optional[Pmf]:
    if model.variant == BER_GEO_1_2 or (model.variant == BER_GEO_1_C and model.c == 2):
        return ber_geo12_system_time_pmf(model.params, m_max)
    if model.variant == BER_GEO_1_2_STAR:
        return ber_geo12star_system_time_pmf(model.params, m_max)
    return None


def waiting_time_pmf(model: ModelSpec, l_max: int = DEFAULT_N_MAX) -> Optional[Pmf]:
    if model.variant == BER_GEO_1_2 or (model.variant == BER_GEO_1_C and model.c == 2):
        return ber_geo12_waiting_time_pmf(model.params, l_max)
    if model.variant == BER_GEO_1_2_STAR:
        return ber_geo12star_waiting_time_pmf(model.params, l_max)
    return None


@dataclass(frozen=True)
class ViolationReport:
    k: int
    p_violation: float
    exponent: float
    lower_bound: Optional[float]
    margin: Optional[float] = None


def _model_key(model) -> tuple:
    if isinstance(model, ModelSpec):
        v = model.variant
        if v == BER_GEO_1_C and model.c in (1, 2):
            v = BER_GEO_1_1 if model.c == 1 else BER_GEO_1_2
        return v, model.params
    return str(model), None


def aoi_tail(model, params: Optional[SystemParams], k):
    key, mp = _model_key(model)
    params = params or mp
    if key == BER_GEO_1_1:
        return ber_geo11_aoi_tail(params, k)
    if key == BER_GEO_1_2:
        return ber_geo12_aoi_tail(params, k)
    if key == BER_GEO_1_2_STAR:
        return ber_geo12star_aoi_tail(params, k)
    raise InvalidParameters(f"no closed-form violation probability for {key}")


def violation_report(model, params: Optional[SystemParams], k: int) -> ViolationReport:
    """Pr{AoI > k}, its exponent -(1/k) log Pr{AoI > k} and the simple lower bound."""
    if k < 1:
        raise InvalidParameters("k must be >= 1")
    key, mp = _model_key(model)
    params = params or mp
    tail = float(aoi_tail(key, params, k))
    exponent = -math.log(tail) / k if tail > 0 else math.inf
    p, g = params.p, params.gamma
    bound = None
    if key == BER_GEO_1_1:
        a = p + g - p * g
        bound = (math.log(1 / (1 - p))
                 - math.log((1 - p) ** 2 * g ** 3 / (a * (g - p) ** 2)) / k)
    elif key == BER_GEO_1_2:
        nn = n_pg(p, g)
        bound = (math.log(1 / (1 - p))
                 - math.log((1 - p) ** 3 * g ** 4 / (nn * (g - p) ** 2)
                            + (p * g) ** 2 / (2 * nn) * k * k) / k)
    margin = exponent_margin(key, params, k) if bound is not None else None
    return ViolationReport(k=int(k), p_violation=tail, exponent=exponent, lower_bound=bound,
                           margin=margin)


def exponent_margin(model, params: Optional[SystemParams], k: int) -> float:
    """exponent - lower_bound, evaluated without cancellation.

    The bound replaces Pr{AoI > k} by a majorant U of the form C (1-p)^k, so
    the margin is -(1/k) log(1 - (U - P)/U).  (U - P)/U is assembled from
    terms in ((1-gamma)/(1-p))^k directly, which stays accurate long after
    the exponent and the bound agree to every stored digit.
    """
    key, mp = _model_key(model)
    params = params or mp
    p, g = params.p, params.gamma
    log_r = k * (math.log1p(-g) - math.log1p(-p))
    r = math.exp(log_r)
    if key == BER_GEO_1_1:
        lead = (1 - p) ** 2 * g ** 3
        rel = ((p * (1 - p) * g * g + p * p * (g - p)) + p * p * g * (g - p) * k) * (1 - g) / lead * r
    elif key == BER_GEO_1_2:
        nn = n_pg(p, g)
        c2 = (1 - p) ** 3 * g ** 4 / (nn * (g - p) ** 2)
        d = (p * g) ** 2 / (2 * nn)
        b = p * (1 - g) / (nn * (g - p)) * ((1 - p) ** 2 * g ** 3 / (g - p) + p * p * (1 - g))
        e = p * p * g / nn * ((1 - p) * (1 - g) * g / (g - p) - (2 - g) / 2)
        gap = d * k * k * -math.expm1(log_r) + b * r + e * k * r
        rel = gap / (c2 + d * k * k)
    else:
        raise InvalidParameters(f"no lower bound for {key}")
    return -math.log1p(-rel) / k
