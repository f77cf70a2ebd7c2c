"""Shared domain types for the discrete-time AoI laboratory.

Everything here is immutable after construction. Probabilities are plain
double-precision floats; the truncated PMF type carries an explicit upper
bound on the mass it does not store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class AoiError(Exception):
    """Base class for every error raised by the library."""


class InvalidParameters(AoiError, ValueError):
    """Parameters violate a documented precondition."""


class Unstable(InvalidParameters):
    """A buffered model was requested with p >= gamma."""


class NearSingular(AoiError):
    """A closed form divides by (gamma - p) and the two are too close."""


class InvalidState(AoiError, ValueError):
    """An age vector breaks the strict-descent rule."""


class IllConditioned(AoiError):
    """A small linear solve is too badly conditioned to trust."""


class NonNormalizable(AoiError):
    """A normalising series did not converge within its budget."""


class NotConverged(AoiError):
    """The stationary solver hit its iteration cap."""

    def __init__(self, message, table=None):
        super().__init__(message)
        self.table = table


class StateSpaceTooLarge(AoiError):
    """The truncated state space exceeds the configured budget."""


class EmptyCondition(AoiError):
    """A conditioning event carries no probability mass."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemParams:
    """Arrival probability ``p`` and geometric service intensity ``gamma``."""

    p: float
    gamma: float

    def __post_init__(self):
        p, g = float(self.p), float(self.gamma)
        if not (0.0 < p < 1.0) or math.isnan(p):
            raise InvalidParameters(f"p must lie in (0, 1), got {self.p!r}")
        if not (0.0 < g < 1.0) or math.isnan(g):
            raise InvalidParameters(f"gamma must lie in (0, 1), got {self.gamma!r}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "gamma", g)

    @property
    def rho_d(self) -> float:
        """Discrete traffic intensity p / gamma."""
        return self.p / self.gamma

    def require_stable(self):
        if self.p >= self.gamma:
            raise Unstable(
                f"unstable: p >= gamma ({self.p} >= {self.gamma}); "
                "buffered models need p < gamma")


# ---------------------------------------------------------------------------
# Service time distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ServiceDistribution:
    """Service time B on {1, 2, ...}.

    ``kind`` is ``"geometric"`` (per-slot completion probability ``gamma``)
    or ``"general"`` (explicit ``q[j-1] = Pr{B=j}`` plus ``tail_mass`` for
    the mass beyond the listed support).
    """

    kind: str
    gamma: Optional[float] = None
    q: tuple = ()
    tail_mass: float = 0.0

    def __post_init__(self):
        if self.kind == "geometric":
            if self.gamma is None or not (0.0 < self.gamma <= 1.0):
                raise InvalidParameters("geometric service needs 0 < gamma <= 1")
        elif self.kind == "general":
            q = tuple(float(x) for x in self.q)
            if not q:
                raise InvalidParameters("general service needs at least one q_j")
            if any(x < 0 or x > 1 for x in q) or self.tail_mass < 0:
                raise InvalidParameters("service probabilities must lie in [0, 1]")
            total = math.fsum(q) + self.tail_mass
            if abs(total - 1.0) > 1e-12:
                raise InvalidParameters(
                    f"service PMF sums to {total!r}, expected 1 within 1e-12")
            object.__setattr__(self, "q", q)
        else:
            raise InvalidParameters(f"unknown service kind {self.kind!r}")

    @classmethod
    def geometric(cls, gamma: float) -> "ServiceDistribution":
        return cls(kind="geometric", gamma=float(gamma))

    @classmethod
    def general(cls, q: Sequence[float], tail_mass: float = 0.0) -> "ServiceDistribution":
        return cls(kind="general", q=tuple(q), tail_mass=float(tail_mass))

    @property
    def q1(self) -> float:
        return self.pmf(1)

    @property
    def max_support(self) -> Optional[int]:
        """Largest j with Pr{B=j} stored, or None for unbounded support."""
        if self.kind == "geometric" or self.tail_mass > 0:
            return None
        nz = [j for j, x in enumerate(self.q, start=1) if x > 0]
        return nz[-1] if nz else 1

    def pmf(self, j: int) -> float:
        if j < 1:
            return 0.0
        if self.kind == "geometric":
            return self.gamma * (1.0 - self.gamma) ** (j - 1)
        return self.q[j - 1] if j <= len(self.q) else 0.0

    def survival_ge(self, m: int) -> float:
        """Pr{B >= m}."""
        if m <= 1:
            return 1.0
        if self.kind == "geometric":
            return (1.0 - self.gamma) ** (m - 1)
        if m - 1 >= len(self.q):
            return self.tail_mass
        return max(0.0, math.fsum(self.q[m - 1:]) + self.tail_mass)

    def hazard(self, m: int) -> float:
        """Pr{B = m | B > m-1}; the per-slot completion probability at age m."""
        if self.kind == "geometric":
            return self.gamma
        s = self.survival_ge(m)
        if s <= 0.0:
            return 1.0
        return min(1.0, self.pmf(m) / s)

    def pmf_array(self, n: int) -> np.ndarray:
        """Pr{B=j} for j = 1..n as an array."""
        j = np.arange(1, n + 1)
        if self.kind == "geometric":
            return self.gamma * (1.0 - self.gamma) ** (j - 1)
        out = np.zeros(n)
        k = min(n, len(self.q))
        out[:k] = self.q[:k]
        return out

    def survival_ge_array(self, n: int) -> np.ndarray:
        """Pr{B >= m} for m = 1..n."""
        m = np.arange(1, n + 1)
        if self.kind == "geometric":
            return (1.0 - self.gamma) ** (m - 1)
        q = np.zeros(max(n, len(self.q)))
        q[:len(self.q)] = self.q
        tail = np.cumsum(q[::-1])[::-1] + self.tail_mass
        return np.clip(tail[:n], 0.0, 1.0)


# ---------------------------------------------------------------------------
# Preemption policies
# ---------------------------------------------------------------------------

def default_n_p(p: float) -> int:
    """Smallest integer N_p >= 0 with p > 1/(N_p + 2)."""
    n = max(0, math.floor(1.0 / p) - 2)
    while not p > 1.0 / (n + 2):
        n += 1
    while n > 0 and p > 1.0 / (n + 1):
        n -= 1
    return n


@dataclass(frozen=True)
class PreemptionPolicy:
    """Probability g(m) that a fresh arrival preempts an in-service packet of age m.

    ``kind`` is ``"none"``, ``"increasing"`` (the family g~(m) parameterised by
    ``n_p``) or ``"custom"`` (any callable ``g``).  g(m) = 1 is allowed and
    simply forces preemption.
    """

    kind: str = "none"
    n_p: Optional[int] = None
    g: Optional[Callable[[int], float]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("none", "increasing", "custom"):
            raise InvalidParameters(f"unknown preemption kind {self.kind!r}")
        if self.kind == "increasing" and (self.n_p is None or self.n_p < 0):
            raise InvalidParameters("increasing preemption needs an integer n_p >= 0")
        if self.kind == "custom" and self.g is None:
            raise InvalidParameters("custom preemption needs a callable g")

    @classmethod
    def none(cls) -> "PreemptionPolicy":
        return cls("none")

    @classmethod
    def increasing(cls, n_p: int) -> "PreemptionPolicy":
        return cls("increasing", n_p=int(n_p))

    @classmethod
    def custom(cls, g: Callable[[int], float]) -> "PreemptionPolicy":
        return cls("custom", g=g)

    def validate_for(self, p: float):
        if self.kind == "increasing" and not p > 1.0 / (self.n_p + 2):
            raise InvalidParameters(
                f"increasing preemption needs p > 1/(N_p+2); p={p}, N_p={self.n_p}")

    def value(self, m: int, p: float) -> float:
        if self.kind == "none":
            return 0.0
        if self.kind == "increasing":
            n = self.n_p
            # (1 - (1-p)(n+m+1)/(n+m)) / p, rearranged to avoid cancellation near p = 1/(n+2)
            return (p * (n + m + 1) - 1.0) / ((n + m) * p)
        v = float(self.g(m))
        if not (0.0 <= v <= 1.0):
            raise InvalidParameters(f"g({m}) = {v} is not a probability")
        return v

    def values(self, count: int, p: float) -> np.ndarray:
        """g(m) for m = 1..count."""
        if self.kind == "none":
            return np.zeros(count)
        if self.kind == "increasing":
            m = np.arange(1, count + 1, dtype=float)
            n = self.n_p
            return (p * (n + m + 1) - 1.0) / ((n + m) * p)
        return np.array([self.value(m, p) for m in range(1, count + 1)])


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

BER_G_1_1 = "ber-g-1-1"
BER_GEO_1_1 = "ber-geo-1-1"
BER_GEO_1_2 = "ber-geo-1-2"
BER_GEO_1_2_STAR = "ber-geo-1-2star"
BER_GEO_1_C = "ber-geo-1-c"

VARIANTS = (BER_G_1_1, BER_GEO_1_1, BER_GEO_1_2, BER_GEO_1_2_STAR, BER_GEO_1_C)


@dataclass(frozen=True)
class ModelSpec:
    """A queue discipline plus its parameters.

    Use the class-method constructors; they enforce the cross-field rules
    (buffered models need p < gamma, preemption only on the size-1 queue).
    """

    variant: str
    params: SystemParams
    service: Optional[ServiceDistribution] = None
    preemption: PreemptionPolicy = field(default_factory=PreemptionPolicy.none)
    c: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidParameters(f"unknown model variant {self.variant!r}")
        if self.variant == BER_G_1_1:
            if self.service is None:
                raise InvalidParameters("ber-g-1-1 needs a service distribution")
            if self.service.q1 <= 0.0:
                raise InvalidParameters("ber-g-1-1 needs q_1 > 0")
            self.preemption.validate_for(self.params.p)
        elif self.preemption.kind != "none":
            raise InvalidParameters("preemption is only defined on the size-1 queue")
        if self.variant == BER_GEO_1_C and self.c < 1:
            raise InvalidParameters("buffer size c must be >= 1")
        if self.size >= 2:
            self.params.require_stable()

    @classmethod
    def ber_g11(cls, params, service, preemption=None) -> "ModelSpec":
        return cls(BER_G_1_1, params, service=service,
                   preemption=preemption or PreemptionPolicy.none())

    @classmethod
    def ber_geo11(cls, params) -> "ModelSpec":
        return cls(BER_GEO_1_1, params)

    @classmethod
    def ber_geo11_preemptive(cls, params, n_p=None) -> "ModelSpec":
        n_p = default_n_p(params.p) if n_p is None else int(n_p)
        return cls.ber_g11(params, ServiceDistribution.geometric(params.gamma),
                           PreemptionPolicy.increasing(n_p))

    @classmethod
    def ber_geo12(cls, params) -> "ModelSpec":
        return cls(BER_GEO_1_2, params, c=2)

    @classmethod
    def ber_geo12star(cls, params) -> "ModelSpec":
        return cls(BER_GEO_1_2_STAR, params, c=2)

    @classmethod
    def ber_geo1c(cls, params, c: int) -> "ModelSpec":
        return cls(BER_GEO_1_C, params, c=int(c))

    @property
    def size(self) -> int:
        if self.variant in (BER_G_1_1, BER_GEO_1_1):
            return 1
        if self.variant in (BER_GEO_1_2, BER_GEO_1_2_STAR):
            return 2
        return self.c

    @property
    def replaces(self) -> bool:
        return self.variant == BER_GEO_1_2_STAR

    @property
    def dimension(self) -> int:
        """Length of the age vector."""
        return self.size + 1

    def service_distribution(self) -> ServiceDistribution:
        if self.service is not None:
            return self.service
        return ServiceDistribution.geometric(self.params.gamma)

    def describe(self) -> str:
        p, g = self.params.p, self.params.gamma
        extra = ""
        if self.variant == BER_GEO_1_C:
            extra = f", c={self.c}"
        if self.preemption.kind == "increasing":
            extra += f", N_p={self.preemption.n_p}"
        return f"{self.variant}(p={p}, gamma={g}{extra})"


# ---------------------------------------------------------------------------
# Age vectors
# ---------------------------------------------------------------------------

def validate_age_state(ages: Sequence[int]) -> tuple:
    """Check the strict-descent rule and return the state as a tuple.

    Leading components strictly decrease, trailing components may be zero
    and once a component is zero every later one is zero too.  The first
    component (the AoI) is at least 1.
    """
    v = tuple(int(x) for x in ages)
    if not v:
        raise InvalidState("empty age vector")
    if v[0] < 1:
        raise InvalidState(f"AoI component must be >= 1 in {v}")
    seen_zero = False
    for a, b in zip(v, v[1:]):
        if b < 0:
            raise InvalidState(f"negative age in {v}")
        if seen_zero or a == 0:
            if b != 0:
                raise InvalidState(f"nonzero age after a zero in {v}")
            seen_zero = True
            continue
        if b == 0:
            seen_zero = True
        elif not a > b:
            raise InvalidState(f"ages must strictly decrease in {v}")
    return v


# ---------------------------------------------------------------------------
# Truncated PMFs
# ---------------------------------------------------------------------------

def geometric_tail_bound(n_max: int, ratio: float) -> float:
    """Conservative bound on the mass beyond ``n_max`` for a PMF decaying like ``ratio**n``.

    Closed forms here carry at most a polynomial factor of degree two, so the
    plain geometric tail is inflated by ``n_max**2``.
    """
    if ratio <= 0.0:
        return 0.0
    tail = ratio ** (n_max + 1) / (1.0 - ratio)
    return float(min(1.0, max(n_max, 1) ** 2 * tail))


@dataclass(frozen=True)
class Pmf:
    """PMF on the integers starting at ``support_start`` (0 or 1).

    ``probs[i]`` is the probability of ``support_start + i``; ``tail_bound``
    bounds the mass that lies beyond the stored range.
    """

    support_start: int
    probs: np.ndarray
    tail_bound: float = 0.0

    def __post_init__(self):
        if self.support_start not in (0, 1):
            raise InvalidParameters("support_start must be 0 or 1")
        arr = np.asarray(self.probs, dtype=float).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)
        if self.tail_bound < 0:
            raise InvalidParameters("tail_bound must be >= 0")
        if arr.size and (arr.min() < -1e-15 or arr.max() > 1 + 1e-12):
            raise InvalidParameters("PMF entries must lie in [0, 1]")
        s = float(arr.sum())
        if s > 1 + 1e-9 or s + self.tail_bound < 1 - 1e-9:
            raise InvalidParameters(
                f"PMF mass {s!r} with tail bound {self.tail_bound!r} is not normalised")

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.support_start, self.support_start + self.probs.size)

    @property
    def last(self) -> int:
        return self.support_start + self.probs.size - 1

    def __len__(self):
        return self.probs.size

    def __getitem__(self, n: int) -> float:
        i = n - self.support_start
        if 0 <= i < self.probs.size:
            return float(self.probs[i])
        return 0.0

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def total(self) -> float:
        return float(self.probs.sum())

    def to_dict(self) -> dict:
        return {
            "support_start": self.support_start,
            "probs": [float(x) for x in self.probs],
            "tail_bound": float(self.tail_bound),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pmf":
        return cls(int(d["support_start"]), np.array(d["probs"], dtype=float),
                   float(d["tail_bound"]))

    @classmethod
    def from_counts(cls, counts, support_start: int) -> "Pmf":
        counts = np.asarray(counts, dtype=float)
        total = counts.sum()
        if total <= 0:
            raise InvalidParameters("no samples")
        return cls(support_start, counts / total, 0.0)


def pmf_mean(pmf: Pmf) -> float:
    """Mean of the stored part of the PMF."""
    return float(np.dot(pmf.support.astype(float), pmf.probs))


def pmf_mean_error(pmf: Pmf) -> float:
    """Bound on the contribution of the unstored tail to the mean.

    The tail is treated as geometric with the ratio implied by the bound,
    so its mean is roughly ``last + 1/(1 - r)``.
    """
    if pmf.tail_bound <= 0.0:
        return 0.0
    n = pmf.last
    r = min(pmf.tail_bound, 1.0 - 1e-12) ** (1.0 / max(n, 1))
    return float(pmf.tail_bound * (n + 1.0 / max(1.0 - r, 1e-12)))


def pmf_mean_with_error(pmf: Pmf) -> tuple:
    """``(mean, error)`` where the true mean lies in ``[mean, mean + error]``."""
    return pmf_mean(pmf), pmf_mean_error(pmf)


def pmf_total_variation(a: Pmf, b: Pmf) -> float:
    """Half the L1 distance, plus half of both tail bounds as slack."""
    if a.support_start != b.support_start:
        raise InvalidParameters("PMFs have different support_start")
    n = max(a.probs.size, b.probs.size)
    x = np.zeros(n)
    y = np.zeros(n)
    x[:a.probs.size] = a.probs
    y[:b.probs.size] = b.probs
    return float(0.5 * np.abs(x - y).sum() + 0.5 * (a.tail_bound + b.tail_bound))


def pmf_total_variation_stored(a: Pmf, b: Pmf) -> float:
    """Half the L1 distance over the stored entries only (no tail slack)."""
    if a.support_start != b.support_start:
        raise InvalidParameters("PMFs have different support_start")
    n = max(a.probs.size, b.probs.size)
    x = np.zeros(n)
    y = np.zeros(n)
    x[:a.probs.size] = a.probs
    y[:b.probs.size] = b.probs
    return float(0.5 * np.abs(x - y).sum())


# ---------------------------------------------------------------------------
# Stationary tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StationaryTable:
    """Stationary probabilities over age vectors.

    ``states`` is an integer array of shape (S, k) in lexicographic order and
    ``probs`` the matching probabilities.  ``residual`` is the solver's
    ``||pi P - pi||_1`` (zero for closed forms), ``truncation`` the bound
    on the first component and ``error_bound`` an estimate of the L1 distance
    to the exact stationary vector of the (truncated) chain.
    """

    states: np.ndarray
    probs: np.ndarray
    residual: float = 0.0
    truncation: int = 0
    converged: bool = True
    iterations: int = 0
    error_bound: float = 0.0

    @property
    def dimension(self) -> int:
        return int(self.states.shape[1])

    def __len__(self):
        return int(self.probs.size)

    def index(self, state: Sequence[int]) -> int:
        v = np.asarray(state, dtype=self.states.dtype)
        hits = np.flatnonzero((self.states == v).all(axis=1))
        return int(hits[0]) if hits.size else -1

    def lookup(self, state: Sequence[int]) -> float:
        i = self.index(state)
        return float(self.probs[i]) if i >= 0 else 0.0

    def as_dict(self) -> dict:
        return {tuple(int(x) for x in s): float(p)
                for s, p in zip(self.states, self.probs)}
