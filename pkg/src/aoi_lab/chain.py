"""Age-state Markov chains: kernel construction, stationary solve, marginals.

A state is the vector (AoI, in-service age, queued ages...) observed at the
left end of a slot.  The kernel is truncated by clamping the AoI at ``N``;
mass that would age past ``N`` stays at ``N`` until a delivery resets it.
The in-service age is clamped the same way at ``inner_cap`` (the queued
ages at ``inner_cap - 1``, ``inner_cap - 2``, ...), which keeps the state
count manageable for buffered queues.  The default cap is chosen so the
clamped mass is far below double-precision resolution of the marginals.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, TextIO

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .core import (
    BER_G_1_1, BER_GEO_1_1, BER_GEO_1_2, BER_GEO_1_2_STAR, BER_GEO_1_C,
    EmptyCondition, InvalidParameters, ModelSpec, NotConverged, Pmf,
    PreemptionPolicy, ServiceDistribution, StateSpaceTooLarge,
    StationaryTable, geometric_tail_bound,
)

DEFAULT_MAX_STATES = 5_000_000
DEFAULT_INNER_TOL = 1e-15
DIRECT_SOLVE_LIMIT = 50_000


@dataclass(frozen=True)
class TransitionKernel:
    """Row-stochastic kernel over an enumerated, lexicographically sorted state list."""

    model: ModelSpec
    N: int
    inner_cap: int
    states: np.ndarray
    matrix: sp.csr_matrix
    truncation_policy: str

    @property
    def size(self) -> int:
        return int(self.states.shape[0])

    def index(self, state) -> int:
        key = _encode(np.asarray([state], dtype=np.int64), self.N)[0]
        keys = _encode(self.states, self.N)
        i = int(np.searchsorted(keys, key))
        if i < keys.size and keys[i] == key:
            return i
        return -1

    def transitions(self, i: int) -> list:
        """[(successor index, probability), ...] for state ``i``."""
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return list(zip(self.matrix.indices[lo:hi].tolist(),
                        self.matrix.data[lo:hi].tolist()))

    def successors(self, state) -> dict:
        """{successor tuple: probability} for a state given as a tuple."""
        i = self.index(state)
        if i < 0:
            raise InvalidParameters(f"state {tuple(state)} is not in the kernel")
        return {tuple(int(x) for x in self.states[j]): p for j, p in self.transitions(i)}

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def dump(self, out: TextIO):
        """Write one ``state -> successor prob`` line per transition."""
        st = self.states
        for i in range(self.size):
            src = _fmt_state(st[i])
            for j, p in self.transitions(i):
                out.write(f"{src} -> {_fmt_state(st[j])} {p:.17g}\n")


def _fmt_state(v) -> str:
    return "(" + ",".join(str(int(x)) for x in v) + ")"


# ---------------------------------------------------------------------------
# State enumeration
# ---------------------------------------------------------------------------

def _encode(states: np.ndarray, N: int) -> np.ndarray:
    base = np.int64(N + 1)
    key = np.zeros(states.shape[0], dtype=np.int64)
    for col in range(states.shape[1]):
        key = key * base + states[:, col].astype(np.int64)
    return key


def _tails(width: int, cap: int) -> np.ndarray:
    """Strictly decreasing positive prefixes padded with zeros, lexicographic."""
    rows = []
    for k in range(0, width + 1):
        for combo in itertools.combinations(range(cap, 0, -1), k):
            rows.append(combo + (0,) * (width - k))
    tails = np.array(rows, dtype=np.int64).reshape(-1, width)
    order = np.lexsort(tails.T[::-1])
    return tails[order]


def _enumerate(width: int, N: int, cap: int, max_states: int) -> np.ndarray:
    tails = _tails(width, cap)
    head = tails[:, 0]
    counts = np.clip(N - head, 0, None)
    total = int(counts.sum())
    if total > max_states:
        raise StateSpaceTooLarge(
            f"{total} states exceed the budget of {max_states}; lower N or inner_cap")
    blocks = []
    for n in range(1, N + 1):
        sel = tails[head < n]
        block = np.empty((sel.shape[0], width + 1), dtype=np.int64)
        block[:, 0] = n
        block[:, 1:] = sel
        blocks.append(block)
    return np.concatenate(blocks, axis=0)


def auto_inner_cap(model: ModelSpec, N: int, inner_tol: float = DEFAULT_INNER_TOL) -> int:
    """Smallest in-service age cap whose clamped mass is below ``inner_tol``."""
    if model.variant == BER_G_1_1:
        svc = model.service
        support = svc.max_support
        if support is not None:
            return max(1, min(N - 1, support))
        if svc.kind != "geometric":
            return N - 1
        r = 1.0 - svc.gamma
        width = 1
    else:
        r = 1.0 - model.params.gamma
        width = model.size
    if r <= 0:
        return min(N - 1, width + 2)
    m = width + 2
    while m < N - 1 and m ** max(width - 1, 0) * r ** m > inner_tol:
        m += 1
    return min(N - 1, m)


# ---------------------------------------------------------------------------
# Kernel construction
# ---------------------------------------------------------------------------

class _Builder:
    """Collects (source, successor, probability) triples and indexes them."""

    def __init__(self, states: np.ndarray, N: int):
        self.states = states
        self.N = N
        self.keys = _encode(states, N)
        self.rows, self.cols, self.vals = [], [], []

    def add(self, src: np.ndarray, succ: np.ndarray, prob: np.ndarray):
        prob = np.broadcast_to(np.asarray(prob, dtype=float), src.shape)
        keep = prob > 0
        if not keep.any():
            return
        src, succ, prob = src[keep], succ[keep], prob[keep]
        key = _encode(succ, self.N)
        idx = np.searchsorted(self.keys, key)
        idx = np.minimum(idx, self.keys.size - 1)
        if not np.array_equal(self.keys[idx], key):
            bad = succ[self.keys[idx] != key][0]
            raise AssertionError(f"successor {tuple(bad)} outside the state space")
        self.rows.append(src)
        self.cols.append(idx)
        self.vals.append(prob)

    def matrix(self) -> sp.csr_matrix:
        s = self.states.shape[0]
        mat = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(s, s)).tocsr()
        mat.sum_duplicates()
        return mat


def _aged_tail(tail: np.ndarray, cap: int) -> np.ndarray:
    """Increment every nonzero age, clamping position i at cap - i."""
    width = tail.shape[1]
    limits = cap - np.arange(width)
    aged = np.where(tail > 0, np.minimum(tail + 1, limits), 0)
    return aged


def _state(n: np.ndarray, tail: np.ndarray) -> np.ndarray:
    return np.column_stack([n, tail])


def _build_size1(model: ModelSpec, states: np.ndarray, N: int, cap: int) -> sp.csr_matrix:
    """Size-1 queue with general service and probabilistic preemption."""
    p = model.params.p
    svc = model.service_distribution()
    pol = model.preemption
    b = _Builder(states, N)
    idx = np.arange(states.shape[0])
    n = states[:, 0]
    m = states[:, 1]
    q1 = svc.q1
    up = np.minimum(n + 1, N)
    zeros = np.zeros_like(n)
    ones = np.ones_like(n)

    e = m == 0
    b.add(idx[e], _state(up[e], zeros[e]), 1 - p)
    b.add(idx[e], _state(up[e], ones[e]), p * (1 - q1))
    b.add(idx[e], _state(ones[e], zeros[e]), p * q1)

    busy = ~e
    mb = m[busy]
    hz = np.array([svc.hazard(k) for k in range(1, cap + 1)])
    gv = np.clip(pol.values(cap, p), 0.0, 1.0)
    h = hz[mb - 1]
    pre = p * gv[mb - 1]
    src = idx[busy]
    b.add(src, _state(up[busy], np.minimum(mb + 1, cap)), (1 - pre) * (1 - h))
    b.add(src, _state(mb + 1, zeros[busy]), (1 - pre) * h)
    b.add(src, _state(up[busy], ones[busy]), pre * (1 - q1))
    b.add(src, _state(ones[busy], zeros[busy]), pre * q1)
    return b.matrix()


def _build_geo12(model: ModelSpec, states: np.ndarray, N: int, cap: int) -> sp.csr_matrix:
    """Size-2 geometric queue, written out regime by regime."""
    p, g = model.params.p, model.params.gamma
    replace = model.replaces
    b = _Builder(states, N)
    idx = np.arange(states.shape[0])
    n, m, l = states[:, 0], states[:, 1], states[:, 2]
    up = np.minimum(n + 1, N)
    z = np.zeros_like(n)
    one = np.ones_like(n)
    m_up = np.minimum(m + 1, cap)
    l_up = np.minimum(l + 1, cap - 1)

    # empty system
    e = m == 0
    b.add(idx[e], np.column_stack([up[e], z[e], z[e]]), 1 - p)
    b.add(idx[e], np.column_stack([up[e], one[e], z[e]]), p * (1 - g))
    b.add(idx[e], np.column_stack([one[e], z[e], z[e]]), p * g)

    # one packet in service, queue empty
    o = (m > 0) & (l == 0)
    b.add(idx[o], np.column_stack([up[o], m_up[o], z[o]]), (1 - g) * (1 - p))
    b.add(idx[o], np.column_stack([up[o], m_up[o], one[o]]), (1 - g) * p)
    b.add(idx[o], np.column_stack([m[o] + 1, z[o], z[o]]), g * (1 - p))
    b.add(idx[o], np.column_stack([m[o] + 1, one[o], z[o]]), g * p)

    # full system
    f = l > 0
    if replace:
        b.add(idx[f], np.column_stack([up[f], m_up[f], l_up[f]]), (1 - p) * (1 - g))
        b.add(idx[f], np.column_stack([up[f], m_up[f], one[f]]), p * (1 - g))
        b.add(idx[f], np.column_stack([m[f] + 1, l_up[f], z[f]]), (1 - p) * g)
        b.add(idx[f], np.column_stack([m[f] + 1, one[f], z[f]]), p * g)
    else:
        b.add(idx[f], np.column_stack([up[f], m_up[f], l_up[f]]), 1 - g)
        b.add(idx[f], np.column_stack([m[f] + 1, l_up[f], z[f]]), g)
    return b.matrix()


def _build_geo1c(model: ModelSpec, states: np.ndarray, N: int, cap: int,
                 replace: bool = False) -> sp.csr_matrix:
    """Geometric queue of capacity c, generated from the three regimes.

    Empty: an arrival may complete within its own slot.  Partially full: an
    arrival joins at age 1.  Full: an arrival is discarded (or replaces the
    youngest queued packet when ``replace``).  On completion the ages shift
    one place to the left.
    """
    p, g = model.params.p, model.params.gamma
    c = states.shape[1] - 1
    b = _Builder(states, N)
    idx = np.arange(states.shape[0])
    n = states[:, 0]
    tail = states[:, 1:]
    k = (tail > 0).sum(axis=1)
    up = np.minimum(n + 1, N)
    zero_tail = np.zeros_like(tail)

    e = k == 0
    one_tail = zero_tail[e].copy()
    one_tail[:, 0] = 1
    b.add(idx[e], _state(up[e], zero_tail[e]), 1 - p)
    b.add(idx[e], _state(up[e], one_tail), p * (1 - g))
    b.add(idx[e], _state(np.ones(int(e.sum()), dtype=np.int64), zero_tail[e]), p * g)

    busy = ~e
    src = idx[busy]
    t = tail[busy]
    kk = k[busy]
    aged = _aged_tail(t, cap)
    deliver_age = t[:, 0] + 1

    def shifted(arr):
        out = np.zeros_like(arr)
        out[:, :-1] = arr[:, 1:]
        return out

    # no arrival, or an arrival that is dropped
    full = kk == c
    drop = full & (not replace)
    p_none = np.where(drop, 1.0, 1.0 - p)
    b.add(src, _state(up[busy], aged), p_none * (1 - g))
    b.add(src, _state(deliver_age, shifted(aged)), p_none * g)

    # an admitted arrival (joins at position k, or replaces the last slot)
    admit = ~drop
    if admit.any():
        a_src = src[admit]
        a_tail = aged[admit].copy()
        pos = np.minimum(kk[admit], c - 1)
        a_tail[np.arange(a_tail.shape[0]), pos] = 1
        b.add(a_src, _state(up[busy][admit], a_tail), p * (1 - g))
        b.add(a_src, _state(deliver_age[admit], shifted(a_tail)), p * g)
    return b.matrix()


def build_kernel(model: ModelSpec, N: int, inner_cap: Optional[int] = None,
                 max_states: int = DEFAULT_MAX_STATES,
                 inner_tol: float = DEFAULT_INNER_TOL) -> TransitionKernel:
    """Enumerate the truncated state space of ``model`` and its transition kernel."""
    if N < 3:
        raise InvalidParameters("N must be >= 3")
    cap = auto_inner_cap(model, N, inner_tol) if inner_cap is None else int(inner_cap)
    cap = max(1, min(cap, N - 1))
    width = model.size
    if width >= 2 and cap < width:
        raise InvalidParameters(f"inner_cap must be >= {width} for this model")
    states = _enumerate(width, N, cap, max_states)
    if model.variant in (BER_G_1_1, BER_GEO_1_1):
        mat = _build_size1(model, states, N, cap)
    elif model.variant in (BER_GEO_1_2, BER_GEO_1_2_STAR):
        mat = _build_geo12(model, states, N, cap)
    elif model.variant == BER_GEO_1_C:
        mat = _build_geo1c(model, states, N, cap)
    else:  # pragma: no cover - ModelSpec rejects unknown variants
        raise InvalidParameters(model.variant)
    policy = (f"AoI clamped at N={N}; in-service age clamped at {cap} "
              f"(queued ages at {cap}-i); deliveries exact")
    return TransitionKernel(model, N, cap, states, mat, policy)


def kernel_from_matrix(matrix, model: Optional[ModelSpec] = None) -> TransitionKernel:
    """Wrap an arbitrary row-stochastic matrix (states are just 1..S)."""
    mat = sp.csr_matrix(matrix, dtype=float)
    s = mat.shape[0]
    states = np.arange(1, s + 1, dtype=np.int64).reshape(-1, 1)
    return TransitionKernel(model, s, 0, states, mat, "explicit matrix")


# ---------------------------------------------------------------------------
# Stationary solve
# ---------------------------------------------------------------------------

def closed_class_count(matrix: sp.csr_matrix) -> int:
    """Number of closed communicating classes of the chain."""
    ncomp, labels = connected_components(matrix, directed=True, connection="strong")
    coo = matrix.tocoo()
    mask = coo.data > 0
    src = labels[coo.row[mask]]
    dst = labels[coo.col[mask]]
    leaking = np.unique(src[src != dst])
    return int(ncomp - leaking.size)


def solve_stationary(kernel: TransitionKernel, tol: float = 1e-12,
                     max_iters: int = 200_000, strict: bool = False,
                     check_unique: bool = True) -> StationaryTable:
    """Power iteration from the uniform vector, renormalised every sweep.

    Stops when the L1 change of one sweep drops below ``tol``.  When the
    iteration cap is hit the best iterate is returned with
    ``converged=False`` (or :class:`NotConverged` is raised if ``strict``).
    """
    P = kernel.matrix
    PT = P.T.tocsr()
    s = kernel.size
    x = np.full(s, 1.0 / s)
    converged = False
    it = 0
    change = prev = math.inf
    for it in range(1, max_iters + 1):
        y = PT @ x
        y /= y.sum()
        prev, change = change, float(np.abs(y - x).sum())
        x = y
        if change < tol:
            converged = True
            break
    residual = float(np.abs(PT @ x - x).sum())
    unique = closed_class_count(P) == 1 if check_unique else True
    table = StationaryTable(kernel.states, x, residual, kernel.N,
                            converged=converged and unique, iterations=it,
                            error_bound=_power_error(change, prev, s))
    if strict and not table.converged:
        why = "multiple closed classes" if not unique else f"{max_iters} iterations"
        raise NotConverged(f"stationary solve did not converge ({why})", table)
    return table


def _power_error(change: float, prev: float, size: int) -> float:
    """Distance to the fixed point from the observed contraction of the last sweeps.

    With per-sweep contraction ``lam`` the remaining distance is at most
    ``change * lam / (1 - lam)``; a factor 10 covers the roughness of
    estimating ``lam`` from two sweeps, and a rounding floor is added.
    """
    floor = 1e-15 * math.sqrt(size)
    if not math.isfinite(prev) or prev <= 0.0:
        return max(change, floor)
    lam = min(change / prev, 0.999999)
    return 10.0 * change * lam / (1.0 - lam) + change + floor


def solve_stationary_direct(kernel: TransitionKernel) -> StationaryTable:
    """Sparse direct solve; intended for debugging small kernels only."""
    s = kernel.size
    if s > DIRECT_SOLVE_LIMIT:
        raise InvalidParameters(f"direct solve is limited to {DIRECT_SOLVE_LIMIT} states")
    A = (kernel.matrix.T - sp.identity(s, format="csr")).tolil()
    A[0, :] = np.ones(s)
    rhs = np.zeros(s)
    rhs[0] = 1.0
    x = spsolve(A.tocsr(), rhs)
    x = np.clip(x, 0.0, None)
    x /= x.sum()
    residual = float(np.abs(kernel.matrix.T @ x - x).sum())
    return StationaryTable(kernel.states, x, residual, kernel.N)


# ---------------------------------------------------------------------------
# Marginals
# ---------------------------------------------------------------------------

def marginal(table: StationaryTable, component: int,
             condition: Optional[Callable[[np.ndarray], np.ndarray]] = None,
             tail_ratio: Optional[float] = None) -> Pmf:
    """Distribution of one age component, optionally conditioned.

    ``condition`` receives the (S, k) state array and returns a boolean mask;
    the result is renormalised to the selected mass.  The tail bound covers
    the solver's error estimate and, for the AoI with ``tail_ratio`` given,
    the geometric bound on mass clamped at the truncation level.
    """
    if not 0 <= component < table.dimension:
        raise InvalidParameters(f"component {component} out of range")
    vals = table.states[:, component]
    w = table.probs
    if condition is not None:
        mask = np.asarray(condition(table.states), dtype=bool)
        vals = vals[mask]
        w = w[mask]
    total = float(w.sum())
    if total <= 0.0:
        raise EmptyCondition("conditioning event has zero mass")
    start = 1 if component == 0 or (vals.size and vals.min() >= 1) else 0
    top = int(vals.max()) if vals.size else start
    mass = np.bincount(vals, weights=w, minlength=top + 1)[start:top + 1] / total
    tail = table.error_bound / total
    if component == 0 and tail_ratio is not None:
        tail += geometric_tail_bound(table.truncation, tail_ratio)
    mass = np.clip(mass, 0.0, 1.0)
    tail = max(tail, 1.0 - float(mass.sum()))
    return Pmf(start, mass, tail)


def aoi_marginal(table: StationaryTable, model: ModelSpec) -> Pmf:
    """AoI marginal with the standard tail bound for the model's parameters."""
    p, g = model.params.p, model.params.gamma
    return marginal(table, 0, tail_ratio=max(1 - p, 1 - g))


def solve_model(model: ModelSpec, N: int, **kwargs) -> StationaryTable:
    """Build and solve in one call."""
    solve_kwargs = {k: kwargs.pop(k) for k in ("tol", "max_iters", "strict", "check_unique")
                    if k in kwargs}
    return solve_stationary(build_kernel(model, N, **kwargs), **solve_kwargs)
