"""Slot-by-slot Monte-Carlo simulation of the status-update system.

Each slot is processed in a fixed order: the state is observed at the slot's
left end, then a packet may be generated, admitted (queued, dropped,
replacing the queued one, or preempting the one in service), and the packet
in service may complete and be delivered.  Packets are tracked by their
generation slot, so every age is ``now - birth`` and no per-slot increments
are needed.  A packet delivered in slot ``k`` with birth slot ``s`` leaves
the AoI at ``k + 1 - s`` when observed in the next slot.

The random stream comes from numpy's PCG64 seeded with ``seed``; one uniform
drives the arrival and one drives the admission/service draws of each slot,
drawn in fixed-size chunks so a seed always yields the same path.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    BER_G_1_1, BER_GEO_1_2_STAR, InvalidParameters, ModelSpec, Pmf,
    ServiceDistribution,
)

PHYSICAL = "physical"
KERNEL_SAMPLING = "kernel"
DEFAULT_WARMUP = 10_000
_CHUNK = 1 << 16


@dataclass(frozen=True)
class SimConfig:
    model: ModelSpec
    slots: int
    warmup_slots: int = DEFAULT_WARMUP
    seed: int = 0
    mode: str = PHYSICAL
    kernel_N: int = 300
    record_path: int = 0

    def __post_init__(self):
        if self.mode not in (PHYSICAL, KERNEL_SAMPLING):
            raise InvalidParameters(f"unknown simulation mode {self.mode!r}")
        if not (self.slots > self.warmup_slots >= 0):
            raise InvalidParameters("need slots > warmup_slots >= 0")
        if not (0 <= self.seed < 2 ** 64):
            raise InvalidParameters("seed must be a 64-bit unsigned integer")


@dataclass
class SimStats:
    """Histograms collected after warmup plus whole-run packet counters.

    ``aoi_counts[i]`` counts slots with AoI ``i + 1``; ``system_counts[m]``
    and ``waiting_counts[l]`` count slots whose in-service and queued ages
    were ``m`` and ``l`` (0 when the position is empty).  In kernel-sampling
    mode only ``delivered_packets`` is known and the other counters are None.
    """

    slots: int
    aoi_counts: np.ndarray
    system_counts: np.ndarray
    waiting_counts: np.ndarray
    aoi_sum: int
    generated_packets: Optional[int] = 0
    delivered_packets: int = 0
    discarded_packets: Optional[int] = 0
    replaced_packets: Optional[int] = 0
    in_flight: Optional[int] = 0
    path: list = field(default_factory=list)

    @property
    def aoi_pmf(self) -> Pmf:
        return Pmf.from_counts(self.aoi_counts, 1)

    @property
    def system_time_pmf(self) -> Pmf:
        return Pmf.from_counts(self.system_counts, 0)

    @property
    def waiting_time_pmf(self) -> Pmf:
        return Pmf.from_counts(self.waiting_counts, 0)

    @property
    def mean_aoi(self) -> float:
        return self.aoi_sum / self.slots

    def counters_consistent(self) -> bool:
        if self.generated_packets is None:
            return True
        return self.generated_packets == (self.delivered_packets + self.discarded_packets
                                          + self.replaced_packets + self.in_flight)


def _pad_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(max(a.size, b.size), dtype=np.int64)
    out[:a.size] += a
    out[:b.size] += b
    return out


def merge(stats: list) -> SimStats:
    """Pool independent replications by adding their counts."""
    if not stats:
        raise InvalidParameters("nothing to merge")

    def total(name):
        vals = [getattr(s, name) for s in stats]
        return None if any(v is None for v in vals) else sum(vals)

    aoi, sys_c, wait = stats[0].aoi_counts, stats[0].system_counts, stats[0].waiting_counts
    for s in stats[1:]:
        aoi = _pad_add(aoi, s.aoi_counts)
        sys_c = _pad_add(sys_c, s.system_counts)
        wait = _pad_add(wait, s.waiting_counts)
    return SimStats(sum(s.slots for s in stats), aoi, sys_c, wait, sum(s.aoi_sum for s in stats),
                    total("generated_packets"), sum(s.delivered_packets for s in stats),
                    total("discarded_packets"), total("replaced_packets"), total("in_flight"))


class PhysicalSystem:
    """The packet-level system: arrival probability, service law, buffer rules.

    Built from a :class:`ModelSpec` by :meth:`from_model`; the constructor
    itself accepts the boundary values p = 1 and gamma = 1 that model
    parameters exclude, which is handy for degenerate checks.
    """

    def __init__(self, p: float, service: ServiceDistribution, capacity: int = 1,
                 replace: bool = False, preempt=None, hazard_len: int = 4096):
        if not (0.0 < p <= 1.0):
            raise InvalidParameters("p must lie in (0, 1]")
        self.p = float(p)
        self.capacity = int(capacity)
        self.replace = bool(replace)
        self.geometric = service.kind == "geometric"
        self.gamma = service.gamma if self.geometric else None
        self.hazard = [0.0] + [service.hazard(m) for m in range(1, hazard_len + 1)]
        self.preempt = preempt

    @classmethod
    def from_model(cls, model: ModelSpec) -> "PhysicalSystem":
        preempt = None
        if model.variant == BER_G_1_1 and model.preemption.kind != "none":
            preempt = [0.0] + list(np.clip(model.preemption.values(4096, model.params.p), 0, 1))
        return cls(model.params.p, model.service_distribution(), model.size,
                   model.variant == BER_GEO_1_2_STAR, preempt)

    def run(self, slots: int, warmup: int, seed: int, record_path: int = 0) -> SimStats:
        rng = np.random.Generator(np.random.PCG64(seed))
        p = self.p
        cap = self.capacity
        replace = self.replace
        geometric = self.geometric
        gamma = self.gamma
        hazard = self.hazard
        hmax = len(hazard) - 1
        preempt = self.preempt
        pmax = len(preempt) - 1 if preempt else 0

        aoi_hist = {}
        sys_hist = {}
        wait_hist = {}
        aoi_sum = 0
        path = []

        last_birth = -1          # AoI starts at 1 with an empty system
        serving = None           # birth slot of the packet in service
        queue = []               # birth slots of waiting packets, oldest first
        generated = delivered = discarded = replaced = 0

        k = 0
        while k < slots:
            n = min(_CHUNK, slots - k)
            u_arr = rng.random(n).tolist()
            u_svc = rng.random(n).tolist()
            for i in range(n):
                # observe at the left end of slot k
                if k >= warmup:
                    a = k - last_birth
                    aoi_sum += a
                    aoi_hist[a] = aoi_hist.get(a, 0) + 1
                    m = 0 if serving is None else k - serving
                    sys_hist[m] = sys_hist.get(m, 0) + 1
                    w = k - queue[0] if queue else 0
                    wait_hist[w] = wait_hist.get(w, 0) + 1
                    if len(path) < record_path:
                        path.append(a)
                u = u_svc[i]
                if u_arr[i] < p:
                    generated += 1
                    if serving is None:
                        serving = k
                    elif preempt is not None:
                        # one uniform split into preemption and service draws
                        g = preempt[min(k - serving, pmax)]
                        if u < g:
                            replaced += 1
                            serving = k
                            u = u / g
                        else:
                            discarded += 1
                            u = (u - g) / (1.0 - g)
                    elif len(queue) + 1 < cap:
                        queue.append(k)
                    elif replace and queue:
                        queue[-1] = k
                        replaced += 1
                    else:
                        discarded += 1
                if serving is not None:
                    if geometric:
                        done = u < gamma
                    else:
                        age = k - serving
                        done = u < hazard[min(age if age > 0 else 1, hmax)]
                    if done:
                        last_birth = serving
                        delivered += 1
                        serving = queue.pop(0) if queue else None
                k += 1

        in_flight = (serving is not None) + len(queue)
        return SimStats(slots - warmup, _hist(aoi_hist, 1), _hist(sys_hist, 0),
                        _hist(wait_hist, 0), aoi_sum, generated, delivered, discarded,
                        replaced, in_flight, path)


def _hist(d: dict, start: int) -> np.ndarray:
    top = max(d) if d else start
    out = np.zeros(top - start + 1, dtype=np.int64)
    for key, cnt in d.items():
        out[key - start] = cnt
    return out


def _run_kernel(config: SimConfig) -> SimStats:
    from .chain import build_kernel

    kernel = build_kernel(config.model, config.kernel_N)
    mat = kernel.matrix
    indptr = mat.indptr.tolist()
    indices = mat.indices.tolist()
    cum = np.empty_like(mat.data)
    for start, stop in zip(mat.indptr[:-1], mat.indptr[1:]):
        np.cumsum(mat.data[start:stop], out=cum[start:stop])
        cum[stop - 1] = 2.0   # guard against rounding below 1
    cum = cum.tolist()
    states = kernel.states
    v1 = states[:, 0].tolist()
    v2 = states[:, 1].tolist() if states.shape[1] > 1 else [0] * len(v1)
    v3 = states[:, 2].tolist() if states.shape[1] > 2 else [0] * len(v1)

    rng = np.random.Generator(np.random.PCG64(config.seed))
    idx = 0  # the lexicographically first state: AoI 1, empty system
    aoi_hist, sys_hist, wait_hist = {}, {}, {}
    aoi_sum = 0
    delivered = 0
    path = []
    N = kernel.N
    slots, warmup = config.slots, config.warmup_slots
    k = 0
    while k < slots:
        n = min(_CHUNK, slots - k)
        us = rng.random(n).tolist()
        for i in range(n):
            a = v1[idx]
            if k >= warmup:
                aoi_sum += a
                aoi_hist[a] = aoi_hist.get(a, 0) + 1
                sys_hist[v2[idx]] = sys_hist.get(v2[idx], 0) + 1
                wait_hist[v3[idx]] = wait_hist.get(v3[idx], 0) + 1
                if len(path) < config.record_path:
                    path.append(a)
            j = bisect.bisect_right(cum, us[i], indptr[idx], indptr[idx + 1] - 1)
            nxt = indices[j]
            b = v1[nxt]
            if b <= a and not (a == N and b == N):
                delivered += 1
            idx = nxt
            k += 1
    return SimStats(slots - warmup, _hist(aoi_hist, 1), _hist(sys_hist, 0),
                    _hist(wait_hist, 0), aoi_sum, None, delivered, None, None, None, path)


def run(config: SimConfig) -> SimStats:
    """Simulate ``config.slots`` slots and return the post-warmup statistics."""
    if config.mode == KERNEL_SAMPLING:
        return _run_kernel(config)
    system = PhysicalSystem.from_model(config.model)
    return system.run(config.slots, config.warmup_slots, config.seed, config.record_path)


def mean_aoi_stream(config: SimConfig) -> float:
    """Time-average AoI over the post-warmup slots."""
    return run(config).mean_aoi
