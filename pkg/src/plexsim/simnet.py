"""Single-threaded discrete-event network simulator.

Virtual time is a float64 number of seconds. Every state change is an event;
events are processed in strict (time, insertion-sequence) order, so a run is
a deterministic function of its inputs.

Transfers share bandwidth under max-min fairness with progressive filling:
a transfer is constrained by its sender's uplink and its receiver's downlink,
all concurrent transfers at a port get equal shares, and capacity freed by a
bottlenecked transfer is redistributed to the others. Rates are recomputed
only when a transfer starts or finishes, so between recomputations every rate
is constant and completion times are exact.

One-way propagation delay between two nodes is half the RTT between their
cities; it is charged after the last byte leaves the sender. Zero-byte
messages incur latency only. Sends to self bypass the network entirely.
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .core import (
    Effect,
    Membership,
    Message,
    Metric,
    NodeId,
    ScheduleCompute,
    Send,
    SetTimer,
    Terminal,
)

_EPS = 1e-9


class SimulationError(RuntimeError):
    """A broken engine invariant. Never expected in a correct run."""


class Handler(Protocol):
    def on_message(self, now: float, src: NodeId, msg: Message) -> list[Effect]: ...

    def on_timer(self, now: float, timer_id: str) -> list[Effect]: ...


# ---------------------------------------------------------------- events --


@dataclass(frozen=True)
class Deliver:
    dst: NodeId
    src: NodeId
    msg: Message
    nbytes: int


@dataclass(frozen=True)
class ComputeDone:
    node: NodeId
    cont_id: int


@dataclass(frozen=True)
class TimerFire:
    node: NodeId
    timer_id: str


@dataclass(frozen=True)
class TransferRateRecompute:
    """Scheduled at a transfer's estimated completion. Stale copies (the
    transfer was re-rated since) are recognised by ``epoch`` and ignored."""

    tid: int
    epoch: int


@dataclass(frozen=True)
class _Inject:
    """Apply externally supplied effects as if ``src`` emitted them."""

    src: NodeId
    effects: tuple


@dataclass
class TransferRecord:
    tid: int
    src: NodeId
    dst: NodeId
    msg: Message
    total_bytes: float
    start_time: float
    bytes_done: float = 0.0
    rate: float = 0.0
    epoch: int = 0
    est_completion: float = float("inf")


# -------------------------------------------------------------- latency --


@dataclass(frozen=True)
class LatencyMatrix:
    cities: tuple[str, ...]
    rtt_ms: np.ndarray  # square, non-negative, symmetric

    def one_way_s(self, city_a: int, city_b: int) -> float:
        return float(self.rtt_ms[city_a, city_b]) / 2.0 / 1000.0

    @staticmethod
    def zero(n_cities: int = 1) -> "LatencyMatrix":
        names = tuple(f"city{i:03d}" for i in range(n_cities))
        return LatencyMatrix(names, np.zeros((n_cities, n_cities)))


def assign_cities(n_nodes: int, n_cities: int) -> list[int]:
    """Round-robin city assignment by membership index."""
    if n_cities < 1:
        raise ValueError("need at least one city")
    return [i % n_cities for i in range(n_nodes)]


def compute_time(profile, local_steps: int) -> float:
    """Virtual seconds one training invocation occupies the device."""
    return profile.sec_per_local_step * local_steps


# ------------------------------------------------------ max-min fairness --


def maxmin_rates(
    flows: list[tuple[int, NodeId, NodeId]],
    uplink: dict[NodeId, float],
    downlink: dict[NodeId, float],
) -> dict[int, float]:
    """Max-min fair rates for ``flows`` (tid, src, dst) via progressive
    filling: repeatedly find the port with the smallest equal share, freeze
    its flows at that share, remove the spent capacity, and continue.
    """
    members: dict[tuple[str, NodeId], set[int]] = defaultdict(set)
    flow_ports: dict[int, tuple[tuple[str, NodeId], tuple[str, NodeId]]] = {}
    cap: dict[tuple[str, NodeId], float] = {}
    for tid, src, dst in flows:
        up, down = ("u", src), ("d", dst)
        members[up].add(tid)
        members[down].add(tid)
        flow_ports[tid] = (up, down)
        cap[up] = uplink[src]
        cap[down] = downlink[dst]

    rates: dict[int, float] = {}
    unfrozen = {tid for tid, _, _ in flows}
    while unfrozen:
        bottleneck = None
        share = float("inf")
        for port in sorted(members):
            live = len(members[port])
            if live == 0:
                continue
            port_share = cap[port] / live
            if port_share < share - _EPS:
                bottleneck, share = port, port_share
        if bottleneck is None:
            raise SimulationError("no live port while flows remain unfrozen")
        for tid in sorted(members[bottleneck]):
            rates[tid] = share
            unfrozen.discard(tid)
            for port in flow_ports[tid]:
                members[port].discard(tid)
                cap[port] = max(0.0, cap[port] - share)
        members[bottleneck].clear()
    return rates


# ---------------------------------------------------------------- engine --


class Engine:
    """Owns the clock, the event heap, all transfers, and the metric
    counters. Node handlers are registered per id and may only influence the
    world through the effects they return.
    """

    def __init__(
        self,
        membership: Membership,
        latency: LatencyMatrix,
        record_deliveries: bool = False,
    ):
        self.membership = membership
        self.latency = latency
        self.now = 0.0
        self.bytes_total = 0
        self.train_seconds_total = 0.0
        self.counters: dict[str, float] = defaultdict(float)
        self.completed: Optional[str] = None
        self.delivery_log: list[tuple[float, NodeId, NodeId, int]] = []
        self._record_deliveries = record_deliveries
        self._handlers: dict[NodeId, Handler] = {}
        self._heap: list = []
        self._seq = 0
        self._transfers: dict[int, TransferRecord] = {}
        self._next_tid = 0
        self._conts: dict[int, tuple[float, Callable[[], list], bool, NodeId]] = {}
        self._next_cont = 0
        self._last_advance = 0.0
        self._checkpoints: list[float] = []
        self._checkpoint_cb: Optional[Callable[[float], None]] = None
        for nid in membership.nodes:
            if membership.profile(nid).city_index >= len(latency.cities):
                raise ValueError(f"node {nid} assigned to a city outside the matrix")

    # -- registration and external scheduling --

    def register(self, node_id: NodeId, handler: Handler) -> None:
        if node_id not in self.membership:
            raise ValueError(f"cannot register unknown node {node_id!r}")
        self._handlers[node_id] = handler

    def add_checkpoints(self, times: list[float], callback: Callable[[float], None]) -> None:
        """Observation-only probes: ``callback(t)`` runs once virtual time
        reaches each t. Callbacks must not touch the event queue; they exist
        so that evaluation can never perturb the simulation."""
        self._checkpoints = sorted(times)
        self._checkpoint_cb = callback

    def inject(self, at: float, src: NodeId, effects: list[Effect]) -> None:
        """Apply ``effects`` on behalf of ``src`` at virtual time ``at``."""
        self._schedule(at, _Inject(src, tuple(effects)))

    def send_at(self, at: float, src: NodeId, dst: NodeId, msg: Message, nbytes: int) -> None:
        if src == dst:
            raise ValueError("send requires src != dst")
        self.inject(at, src, [Send(dst, msg, nbytes)])

    # -- main loop --

    def run(self, until: Optional[float] = None) -> float:
        """Process events in (time, seq) order until the queue drains or the
        next event lies beyond ``until``. Returns the final virtual time."""
        while self._heap:
            t = self._heap[0][0]
            if until is not None and t > until:
                break
            self._fire_checkpoints(t)
            t, _, ev = heapq.heappop(self._heap)
            self.now = t
            self._dispatch(ev)
        if until is not None:
            # Whether the queue drained or paused, probes through `until`
            # still fire: state is constant past the last event, so they are
            # exact. The clock only advances to `until` when events remain;
            # a drained queue means the run truly ended at the last event.
            self._fire_checkpoints(until)
            if self._heap:
                self.now = until
        else:
            self._fire_checkpoints(self.now)
        return self.now

    def quiescent(self) -> bool:
        return not self._heap

    # -- internals --

    def _schedule(self, at: float, ev) -> None:
        if at < self.now - _EPS:
            raise SimulationError(
                f"event scheduled in the past: {at} < {self.now} ({ev})"
            )
        heapq.heappush(self._heap, (at, self._seq, ev))
        self._seq += 1

    def _fire_checkpoints(self, upto: float) -> None:
        if self._checkpoint_cb is None:
            return
        while self._checkpoints and self._checkpoints[0] <= upto + _EPS:
            self._checkpoint_cb(self._checkpoints.pop(0))

    def _dispatch(self, ev) -> None:
        if isinstance(ev, Deliver):
            if self._record_deliveries:
                self.delivery_log.append((self.now, ev.src, ev.dst, ev.nbytes))
            handler = self._handlers.get(ev.dst)
            if handler is None:
                return
            self._apply(ev.dst, handler.on_message(self.now, ev.src, ev.msg))
        elif isinstance(ev, ComputeDone):
            duration, cont, is_training, node = self._conts.pop(ev.cont_id)
            if is_training:
                self.train_seconds_total += duration
            self._apply(node, cont())
        elif isinstance(ev, TimerFire):
            handler = self._handlers.get(ev.node)
            if handler is None:
                return
            self._apply(ev.node, handler.on_timer(self.now, ev.timer_id))
        elif isinstance(ev, TransferRateRecompute):
            self._on_transfer_event(ev)
        elif isinstance(ev, _Inject):
            self._apply(ev.src, list(ev.effects))
        else:
            raise SimulationError(f"unknown event {ev!r}")

    def _apply(self, src: NodeId, effects: list[Effect]) -> None:
        opened = False
        for eff in effects:
            if isinstance(eff, Send):
                opened |= self._apply_send(src, eff)
            elif isinstance(eff, ScheduleCompute):
                if eff.duration < 0:
                    raise SimulationError("negative compute duration")
                cont_id = self._next_cont
                self._next_cont += 1
                self._conts[cont_id] = (eff.duration, eff.continuation, eff.is_training, src)
                self._schedule(self.now + eff.duration, ComputeDone(src, cont_id))
            elif isinstance(eff, SetTimer):
                if eff.delay < 0:
                    raise SimulationError("negative timer delay")
                self._schedule(self.now + eff.delay, TimerFire(src, eff.timer_id))
            elif isinstance(eff, Metric):
                self.counters[eff.name] += eff.value
            elif isinstance(eff, Terminal):
                if self.completed is None:
                    self.completed = eff.reason
                self.counters["terminal"] += 1
            else:
                raise SimulationError(f"unknown effect {eff!r}")
        if opened:
            self._recompute_rates()

    def _apply_send(self, src: NodeId, eff: Send) -> bool:
        """Returns True if a bandwidth-occupying transfer was opened."""
        if eff.dst not in self.membership:
            raise SimulationError(f"send to unknown node {eff.dst!r}")
        if eff.dst == src:
            # Local hand-off: free and instant, never touches the network.
            self._schedule(self.now, Deliver(eff.dst, src, eff.msg, 0))
            return False
        if eff.nbytes == 0:
            self._schedule(
                self.now + self._one_way(src, eff.dst),
                Deliver(eff.dst, src, eff.msg, 0),
            )
            return False
        self._advance(self.now)
        tid = self._next_tid
        self._next_tid += 1
        self._transfers[tid] = TransferRecord(
            tid, src, eff.dst, eff.msg, float(eff.nbytes), self.now
        )
        return True

    def _one_way(self, a: NodeId, b: NodeId) -> float:
        ca = self.membership.profile(a).city_index
        cb = self.membership.profile(b).city_index
        return self.latency.one_way_s(ca, cb)

    def _advance(self, now: float) -> None:
        dt = now - self._last_advance
        if dt > 0:
            for rec in self._transfers.values():
                rec.bytes_done += rec.rate * dt
        self._last_advance = now

    def _recompute_rates(self) -> None:
        flows = [(rec.tid, rec.src, rec.dst) for rec in self._transfers.values()]
        if not flows:
            return
        up = {nid: self.membership.profile(nid).uplink_bps for nid in self.membership.nodes}
        down = {nid: self.membership.profile(nid).downlink_bps for nid in self.membership.nodes}
        rates = maxmin_rates(flows, up, down)
        for rec in self._transfers.values():
            rec.rate = rates[rec.tid]
            if rec.rate <= 0:
                raise SimulationError(f"transfer {rec.tid} got zero rate")
            rec.epoch += 1
            remaining = max(0.0, rec.total_bytes - rec.bytes_done)
            rec.est_completion = self.now + remaining / rec.rate
            self._schedule(rec.est_completion, TransferRateRecompute(rec.tid, rec.epoch))

    def _on_transfer_event(self, ev: TransferRateRecompute) -> None:
        rec = self._transfers.get(ev.tid)
        if rec is None or rec.epoch != ev.epoch:
            return  # superseded by a later re-rating
        self._advance(self.now)
        drift = abs(rec.total_bytes - rec.bytes_done)
        if drift > 1e-6 * max(1.0, rec.total_bytes):
            raise SimulationError(
                f"transfer {rec.tid} byte conservation off by {drift}"
            )
        rec.bytes_done = rec.total_bytes
        del self._transfers[rec.tid]
        self.bytes_total += int(rec.total_bytes)
        self._schedule(
            self.now + self._one_way(rec.src, rec.dst),
            Deliver(rec.dst, rec.src, rec.msg, int(rec.total_bytes)),
        )
        self._recompute_rates()

    # -- introspection used by tests and the metrics layer --

    @property
    def active_transfers(self) -> list[TransferRecord]:
        return list(self._transfers.values())
