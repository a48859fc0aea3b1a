"""Baseline training algorithms: centralized FL (FedAvg with a server),
synchronous decentralized SGD over static or one-peer exponential
topologies, and asynchronous gossip learning.

FL and D-PSGD are round-synchronous, so they are expressed as round
functions over closed-form transfer times rather than through the event
loop; gossip learning is event-driven and runs on the simulator engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import networkx as nx
import numpy as np

from .core import (
    Effect,
    GossipModel,
    Membership,
    Message,
    Metric,
    ModelParameters,
    NodeId,
    ScheduleCompute,
    Send,
    SetTimer,
    average_models,
    model_size_bytes,
)
from .protocol import success_threshold
from .simnet import LatencyMatrix

# ------------------------------------------------------------ topologies --


@dataclass(frozen=True)
class RegularTopology:
    """A connected random d-regular graph; the same neighbors every round."""

    adjacency: tuple[tuple[int, ...], ...]

    @property
    def degree(self) -> int:
        return len(self.adjacency[0])

    def out_neighbors(self, i: int, k: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def in_neighbors(self, i: int, k: int) -> tuple[int, ...]:
        return self.adjacency[i]


@dataclass(frozen=True)
class OnePeerExponential:
    """Each node talks to exactly one peer per round, at distance
    2^((k-1) mod ceil(log2 n)) around a ring."""

    n: int

    def out_neighbors(self, i: int, k: int) -> tuple[int, ...]:
        return (one_peer_exp_neighbor(i, k, self.n),)

    def in_neighbors(self, i: int, k: int) -> tuple[int, ...]:
        offset = _one_peer_offset(k, self.n)
        return ((i - offset) % self.n,)


def make_regular_topology(n: int, degree: int, seed: int) -> RegularTopology:
    """Seeded random regular graph, re-drawn with an incremented seed until
    connected."""
    if degree < 1 or degree >= n:
        raise ValueError(f"degree must be in [1, n), got {degree} for n={n}")
    if (n * degree) % 2 != 0:
        raise ValueError(f"n*degree must be even, got n={n} degree={degree}")
    for attempt in range(100):
        g = nx.random_regular_graph(degree, n, seed=seed + attempt)
        if nx.is_connected(g):
            adjacency = tuple(tuple(sorted(g.neighbors(i))) for i in range(n))
            return RegularTopology(adjacency)
    raise ValueError(f"no connected {degree}-regular graph found from seed {seed}")


def _one_peer_offset(k: int, n: int) -> int:
    if n < 2:
        raise ValueError("one-peer topology needs n >= 2")
    if k < 1:
        raise ValueError("round number must be >= 1")
    cycle = max(1, math.ceil(math.log2(n)))
    return 1 << ((k - 1) % cycle)


def one_peer_exp_neighbor(i: int, k: int, n: int) -> int:
    """Round-k partner of node i: (i + 2^((k-1) mod ceil(log2 n))) mod n.
    Adding a constant offset modulo n, so every round is a permutation."""
    return (i + _one_peer_offset(k, n)) % n


# ----------------------------------------------------------- fl baseline --


@dataclass(frozen=True)
class FlRoundResult:
    model: ModelParameters
    duration_s: float
    bytes: int
    train_seconds: float
    participants: tuple[NodeId, ...]
    aggregated: int
    late: int


def fl_round(
    model: ModelParameters,
    membership: Membership,
    k: int,
    s: int,
    sf: float,
    *,
    select_fn: Callable[[int, int], tuple[NodeId, ...]],
    train_fn: Callable[[NodeId, int, ModelParameters], ModelParameters],
    compute_seconds: Callable[[NodeId], float],
) -> FlRoundResult:
    """One synchronous FedAvg round against an unconstrained server.

    The server pushes the model to s sampled clients (download limited by
    each client's downlink only), every client trains, and the round fires
    at the floor(s*sf)-th completed upload (upload limited by the client's
    uplink only). Slow clients still consume bandwidth and compute; their
    models are simply not aggregated.
    """
    participants = tuple(select_fn(k, s))
    if not participants:
        raise ValueError("no candidates")
    threshold = success_threshold(len(participants), sf)
    nbytes = model_size_bytes(model)
    arrivals = []
    train_seconds = 0.0
    for nid in participants:
        p = membership.profile(nid)
        c = compute_seconds(nid)
        arrivals.append((nbytes / p.downlink_bps + c + nbytes / p.uplink_bps, nid))
        train_seconds += c
    arrivals.sort()
    duration = arrivals[threshold - 1][0]
    chosen = sorted(nid for _, nid in arrivals[:threshold])
    new_model = average_models([train_fn(nid, k, model) for nid in chosen])
    return FlRoundResult(
        model=new_model,
        duration_s=duration,
        bytes=2 * len(participants) * nbytes,
        train_seconds=train_seconds,
        participants=participants,
        aggregated=threshold,
        late=len(participants) - threshold,
    )


def uniform_selector(membership: Membership, rng: np.random.Generator):
    """Server-side sampling: uniform without replacement, independent of the
    deterministic hash sampler."""

    def select(k: int, s: int) -> tuple[NodeId, ...]:
        n = len(membership)
        idx = rng.choice(n, size=min(s, n), replace=False)
        return tuple(membership.nodes[int(i)] for i in idx)

    return select


# -------------------------------------------------------- dpsgd baseline --


@dataclass(frozen=True)
class DpsgdRoundResult:
    models: list[ModelParameters]
    duration_s: float
    bytes: int
    train_seconds: float


def dpsgd_round(
    models: list[ModelParameters],
    membership: Membership,
    topology,
    k: int,
    latency: LatencyMatrix,
    *,
    train_fn: Callable[[int, int, ModelParameters], ModelParameters],
    compute_seconds: list[float],
) -> DpsgdRoundResult:
    """One synchronous D-PSGD round: everyone trains, everyone exchanges
    models with its round-k neighbors, everyone averages what it holds with
    what it received. No node starts round k+1 before the slowest node is
    done, so the round's duration is the max over nodes of compute plus
    transfer completion.

    Port contention is modeled per endpoint: a sender's uploads share its
    uplink, a receiver's downloads cannot beat its downlink, and a transfer
    cannot arrive before its sender finished training plus one-way latency.
    """
    n = len(models)
    nbytes = model_size_bytes(models[0])
    trained = [train_fn(i, k, models[i]) for i in range(n)]
    profiles = [membership.profile(nid) for nid in membership.nodes]

    out_done = []
    send_done = {}  # (src, dst) -> when the last byte left src
    for i in range(n):
        outs = topology.out_neighbors(i, k)
        batch = len(outs) * nbytes / profiles[i].uplink_bps
        out_done.append(compute_seconds[i] + batch)
        for j in outs:
            send_done[(i, j)] = compute_seconds[i] + batch
    in_done = []
    for i in range(n):
        ins = topology.in_neighbors(i, k)
        arrivals = []
        first_possible = []
        for j in ins:
            lat = latency.one_way_s(profiles[j].city_index, profiles[i].city_index)
            arrivals.append(send_done[(j, i)] + lat)
            first_possible.append(compute_seconds[j] + lat)
        downlink_bound = min(first_possible) + len(ins) * nbytes / profiles[i].downlink_bps
        in_done.append(max(max(arrivals), downlink_bound))

    duration = 0.0
    for i in range(n):
        duration = max(duration, out_done[i], in_done[i])

    mixed = []
    for i in range(n):
        gathered = [trained[i].values] + [
            trained[j].values for j in topology.in_neighbors(i, k)
        ]
        mean = np.mean(np.stack(gathered), axis=0)
        mixed.append(ModelParameters(mean, age=trained[i].age))
    total_out = sum(len(topology.out_neighbors(i, k)) for i in range(n))
    return DpsgdRoundResult(
        models=mixed,
        duration_s=duration,
        bytes=total_out * nbytes,
        train_seconds=float(sum(compute_seconds)),
    )


# ----------------------------------------------------------- gossip node --


def gl_merge(left: ModelParameters, right: ModelParameters) -> ModelParameters:
    """Age-weighted average: (age_l*theta_l + age_r*theta_r)/(age_l+age_r),
    plain mean when both ages are zero. The merged age is the max."""
    if left.dim != right.dim:
        raise ValueError("heterogeneous model dimensions")
    total = left.age + right.age
    if total == 0:
        values = (left.values + right.values) / 2.0
    else:
        values = (left.age * left.values + right.age * right.values) / total
    return ModelParameters(values, age=max(left.age, right.age))


class GossipNode:
    """Gossip learning participant.

    Every ``timeout_s`` the node pushes its current model to one uniformly
    random other node. On receipt it merges (age-weighted), then trains for
    one invocation; while training it drops incoming models, so merges and
    training commits never interleave."""

    def __init__(
        self,
        me: NodeId,
        membership: Membership,
        *,
        model: ModelParameters,
        timeout_s: float,
        train_fn: Callable[[ModelParameters], ModelParameters],
        compute_seconds: float,
        peer_rng: np.random.Generator,
    ):
        self.me = me
        self.membership = membership
        self.model = model
        self.timeout_s = timeout_s
        self.train_fn = train_fn
        self.compute_seconds = compute_seconds
        self.peer_rng = peer_rng
        self.busy = False
        self.merges = 0
        self.busy_drops = 0
        self._my_index = membership.index_of(me)

    def initial_effects(self, stagger_s: float) -> list[Effect]:
        return [SetTimer(stagger_s, "gossip")]

    def _pick_peer(self) -> NodeId:
        n = len(self.membership)
        r = int(self.peer_rng.integers(0, n - 1))
        if r >= self._my_index:
            r += 1
        return self.membership.nodes[r]

    def on_timer(self, now: float, timer_id: str) -> list[Effect]:
        peer = self._pick_peer()
        msg = GossipModel(self.model, self.me)
        return [
            Send(peer, msg, model_size_bytes(self.model)),
            SetTimer(self.timeout_s, "gossip"),
        ]

    def on_message(self, now: float, src: NodeId, msg: Message) -> list[Effect]:
        if not isinstance(msg, GossipModel):
            raise ValueError(f"gossip node got {type(msg).__name__}")
        if self.busy:
            self.busy_drops += 1
            return [Metric("gl_busy_drop")]
        merged = gl_merge(self.model, msg.model)
        self.model = merged
        self.merges += 1
        self.busy = True

        def finish(merged: ModelParameters = merged) -> list[Effect]:
            self.model = self.train_fn(merged)
            self.busy = False
            return []

        return [ScheduleCompute(self.compute_seconds, finish)]
