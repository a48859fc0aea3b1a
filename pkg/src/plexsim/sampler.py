"""Deterministic peer sampling.

Every node can compute the participant set of any round locally, with no
coordination messages: rank all node ids by SHA-256 over ``id|round`` and take
the s smallest digests. Because the full node set and all device profiles are
global knowledge, the round's aggregator (the participant with the highest
uplink) is equally computable by everyone.
"""

from __future__ import annotations

import hashlib
from collections.abc import Iterable
from dataclasses import dataclass

from .core import Membership, NodeId, validate_node_id

__all__ = ["RankKey", "Sample", "node_rank_key", "sample", "aggregator", "derive_sample"]


@dataclass(frozen=True, order=True)
class RankKey:
    """Sort key for one (node, round) pair: digest first, id as tie-break."""

    digest: bytes
    node: NodeId


@dataclass(frozen=True)
class Sample:
    k: int
    participants: tuple[NodeId, ...]
    aggregator: NodeId


def node_rank_key(node_id: NodeId, k: int) -> RankKey:
    """SHA-256 of the id, a ``|`` separator, and the round number in decimal
    ASCII. Collisions are broken by node id, so the order is always total."""
    validate_node_id(node_id)  # ids with "|" would make the hash input ambiguous
    if k < 1:
        raise ValueError(f"round number must be >= 1, got {k}")
    digest = hashlib.sha256(node_id.encode() + b"|" + str(k).encode()).digest()
    return RankKey(digest, node_id)


def sample(k: int, s: int, candidates: Iterable[NodeId]) -> tuple[NodeId, ...]:
    """The round-k participant set: the min(s, n) candidates with the smallest
    rank keys, in rank order. Independent of the order candidates arrive in."""
    if s < 1:
        raise ValueError(f"sample size must be >= 1, got {s}")
    ranked = sorted(node_rank_key(nid, k) for nid in candidates)
    if not ranked:
        raise ValueError("no candidates")
    return tuple(rk.node for rk in ranked[: min(s, len(ranked))])


def aggregator(participants: Iterable[NodeId], membership: Membership) -> NodeId:
    """The participant with the highest uplink bandwidth; ties go to the
    lexicographically smallest id."""
    best: NodeId | None = None
    best_up = -1.0
    for nid in participants:
        up = membership.profile(nid).uplink_bps
        if up > best_up or (up == best_up and (best is None or nid < best)):
            best, best_up = nid, up
    if best is None:
        raise ValueError("no candidates")
    return best


def derive_sample(k: int, s: int, membership: Membership) -> Sample:
    participants = sample(k, s, membership.nodes)
    return Sample(k, participants, aggregator(participants, membership))
