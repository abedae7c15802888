"""Stateful coordination server.

Keeps the newest messenger per client, regrades quality on every arrival,
and per round rebuilds the quality set, the collaboration graph, and each
client's neighbor list. Ablation switches live in ServerConfig: disabling
the quality filter or replacing nearest-neighbor selection with seeded
random sampling are pure configuration changes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ProtocolError
from .protocol import (
    CollaborationGraph,
    Messenger,
    ReferenceSet,
    messenger_divergence,
    score_quality,
    select_quality_set,
    similarity_from_divergence,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServerConfig:
    """Selection knobs for one run. `quality_filter=False` reproduces the
    no-quality-filter ablation; `selection="random"` the no-similarity one."""

    quality_set_size: int
    neighbor_count: int
    quality_filter: bool = True
    selection: str = "nearest"

    def __post_init__(self) -> None:
        if self.quality_set_size < 1:
            raise ConfigError("quality_set_size must be >= 1")
        if self.neighbor_count < 1:
            raise ConfigError("neighbor_count must be >= 1")
        if self.selection not in ("nearest", "random"):
            raise ConfigError(f"unknown selection mode {self.selection!r}")
        if self.quality_filter and self.neighbor_count > self.quality_set_size:
            raise ConfigError(
                "neighbor_count must be <= quality_set_size when the quality filter is enabled"
            )


class Server:
    """Round-based coordinator over registered clients.

    Holds at most one messenger per client (newest round wins) and serves
    `server_round`, which recomputes the quality set and hands every client
    its neighbor messengers. Registered but silent clients receive empty
    neighbor lists and are invisible to everyone else's selection.
    """

    def __init__(
        self,
        reference: ReferenceSet,
        config: ServerConfig,
        selection_rng: np.random.Generator | None = None,
    ) -> None:
        self.reference = reference
        self.config = config
        # Dedicated stream for the random-selection ablation, so flipping the
        # switch leaves all other randomness untouched.
        self.selection_rng = selection_rng if selection_rng is not None else np.random.default_rng(0)
        self.registered: set[int] = set()
        self.latest: dict[int, Messenger] = {}
        self.round_received: dict[int, int] = {}
        self.scores: dict[int, float] = {}
        self.quality_set: list[int] = []
        self.neighbor_ids: dict[int, list[int]] = {}
        self.graph: CollaborationGraph | None = None

    def register_client(self, client_id: int) -> None:
        client_id = int(client_id)
        if client_id in self.registered:
            raise ProtocolError(f"client {client_id} is already registered")
        self.registered.add(client_id)

    def receive_messenger(self, messenger: Messenger) -> None:
        cid = messenger.client_id
        if cid not in self.registered:
            raise ProtocolError(f"client {cid} is not registered")
        if messenger.soft_decisions.shape != (self.reference.size, self.reference.class_count):
            raise ProtocolError(
                f"messenger shape {messenger.soft_decisions.shape} does not match the "
                f"reference set ({self.reference.size}, {self.reference.class_count})"
            )
        stored = self.round_received.get(cid)
        if stored is not None and messenger.round < stored:
            log.warning(
                "ignoring stale messenger from client %d (round %d < stored %d)",
                cid, messenger.round, stored,
            )
            return
        self.latest[cid] = messenger
        self.round_received[cid] = messenger.round
        self.scores[cid] = score_quality(messenger, self.reference)

    def server_round(
        self,
        config: ServerConfig | None = None,
        rng: np.random.Generator | None = None,
    ) -> dict[int, list[Messenger]]:
        """Recompute the quality set and every client's neighbor messengers.

        Clients are processed in ascending id order, so results (including
        consumption of the random-selection stream) are schedule-independent.
        """
        cfg = self.config if config is None else config
        rng = self.selection_rng if rng is None else rng
        communicated = sorted(self.latest)

        if communicated:
            q = cfg.quality_set_size if cfg.quality_filter else len(communicated)
            quality = select_quality_set(self.scores, q)
        else:
            quality = []

        ids = sorted(self.registered)
        index = {cid: i for i, cid in enumerate(ids)}
        weights = np.zeros((len(ids), len(ids)), dtype=np.float64)
        neighbor_ids: dict[int, list[int]] = {}
        result: dict[int, list[Messenger]] = {}

        for cid in ids:
            if cid not in self.latest:
                neighbor_ids[cid] = []
                result[cid] = []
                continue
            candidates = [m for m in quality if m != cid]
            dists: dict[int, float] = {}
            for m in candidates:
                d = messenger_divergence(self.latest[cid], self.latest[m])
                dists[m] = d
                weights[index[cid], index[m]] = similarity_from_divergence(d)
            take = min(cfg.neighbor_count, len(candidates))
            if cfg.selection == "random":
                chosen = (
                    [candidates[i] for i in rng.choice(len(candidates), size=take, replace=False)]
                    if candidates
                    else []
                )
            else:
                chosen = sorted(candidates, key=lambda m: (dists[m], m))[:take]
            neighbor_ids[cid] = chosen
            result[cid] = [self.latest[m] for m in chosen]

        self.quality_set = quality
        self.neighbor_ids = neighbor_ids
        self.graph = CollaborationGraph(ids, weights, neighbor_ids)
        return result

    def snapshot(self) -> dict:
        """JSON-ready view of the full server state for debugging and tests."""
        ids = sorted(self.registered)
        return {
            "client_ids": [int(c) for c in ids],
            "round_received": {str(c): int(r) for c, r in sorted(self.round_received.items())},
            "scores": {str(c): float(s) for c, s in sorted(self.scores.items())},
            "quality_set": [int(c) for c in self.quality_set],
            "neighbors": {str(c): [int(n) for n in ns] for c, ns in sorted(self.neighbor_ids.items())},
            "weights": self.graph.weights.tolist() if self.graph is not None else [],
        }
