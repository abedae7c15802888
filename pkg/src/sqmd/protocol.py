"""Messenger construction and the server-side selection mathematics.

A messenger is a client's soft-decision matrix over the shared reference
dataset. From messengers alone the server derives two rankings: a quality
score (reference cross-entropy against the ground-truth labels it holds)
and pairwise divergences (sample-averaged KL) that order each client's
candidate neighbors. Everything operates on immutable snapshots, so results
never depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionError, NumericError
from .nn import PROB_EPS, Batch, ModelParams, ModelSpec, backward_local, backward_reference, cross_entropy, forward


@dataclass
class ReferenceSet:
    """The shared reference features plus ground-truth one-hot labels.

    Clients only ever see the features; labels stay with the server role.
    Class counts must be balanced within one sample, otherwise quality
    scores would systematically favor majority-class predictors.
    """

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DimensionError("reference features and labels must be 2-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError("reference features and labels must align row for row")
        if self.features.shape[0] < 1:
            raise ConfigError("reference set must not be empty")
        if not np.all(np.isfinite(self.features)):
            raise NumericError("reference features contain non-finite values")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise ValueError("reference labels must be one-hot with entries in {0, 1}")
        if not np.all(self.labels.sum(axis=1) == 1.0):
            raise ValueError("each reference label row must contain exactly one 1")
        counts = self.labels.sum(axis=0)
        if counts.max() - counts.min() > 1.0:
            raise ConfigError(
                "reference class counts must be balanced within one sample "
                f"(got {counts.astype(int).tolist()})"
            )

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def class_count(self) -> int:
        return self.labels.shape[1]


@dataclass
class Messenger:
    """A client's soft decisions over the reference set plus identity and
    round metadata; the only artifact that ever leaves a device."""

    client_id: int
    round: int
    soft_decisions: np.ndarray

    def __post_init__(self) -> None:
        self.client_id = int(self.client_id)
        self.round = int(self.round)
        if self.round < 0:
            raise ValueError("messenger round must be non-negative")
        self.soft_decisions = np.asarray(self.soft_decisions, dtype=np.float64)
        if self.soft_decisions.ndim != 2:
            raise DimensionError("soft decisions must be a 2-D matrix")
        s = self.soft_decisions
        if s.size and (s.min() < 0.0 or s.max() > 1.0):
            raise ValueError("soft decisions must lie in [0, 1]")
        if s.size and not np.allclose(s.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("each soft-decision row must sum to 1 within 1e-6")


@dataclass
class QualityTable:
    """Per-client quality scores plus the derived low-loss set."""

    scores: dict[int, float]
    quality_set: list[int] = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores: Mapping[int, float], q: int) -> "QualityTable":
        return cls(dict(scores), select_quality_set(scores, q))


@dataclass
class CollaborationGraph:
    """Directed weighted graph over clients; weight (n, m) is the inverse
    divergence from n's messenger to m's (asymmetric by construction)."""

    client_ids: list[int]
    weights: np.ndarray
    neighbor_sets: dict[int, list[int]]


def generate_messenger(
    spec: ModelSpec,
    params: ModelParams,
    reference: ReferenceSet,
    client_id: int,
    round_no: int,
) -> Messenger:
    """Run the model over the shared reference features and wrap the result."""
    return Messenger(client_id, round_no, forward(spec, params, reference.features))


def score_quality(messenger: Messenger, reference: ReferenceSet) -> float:
    """Summed reference cross-entropy of a messenger; lower is better."""
    if messenger.soft_decisions.shape != (reference.size, reference.class_count):
        raise DimensionError(
            f"messenger shape {messenger.soft_decisions.shape} does not match "
            f"reference ({reference.size}, {reference.class_count})"
        )
    return cross_entropy(messenger.soft_decisions, reference.labels)


def select_quality_set(scores: Mapping[int, float], q: int) -> list[int]:
    """The min(q, N) clients with the lowest scores, ascending, ties broken
    by ascending client id. An empty score map yields an empty set."""
    if q < 1:
        raise ConfigError("quality set size must be >= 1")
    ranked = sorted(scores.items(), key=lambda kv: (kv[1], kv[0]))
    return [cid for cid, _ in ranked[: min(q, len(ranked))]]


def _clamped_rows(p: np.ndarray) -> np.ndarray:
    # Clamp-then-renormalize keeps rows on the simplex, so the divergence of
    # a matrix with itself is exactly zero.
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, None)
    return p / p.sum(axis=1, keepdims=True)


def _soft(m: "Messenger | np.ndarray") -> np.ndarray:
    return m.soft_decisions if isinstance(m, Messenger) else np.asarray(m, dtype=np.float64)


def messenger_divergence(a: "Messenger | np.ndarray", b: "Messenger | np.ndarray") -> float:
    """Sample-averaged KL divergence between two messengers.

    d = (1/R) * sum_j KL(a_j || b_j) after clamping both matrices away from
    zero and renormalizing rows. Asymmetric: d(a, b) != d(b, a) in general.
    """
    pa = _soft(a)
    pb = _soft(b)
    if pa.shape != pb.shape:
        raise DimensionError(f"messenger shapes differ: {pa.shape} vs {pb.shape}")
    pa = _clamped_rows(pa)
    pb = _clamped_rows(pb)
    d = float((pa * (np.log(pa) - np.log(pb))).sum() / pa.shape[0])
    return max(d, 0.0)  # KL >= 0; guards float round-off on near-equal rows


def similarity_from_divergence(d: float) -> float:
    """Edge weight c = 1/d; identical messengers get an infinite weight,
    which sorts ahead of every finite similarity."""
    return float("inf") if d == 0.0 else 1.0 / d


def select_neighbors(
    self_messenger: Messenger,
    candidates: Sequence[Messenger],
    k: int,
    distances: Mapping[int, float] | None = None,
) -> list[Messenger]:
    """The min(k, available) candidates nearest to the querying messenger.

    The querying client is excluded by id; order is ascending divergence
    with ascending-id tie-break. Precomputed distances may be passed to
    avoid recomputing them when the caller already built the graph row.
    """
    if k < 1:
        raise ConfigError("neighbor count must be >= 1")
    ranked: list[tuple[float, int, Messenger]] = []
    for cand in candidates:
        if cand.client_id == self_messenger.client_id:
            continue
        if distances is not None and cand.client_id in distances:
            d = distances[cand.client_id]
        else:
            d = messenger_divergence(self_messenger, cand)
        ranked.append((d, cand.client_id, cand))
    ranked.sort(key=lambda t: (t[0], t[1]))
    return [cand for _, _, cand in ranked[:k]]


def ensemble_mean(neighbors: Sequence[Messenger]) -> np.ndarray:
    """Element-wise mean of the neighbors' soft-decision matrices."""
    if not neighbors:
        raise ContractViolation("ensemble_mean needs at least one messenger")
    shapes = {m.soft_decisions.shape for m in neighbors}
    if len(shapes) != 1:
        raise DimensionError(f"messenger shapes are not congruent: {sorted(shapes)}")
    stack = np.stack([m.soft_decisions for m in neighbors])
    return stack.mean(axis=0)


def stationarity_residual(
    clients: Mapping[int, tuple[ModelSpec, ModelParams, Batch]],
    ref_features: np.ndarray,
    distill_weight: float,
    neighbor_ids: Mapping[int, Sequence[int]],
) -> dict[int, float]:
    """Convergence diagnostic: per client, the norm of the combined gradient

        grad(local CE sum) + rho * grad(summed squared disagreement)

    evaluated at the current parameters against the current neighbor
    ensembles. Zero residuals characterize the distillation stationary
    points; clients without neighbors contribute only the local term.
    """
    soft = {
        cid: forward(spec, params, ref_features)
        for cid, (spec, params, _) in clients.items()
    }
    out: dict[int, float] = {}
    for cid in sorted(clients):
        spec, params, batch = clients[cid]
        grads, _ = backward_local(spec, params, batch)
        g_w = [w.copy() for w in grads.weights]
        g_b = [b.copy() for b in grads.biases]
        neigh = [n for n in neighbor_ids.get(cid, ()) if n != cid]
        if neigh and distill_weight > 0.0:
            target = np.mean([soft[n] for n in neigh], axis=0)
            ref_grads, _ = backward_reference(spec, params, ref_features, target)
            for w, b, rw, rb in zip(g_w, g_b, ref_grads.weights, ref_grads.biases):
                w += distill_weight * rw
                b += distill_weight * rb
        sq = sum(float((g * g).sum()) for g in (*g_w, *g_b))
        out[cid] = float(np.sqrt(sq))
    return out
