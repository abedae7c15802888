"""Per-client training runtime.

A client owns its model, its fixed 8:1:1 data splits, its own random
stream, and the neighbor-ensemble target it last received. Training steps
blend the local cross-entropy gradient with the pull toward that target;
until a first server response arrives the client trains purely locally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionError, NumericError
from .nn import Batch, ModelParams, ModelSpec, distill_update, forward
from .protocol import ReferenceSet, ensemble_mean, generate_messenger

_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TrainHyper:
    """Training hyperparameters shared by every client in a run."""

    distill_weight: float        # weight on the reference-disagreement term
    learning_rate: float
    comm_interval: int           # local iterations between messenger exchanges
    batch_size: int
    total_iterations: int
    full_batch: bool = False     # oracle mode: use the whole local set per step

    def __post_init__(self) -> None:
        if not 0.0 <= self.distill_weight <= 1.0:
            raise ConfigError("distill_weight must lie in [0, 1]")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.comm_interval < 1:
            raise ConfigError("comm_interval must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be >= 1")


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float


@dataclass
class ClientState:
    client_id: int
    spec: ModelSpec
    params: ModelParams
    train: Batch
    val: Batch
    test: Batch
    rng: np.random.Generator
    last_neighbor_mean: np.ndarray | None = None
    iteration: int = 0
    # Epoch sampling state: a without-replacement order, reshuffled when spent.
    _order: np.ndarray | None = field(default=None, repr=False)
    _cursor: int = 0


def _next_batch(state: ClientState, hyper: TrainHyper) -> Batch:
    if hyper.full_batch:
        return state.train
    n = state.train.size
    if state._order is None or state._cursor >= n:
        state._order = state.rng.permutation(n)
        state._cursor = 0
    idx = state._order[state._cursor : state._cursor + hyper.batch_size]
    state._cursor += len(idx)
    return state.train.take(idx)


def train_step(state: ClientState, hyper: TrainHyper, ref_features: np.ndarray) -> ClientState:
    """One local iteration: draw a mini-batch from the client's stream and
    apply the combined update. Without a stored neighbor ensemble the
    reference term is skipped entirely (pure local descent)."""
    batch = _next_batch(state, hyper)
    weight = hyper.distill_weight if state.last_neighbor_mean is not None else 0.0
    try:
        state.params = distill_update(
            state.spec,
            state.params,
            batch,
            ref_features,
            state.last_neighbor_mean,
            distill_weight=weight,
            learning_rate=hyper.learning_rate,
        )
    except (DimensionError, NumericError) as exc:
        raise type(exc)(f"client {state.client_id}: {exc}") from exc
    state.iteration += 1
    return state


def apply_neighbor_messengers(state: ClientState, messengers: list) -> ClientState:
    """Store the ensemble mean of the received neighbor messengers; an empty
    set clears the target and drops the client back to local-only mode."""
    state.last_neighbor_mean = ensemble_mean(messengers) if messengers else None
    return state


def communicate(state: ClientState, reference: ReferenceSet, server, round_no: int | None = None) -> ClientState:
    """Send this client's messenger, run a server round, and ingest the
    returned neighbor set. Harnesses that batch many clients per round call
    the send/apply halves separately around a single server round."""
    round_no = state.iteration if round_no is None else round_no
    messenger = generate_messenger(state.spec, state.params, reference, state.client_id, round_no)
    server.receive_messenger(messenger)
    neighbor_map = server.server_round()
    return apply_neighbor_messengers(state, neighbor_map.get(state.client_id, []))


def classification_metrics(true_idx: np.ndarray, pred_idx: np.ndarray, n_classes: int) -> Metrics:
    """Accuracy plus macro precision/recall; per-class 0/0 counts as 0."""
    acc = float((true_idx == pred_idx).mean())
    precisions, recalls = [], []
    for c in range(n_classes):
        tp = int(((pred_idx == c) & (true_idx == c)).sum())
        fp = int(((pred_idx == c) & (true_idx != c)).sum())
        fn = int(((pred_idx != c) & (true_idx == c)).sum())
        precisions.append(tp / (tp + fp) if tp + fp else 0.0)
        recalls.append(tp / (tp + fn) if tp + fn else 0.0)
    return Metrics(acc, float(np.mean(precisions)), float(np.mean(recalls)))


def evaluate(state: ClientState, split: str) -> Metrics:
    """Accuracy / macro-precision / macro-recall on one of the fixed splits."""
    if split not in _SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {_SPLITS}")
    batch: Batch = getattr(state, split)
    if batch.size == 0:
        raise ContractViolation(f"client {state.client_id}: split {split!r} is empty")
    if batch.labels is None:
        raise ContractViolation(f"client {state.client_id}: split {split!r} has no labels")
    probs = forward(state.spec, state.params, batch.features)
    return classification_metrics(
        batch.labels.argmax(axis=1), probs.argmax(axis=1), state.spec.class_count
    )
