"""Experiment orchestration: partitioning, scheduling, baselines, sweeps.

A round is one global iteration. Within a round every active client first
exchanges messengers (when the round hits the communication interval), then
takes one training step; the server batch-applies messengers in ascending
client-id order so run records are independent of intra-round scheduling.

Baselines map onto the same loop:
  FedMD   -- quality filter off and the neighbor count saturated, so every
             client distills from the mean of all other messengers.
  D-Dist  -- one static seeded peer group per client, fixed at join time,
             with no server quality/similarity logic.
  I-SGD   -- communication disabled entirely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .client import ClientState, evaluate, train_step
from .config import SimConfig, config_hash, simconfig_to_dict
from .errors import ConfigError
from .datasets import load_dataset
from .nn import Batch, init_params, one_hot
from .protocol import Messenger, ReferenceSet, ensemble_mean, generate_messenger
from .server import Server, ServerConfig


# ---------------------------------------------------------------------------
# Data partitioning


def _index_pools(labels: np.ndarray, n_classes: int, rng: np.random.Generator) -> list[list[int]]:
    pools = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        pools.append(list(idx))
    return pools


def _spread_counts(want: np.ndarray, classes: list[int], total: int, rotate: int) -> None:
    # Near-even split of `total` over `classes`, remainder rotated by caller
    # so no class is systematically favored.
    if not classes or total <= 0:
        return
    base, rem = divmod(total, len(classes))
    order = classes[rotate % len(classes):] + classes[: rotate % len(classes)]
    for i, c in enumerate(order):
        want[c] += base + (1 if i < rem else 0)


def _take_from_pool(pools: list[list[int]], c: int, n: int) -> list[int]:
    take = min(n, len(pools[c]))
    if take == 0:
        return []
    grabbed = pools[c][-take:]
    del pools[c][-take:]
    return grabbed


def _draw_balanced_reference(
    pools: list[list[int]], total_ref: int, n_classes: int, rng: np.random.Generator
) -> list[int]:
    want = np.zeros(n_classes, dtype=np.int64)
    base, rem = divmod(total_ref, n_classes)
    want[:] = base
    extra_order = rng.permutation(n_classes)
    want[extra_order[:rem]] += 1
    ref: list[int] = []
    for c in range(n_classes):
        if len(pools[c]) < want[c]:
            raise ConfigError(
                f"not enough class-{c} samples for a balanced reference "
                f"(need {int(want[c])}, have {len(pools[c])})"
            )
        ref.extend(_take_from_pool(pools, c, int(want[c])))
    return ref


def partition_dataset(
    features: np.ndarray,
    labels: np.ndarray,
    policy: str,
    n_clients: int,
    seed,
    *,
    ref_fraction: float = 0.0,
    n_classes: int | None = None,
    n_clusters: int = 2,
    skew_mix: float = 0.1,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], tuple[np.ndarray, np.ndarray] | None]:
    """Split a dataset into per-client slices plus an optional reference slice.

    Policies:
      even_random   -- equal-size random slices.
      class_removal -- even slices, each missing one seeded-random class.
      cluster_skew  -- clients sit in contiguous-blocks clusters; each cluster
                       concentrates on a seeded-random class subset, with a
                       `skew_mix` fraction drawn from the remaining classes.

    The reference slice (when `ref_fraction` > 0) is carved out first and is
    class-balanced within one sample per class.
    """
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    total = labels.shape[0]
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if total < n_clients:
        raise ConfigError(f"dataset has {total} samples, fewer than {n_clients} clients")
    n_classes = int(labels.max()) + 1 if n_classes is None else int(n_classes)

    pools = _index_pools(labels, n_classes, rng)

    reference = None
    if ref_fraction > 0.0:
        total_ref = int(round(ref_fraction * total))
        ref_idx = _draw_balanced_reference(pools, total_ref, n_classes, rng)
        ref_idx = np.asarray(sorted(ref_idx), dtype=np.int64)
        reference = (features[ref_idx], labels[ref_idx])

    remaining = sum(len(p) for p in pools)
    if remaining < n_clients:
        raise ConfigError("too few samples left for the client slices after the reference cut")

    slice_indices: list[list[int]] = [[] for _ in range(n_clients)]

    if policy == "even_random":
        rest = np.concatenate([np.asarray(p, dtype=np.int64) for p in pools if p]) \
            if remaining else np.zeros(0, dtype=np.int64)
        rng.shuffle(rest)
        per = remaining // n_clients
        for n in range(n_clients):
            slice_indices[n] = list(rest[n * per : (n + 1) * per])

    elif policy == "class_removal":
        removed = rng.integers(0, n_classes, size=n_clients)
        for c in range(n_classes):
            owners = [n for n in range(n_clients) if removed[n] != c]
            if not owners:
                continue  # every client dropped this class; samples go unused
            pool = pools[c]
            want = np.zeros(n_clients, dtype=np.int64)
            _spread_counts(want, owners, len(pool), rotate=c)
            for n in owners:
                slice_indices[n].extend(_take_from_pool(pools, c, int(want[n])))

    elif policy == "cluster_skew":
        blocks = np.array_split(np.arange(n_clients), n_clusters)
        cluster_of = np.zeros(n_clients, dtype=np.int64)
        for j, block in enumerate(blocks):
            cluster_of[block] = j
        class_perm = list(rng.permutation(n_classes))
        cluster_classes = [list(map(int, chunk)) for chunk in np.array_split(class_perm, n_clusters)]
        slice_size = remaining // n_clients
        for n in range(n_clients):
            own = cluster_classes[int(cluster_of[n])]
            other = [c for c in range(n_classes) if c not in own]
            n_in = slice_size if not other else int(round((1.0 - skew_mix) * slice_size))
            want = np.zeros(n_classes, dtype=np.int64)
            _spread_counts(want, own, n_in, rotate=n)
            _spread_counts(want, other, slice_size - n_in, rotate=n)
            got: list[int] = []
            for c in range(n_classes):
                got.extend(_take_from_pool(pools, c, int(want[c])))
            while len(got) < slice_size:
                # preferred pools ran dry; top up from the largest remaining one
                sizes = [len(p) for p in pools]
                c = int(np.argmax(sizes))
                if sizes[c] == 0:
                    break
                got.extend(_take_from_pool(pools, c, slice_size - len(got)))
            slice_indices[n] = got

    else:
        raise ConfigError(f"unknown partition policy {policy!r}")

    slices = []
    for n in range(n_clients):
        idx = np.asarray(slice_indices[n], dtype=np.int64)
        rng.shuffle(idx)
        if idx.size == 0:
            raise ConfigError(f"partition produced an empty slice for client {n}")
        slices.append((features[idx], labels[idx]))
    return slices, reference


def sparsify(
    features: np.ndarray, labels: np.ndarray, r: float, seed
) -> tuple[np.ndarray, np.ndarray]:
    """Keep ceil(r% of the samples), drawn seeded-uniform without replacement.

    r=100 is the identity (and consumes no randomness). Applies to training
    slices only; callers leave validation/test splits untouched.
    """
    if not 0.0 < r <= 100.0:
        raise ConfigError("sparsity r must lie in (0, 100]")
    n = features.shape[0]
    if n == 0:
        raise ConfigError("cannot sparsify an empty slice")
    if r == 100.0:
        return features, labels
    keep = math.ceil(r / 100.0 * n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return features[idx], labels[idx]


def split_slice(
    features: np.ndarray, labels: np.ndarray, rng: np.random.Generator
) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Fixed 8:1:1 train/val/test split of one client's slice."""
    n = features.shape[0]
    perm = rng.permutation(n)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    tr = perm[:n_train]
    va = perm[n_train : n_train + n_val]
    te = perm[n_train + n_val :]
    return (features[tr], labels[tr]), (features[va], labels[va]), (features[te], labels[te])


# ---------------------------------------------------------------------------
# Run records


@dataclass
class RunRecord:
    """Everything one run produced: flat metric rows, per-communication-round
    quality sets and neighbor maps, and the final cross-client summary."""

    config_hash: str
    seed: int
    protocol: str
    metrics: list[dict] = field(default_factory=list)
    comm_rounds: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "protocol": self.protocol,
            "metrics": self.metrics,
            "comm_rounds": self.comm_rounds,
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            config_hash=d["config_hash"],
            seed=d["seed"],
            protocol=d["protocol"],
            metrics=list(d["metrics"]),
            comm_rounds=list(d["comm_rounds"]),
            summary=dict(d["summary"]),
        )


# ---------------------------------------------------------------------------
# The simulation loop


@dataclass
class _Streams:
    """Named random streams spawned from the run seed. Each client owns one
    stream (init -> split -> sparsify -> batches) so client behavior never
    depends on who else is in the run."""

    data: np.random.Generator
    ref_data: np.random.Generator
    partition: np.random.Generator
    clients: list[np.random.Generator]
    selection: np.random.Generator
    ddist: np.random.Generator


def _spawn_streams(seed: int, n_clients: int) -> _Streams:
    root = np.random.SeedSequence(seed)
    data_ss, ref_ss, part_ss, clients_ss, select_ss, ddist_ss = root.spawn(6)
    return _Streams(
        data=np.random.default_rng(data_ss),
        ref_data=np.random.default_rng(ref_ss),
        partition=np.random.default_rng(part_ss),
        clients=[np.random.default_rng(s) for s in clients_ss.spawn(n_clients)],
        selection=np.random.default_rng(select_ss),
        ddist=np.random.default_rng(ddist_ss),
    )


def _build_clients(cfg: SimConfig, streams: _Streams) -> tuple[dict[int, ClientState], ReferenceSet]:
    x, y, n_classes = load_dataset(cfg.dataset, seed=streams.data)
    if n_classes != cfg.class_count:
        raise ConfigError(
            f"dataset has {n_classes} classes but the models output {cfg.class_count}"
        )
    if x.shape[1] != cfg.model_mix[0][0].input_dim:
        raise ConfigError(
            f"dataset features have dim {x.shape[1]} but the models expect "
            f"{cfg.model_mix[0][0].input_dim}"
        )

    if cfg.reference.dataset is not None:
        slices, _ = partition_dataset(
            x, y, cfg.partition.policy, cfg.n_clients, streams.partition,
            ref_fraction=0.0, n_classes=n_classes,
            n_clusters=cfg.partition.clusters, skew_mix=cfg.partition.skew_mix,
        )
        ref_x, ref_y, ref_classes = load_dataset(cfg.reference.dataset, seed=streams.ref_data)
        if ref_classes != n_classes:
            raise ConfigError("reference dataset class count does not match the task")
    else:
        slices, ref_pair = partition_dataset(
            x, y, cfg.partition.policy, cfg.n_clients, streams.partition,
            ref_fraction=cfg.reference.fraction, n_classes=n_classes,
            n_clusters=cfg.partition.clusters, skew_mix=cfg.partition.skew_mix,
        )
        ref_x, ref_y = ref_pair

    reference = ReferenceSet(ref_x, one_hot(ref_y, n_classes))

    states: dict[int, ClientState] = {}
    for cid in range(cfg.n_clients):
        rng = streams.clients[cid]
        spec = cfg.client_spec(cid)
        params = init_params(spec, rng)
        (tr_x, tr_y), (va_x, va_y), (te_x, te_y) = split_slice(*slices[cid], rng)
        if cfg.sparsity < 100.0:
            tr_x, tr_y = sparsify(tr_x, tr_y, cfg.sparsity, rng)
        states[cid] = ClientState(
            client_id=cid,
            spec=spec,
            params=params,
            train=Batch(tr_x, one_hot(tr_y, n_classes)),
            val=Batch(va_x, one_hot(va_y, n_classes)),
            test=Batch(te_x, one_hot(te_y, n_classes)),
            rng=rng,
        )
    return states, reference


def run_simulation(cfg: SimConfig, return_states: bool = False):
    """Execute one run and return its RunRecord (optionally plus the final
    client states, which tests use for trajectory comparisons)."""
    streams = _spawn_streams(cfg.seed, cfg.n_clients)
    states, reference = _build_clients(cfg, streams)
    hyper = cfg.hyper
    proto = cfg.protocol

    join_round = {cid: stage.start_round for stage in cfg.join_schedule for cid in stage.clients}

    server: Server | None = None
    if proto == "SQMD":
        server = Server(reference, cfg.server, streams.selection)
    elif proto == "FedMD":
        # Saturated neighbor count + no quality filter: everyone distills
        # from the mean of all other communicated messengers.
        fed_cfg = ServerConfig(
            quality_set_size=cfg.n_clients,
            neighbor_count=cfg.n_clients,
            quality_filter=False,
            selection="nearest",
        )
        server = Server(reference, fed_cfg, streams.selection)

    ddist_groups: dict[int, list[int]] = {}
    ddist_repo: dict[int, Messenger] = {}

    rows: list[dict] = []
    comm_rounds: list[dict] = []
    active: list[int] = []

    for t in range(1, hyper.total_iterations + 1):
        # --- staged joins
        joined_now = sorted(cid for cid, r in join_round.items() if r == t)
        for cid in joined_now:
            active.append(cid)
            if server is not None:
                server.register_client(cid)
            if proto == "D-Dist":
                peers = sorted(c for c in active if c != cid)
                size = min(cfg.server.neighbor_count, len(peers))
                group = (
                    [peers[i] for i in streams.ddist.choice(len(peers), size=size, replace=False)]
                    if size
                    else []
                )
                ddist_groups[cid] = sorted(group)
        active.sort()

        # --- communication
        if active and t % hyper.comm_interval == 0:
            if server is not None:
                for cid in active:
                    server.receive_messenger(
                        generate_messenger(states[cid].spec, states[cid].params, reference, cid, t)
                    )
                neighbor_map = server.server_round()
                for cid in active:
                    mine = neighbor_map.get(cid, [])
                    states[cid].last_neighbor_mean = ensemble_mean(mine) if mine else None
                comm_rounds.append({
                    "round": t,
                    "quality_set": [int(c) for c in server.quality_set],
                    "neighbors": {str(c): [int(n) for n in server.neighbor_ids[c]] for c in active},
                })
            elif proto == "D-Dist":
                for cid in active:
                    ddist_repo[cid] = generate_messenger(
                        states[cid].spec, states[cid].params, reference, cid, t
                    )
                used: dict[str, list[int]] = {}
                for cid in active:
                    msgs = [ddist_repo[m] for m in ddist_groups.get(cid, []) if m in ddist_repo]
                    states[cid].last_neighbor_mean = ensemble_mean(msgs) if msgs else None
                    used[str(cid)] = [m.client_id for m in msgs]
                comm_rounds.append({"round": t, "quality_set": [], "neighbors": used})
            else:  # I-SGD: communication disabled
                comm_rounds.append({"round": t, "quality_set": [], "neighbors": {}})

        # --- local steps
        for cid in active:
            train_step(states[cid], hyper, reference.features)

        # --- evaluation
        if active and (t % cfg.eval_every == 0 or t == hyper.total_iterations):
            in_q = set(server.quality_set) if server is not None else set()
            for cid in active:
                score = server.scores.get(cid) if server is not None else None
                for split in cfg.eval_splits:
                    m = evaluate(states[cid], split)
                    rows.append({
                        "round": t,
                        "client_id": cid,
                        "protocol": proto,
                        "split": split,
                        "accuracy": m.accuracy,
                        "precision": m.precision,
                        "recall": m.recall,
                        "quality_score": float(score) if score is not None else None,
                        "in_q": (cid in in_q) if server is not None else None,
                    })

    last_round = max((r["round"] for r in rows), default=hyper.total_iterations)
    final = [r for r in rows if r["round"] == last_round and r["split"] == "test"]
    summary = {
        "accuracy": float(np.mean([r["accuracy"] for r in final])) if final else float("nan"),
        "precision": float(np.mean([r["precision"] for r in final])) if final else float("nan"),
        "recall": float(np.mean([r["recall"] for r in final])) if final else float("nan"),
    }
    record = RunRecord(
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        protocol=proto,
        metrics=rows,
        comm_rounds=comm_rounds,
        summary=summary,
    )
    if return_states:
        return record, states
    return record


# ---------------------------------------------------------------------------
# Sweeps


def _flatten(d: dict, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for key, value in d.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            out.update(_flatten(value, path))
        else:
            out[path] = json.dumps(value, sort_keys=True)
    return out


def sweep(configs: list[SimConfig], swept: list[str] | None = None):
    """Run a family of configs that differ only in swept fields.

    Returns (records, table) where the table has one row per run keyed by
    the swept field paths plus the final summary metrics. If `swept` is
    given, any other differing field raises a ConfigError.
    """
    if not configs:
        raise ConfigError("sweep needs at least one config")
    flats = [_flatten(simconfig_to_dict(c)) for c in configs]
    keys = set().union(*flats)
    differing = sorted(
        k for k in keys if len({f.get(k) for f in flats}) > 1
    )
    if swept is not None:
        extra = [k for k in differing if k not in swept]
        if extra:
            raise ConfigError(f"configs differ in non-swept fields: {extra}")
        axes = list(swept)
    else:
        axes = differing
    records = [run_simulation(cfg) for cfg in configs]
    table = []
    for flat, rec in zip(flats, records):
        row = {k: json.loads(flat[k]) if k in flat else None for k in axes}
        row["accuracy"] = rec.summary["accuracy"]
        row["precision"] = rec.summary["precision"]
        row["recall"] = rec.summary["recall"]
        table.append(row)
    return records, table
