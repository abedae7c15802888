"""Experiment configuration: dataclasses, JSON (de)serialization, validation.

A SimConfig fully describes one run; together with its seed it pins every
random draw, so identical configs reproduce byte-identical run records.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .client import TrainHyper
from .datasets import DatasetDescriptor
from .errors import ConfigError
from .nn import ModelSpec
from .server import ServerConfig

PROTOCOLS = ("SQMD", "FedMD", "D-Dist", "I-SGD")
PARTITION_POLICIES = ("even_random", "class_removal", "cluster_skew")


@dataclass(frozen=True)
class PartitionSpec:
    policy: str
    clusters: int = 2
    skew_mix: float = 0.1

    def __post_init__(self) -> None:
        if self.policy not in PARTITION_POLICIES:
            raise ConfigError(f"unknown partition policy {self.policy!r}")
        if self.clusters < 1:
            raise ConfigError("partition clusters must be >= 1")
        if not 0.0 <= self.skew_mix <= 1.0:
            raise ConfigError("partition skew_mix must lie in [0, 1]")


@dataclass(frozen=True)
class ReferenceSpec:
    """Where the shared reference data comes from: a fraction carved out of
    the main dataset, or an explicit dataset of its own."""

    fraction: float = 0.0
    dataset: DatasetDescriptor | None = None

    def __post_init__(self) -> None:
        if self.dataset is None and not 0.0 < self.fraction < 1.0:
            raise ConfigError("reference fraction must lie in (0, 1) unless an explicit dataset is given")
        if self.dataset is not None and self.fraction:
            raise ConfigError("give either a reference fraction or an explicit dataset, not both")


@dataclass(frozen=True)
class JoinStage:
    clients: tuple[int, ...]
    start_round: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "clients", tuple(int(c) for c in self.clients))
        if self.start_round < 1:
            raise ConfigError("join start_round must be >= 1")
        if not self.clients:
            raise ConfigError("a join stage must contain at least one client")


@dataclass(frozen=True)
class SimConfig:
    seed: int
    protocol: str
    dataset: DatasetDescriptor
    n_clients: int
    model_mix: tuple[tuple[ModelSpec, int], ...]
    partition: PartitionSpec
    reference: ReferenceSpec
    hyper: TrainHyper
    server: ServerConfig
    sparsity: float = 100.0
    join_schedule: tuple[JoinStage, ...] = ()
    eval_every: int = 1
    eval_splits: tuple[str, ...] = ("test",)

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if not self.model_mix:
            raise ConfigError("model_mix must not be empty")
        total = sum(count for _, count in self.model_mix)
        if total != self.n_clients:
            raise ConfigError(f"model_mix counts sum to {total}, expected n_clients={self.n_clients}")
        classes = {spec.class_count for spec, _ in self.model_mix}
        if len(classes) != 1:
            raise ConfigError(f"all model specs must share one class count, got {sorted(classes)}")
        inputs = {spec.input_dim for spec, _ in self.model_mix}
        if len(inputs) != 1:
            raise ConfigError(f"all model specs must share one input dim, got {sorted(inputs)}")
        if not 0.0 < self.sparsity <= 100.0:
            raise ConfigError("sparsity must lie in (0, 100]")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        for split in self.eval_splits:
            if split not in ("train", "val", "test"):
                raise ConfigError(f"unknown eval split {split!r}")
        schedule = self.join_schedule or (JoinStage(tuple(range(self.n_clients)), 1),)
        object.__setattr__(self, "join_schedule", tuple(schedule))
        rounds = [stage.start_round for stage in self.join_schedule]
        if rounds != sorted(rounds):
            raise ConfigError("join_schedule start rounds must be non-decreasing")
        members: list[int] = []
        for stage in self.join_schedule:
            members.extend(stage.clients)
        if sorted(members) != list(range(self.n_clients)):
            raise ConfigError("join_schedule groups must partition the client ids 0..n_clients-1")

    @property
    def class_count(self) -> int:
        return self.model_mix[0][0].class_count

    def client_spec(self, client_id: int) -> ModelSpec:
        """Specs are assigned to clients in mix order, blocks of `count`."""
        cursor = 0
        for spec, count in self.model_mix:
            cursor += count
            if client_id < cursor:
                return spec
        raise ConfigError(f"client id {client_id} outside 0..{self.n_clients - 1}")


# ---------------------------------------------------------------------------
# JSON (de)serialization


def _dataset_from_dict(d: dict) -> DatasetDescriptor:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError("dataset section must be an object with a 'kind'")
    defaults = {"idx_images": "minmax", "csv_rows": "zscore"}
    d = dict(d)
    d.setdefault("normalization", defaults.get(d.get("kind"), "none"))
    allowed = set(DatasetDescriptor.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown dataset fields: {sorted(unknown)}")
    return DatasetDescriptor(**d)


def _dataset_to_dict(desc: DatasetDescriptor) -> dict:
    out = {"kind": desc.kind, "normalization": desc.normalization}
    for key in ("images_path", "labels_path", "path", "label_column", "class_count",
                "samples", "class_means", "priors"):
        value = getattr(desc, key)
        if value is not None:
            out[key] = value
    if desc.kind.startswith("synthetic"):
        out.update(feature_dim=desc.feature_dim, cov_scale=desc.cov_scale,
                   spread=desc.spread, ring_noise=desc.ring_noise)
    return out


def simconfig_from_dict(raw: dict) -> SimConfig:
    """Parse and validate a config document; every violation is reported as a
    ConfigError naming the offending constraint."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    required = ("seed", "protocol", "dataset", "clients", "model_mix", "hyper", "server")
    for key in required:
        if key not in raw:
            raise ConfigError(f"config is missing required field {key!r}")

    mix = []
    for i, entry in enumerate(raw["model_mix"]):
        entry = dict(entry)
        count = entry.pop("count", None)
        if count is None or int(count) < 1:
            raise ConfigError(f"model_mix[{i}] needs a positive 'count'")
        entry.setdefault("spec_id", f"spec{i}")
        entry["layer_sizes"] = tuple(entry.get("layer_sizes", ()))
        mix.append((ModelSpec(**entry), int(count)))

    hyper_raw = dict(raw["hyper"])
    hyper = TrainHyper(**hyper_raw)

    server_raw = dict(raw["server"])
    server = ServerConfig(**server_raw)

    part_raw = dict(raw.get("partition", {"policy": "even_random"}))
    partition = PartitionSpec(**part_raw)

    ref_raw = dict(raw.get("reference", {"fraction": 0.2}))
    if "dataset" in ref_raw and ref_raw["dataset"] is not None:
        ref = ReferenceSpec(dataset=_dataset_from_dict(ref_raw["dataset"]))
    else:
        ref = ReferenceSpec(fraction=float(ref_raw.get("fraction", 0.2)))

    schedule = tuple(
        JoinStage(tuple(stage["clients"]), int(stage["start_round"]))
        for stage in raw.get("join_schedule", [])
    )

    return SimConfig(
        seed=int(raw["seed"]),
        protocol=str(raw["protocol"]),
        dataset=_dataset_from_dict(raw["dataset"]),
        n_clients=int(raw["clients"]),
        model_mix=tuple(mix),
        partition=partition,
        reference=ref,
        hyper=hyper,
        server=server,
        sparsity=float(raw.get("sparsity", 100.0)),
        join_schedule=schedule,
        eval_every=int(raw.get("eval_every", 1)),
        eval_splits=tuple(raw.get("eval_splits", ("test",))),
    )


def simconfig_to_dict(cfg: SimConfig) -> dict:
    """Canonical JSON-ready form; the inverse of `simconfig_from_dict`."""
    return {
        "seed": cfg.seed,
        "protocol": cfg.protocol,
        "dataset": _dataset_to_dict(cfg.dataset),
        "clients": cfg.n_clients,
        "model_mix": [
            {
                "layer_sizes": list(spec.layer_sizes),
                "activation": spec.activation,
                "spec_id": spec.spec_id,
                "count": count,
            }
            for spec, count in cfg.model_mix
        ],
        "partition": {
            "policy": cfg.partition.policy,
            "clusters": cfg.partition.clusters,
            "skew_mix": cfg.partition.skew_mix,
        },
        "reference": (
            {"dataset": _dataset_to_dict(cfg.reference.dataset)}
            if cfg.reference.dataset is not None
            else {"fraction": cfg.reference.fraction}
        ),
        "hyper": {
            "distill_weight": cfg.hyper.distill_weight,
            "learning_rate": cfg.hyper.learning_rate,
            "comm_interval": cfg.hyper.comm_interval,
            "batch_size": cfg.hyper.batch_size,
            "total_iterations": cfg.hyper.total_iterations,
            "full_batch": cfg.hyper.full_batch,
        },
        "server": {
            "quality_set_size": cfg.server.quality_set_size,
            "neighbor_count": cfg.server.neighbor_count,
            "quality_filter": cfg.server.quality_filter,
            "selection": cfg.server.selection,
        },
        "sparsity": cfg.sparsity,
        "join_schedule": [
            {"clients": list(stage.clients), "start_round": stage.start_round}
            for stage in cfg.join_schedule
        ],
        "eval_every": cfg.eval_every,
        "eval_splits": list(cfg.eval_splits),
    }


def config_hash(cfg: SimConfig) -> str:
    """Stable digest of the canonical config document."""
    canonical = json.dumps(simconfig_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
