"""Messenger-based collaboration for heterogeneous on-device classifiers.

Clients with different model architectures exchange soft decisions over a
shared reference dataset ("messengers"); a coordination server grades each
messenger against the reference labels, keeps the q best as knowledge
sources, and hands every client its k most similar sources by sample-
averaged KL divergence. The library bundles the model engine, the protocol
mathematics, the server and client runtimes, and a deterministic experiment
harness with FedMD / D-Dist / I-SGD baselines.
"""

from .client import (
    ClientState,
    Metrics,
    TrainHyper,
    apply_neighbor_messengers,
    classification_metrics,
    communicate,
    evaluate,
    train_step,
)
from .config import (
    JoinStage,
    PartitionSpec,
    ReferenceSpec,
    SimConfig,
    config_hash,
    simconfig_from_dict,
    simconfig_to_dict,
)
from .datasets import (
    DatasetDescriptor,
    generate_synthetic,
    load_csv,
    load_dataset,
    load_idx,
)
from .errors import (
    ConfigError,
    ContractViolation,
    DimensionError,
    NumericError,
    ParseError,
    ProtocolError,
)
from .nn import (
    PROB_EPS,
    Batch,
    Gradients,
    ModelParams,
    ModelSpec,
    backward_local,
    backward_reference,
    cross_entropy,
    distill_update,
    forward,
    init_params,
    one_hot,
)
from .protocol import (
    CollaborationGraph,
    Messenger,
    QualityTable,
    ReferenceSet,
    ensemble_mean,
    generate_messenger,
    messenger_divergence,
    score_quality,
    select_neighbors,
    select_quality_set,
    similarity_from_divergence,
    stationarity_residual,
)
from .server import Server, ServerConfig
from .simulation import (
    RunRecord,
    partition_dataset,
    run_simulation,
    sparsify,
    split_slice,
    sweep,
)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ClientState",
    "CollaborationGraph",
    "ConfigError",
    "ContractViolation",
    "DatasetDescriptor",
    "DimensionError",
    "Gradients",
    "JoinStage",
    "Messenger",
    "Metrics",
    "ModelParams",
    "ModelSpec",
    "NumericError",
    "PROB_EPS",
    "ParseError",
    "PartitionSpec",
    "ProtocolError",
    "QualityTable",
    "ReferenceSet",
    "ReferenceSpec",
    "RunRecord",
    "Server",
    "ServerConfig",
    "SimConfig",
    "TrainHyper",
    "apply_neighbor_messengers",
    "backward_local",
    "backward_reference",
    "classification_metrics",
    "communicate",
    "config_hash",
    "cross_entropy",
    "distill_update",
    "ensemble_mean",
    "evaluate",
    "forward",
    "generate_messenger",
    "generate_synthetic",
    "init_params",
    "load_csv",
    "load_dataset",
    "load_idx",
    "messenger_divergence",
    "one_hot",
    "partition_dataset",
    "run_simulation",
    "score_quality",
    "select_neighbors",
    "select_quality_set",
    "similarity_from_divergence",
    "simconfig_from_dict",
    "simconfig_to_dict",
    "sparsify",
    "split_slice",
    "stationarity_residual",
    "sweep",
    "train_step",
]
