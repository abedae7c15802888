"""Shared builders for small, fast simulation configs used across tests."""

import copy

from sqmd.config import simconfig_from_dict

BASE = {
    "seed": 1234,
    "protocol": "SQMD",
    "clients": 4,
    "dataset": {
        "kind": "synthetic_gaussian",
        "class_count": 2,
        "samples": 400,
        "feature_dim": 2,
        "spread": 2.5,
        "cov_scale": 0.25,
    },
    "model_mix": [
        {"layer_sizes": [2, 2], "count": 2, "spec_id": "lin"},
        {"layer_sizes": [2, 4, 2], "count": 1, "spec_id": "mlp4"},
        {"layer_sizes": [2, 6, 2], "count": 1, "spec_id": "mlp6"},
    ],
    "partition": {"policy": "even_random"},
    "reference": {"fraction": 0.2},
    "hyper": {
        "distill_weight": 0.8,
        "learning_rate": 0.2,
        "comm_interval": 5,
        "batch_size": 8,
        "total_iterations": 20,
    },
    "server": {"quality_set_size": 4, "neighbor_count": 2},
    "eval_every": 5,
}


def merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def toy_config_dict(**overrides) -> dict:
    return merge(BASE, overrides)


def toy_config(**overrides):
    return simconfig_from_dict(toy_config_dict(**overrides))
