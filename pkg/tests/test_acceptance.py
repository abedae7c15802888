"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. Expected values are produced by brute-force loop
oracles written here, independent of the library's vectorized paths.
Directional experiments use pinned seeds; every run is deterministic.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from helpers import toy_config
from sqmd.client import train_step
from sqmd.config import config_hash
from sqmd.nn import (
    Batch,
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
from sqmd.protocol import (
    Messenger,
    ReferenceSet,
    ensemble_mean,
    generate_messenger,
    messenger_divergence,
    score_quality,
)
from sqmd.server import Server, ServerConfig
from sqmd.simulation import RunRecord, run_simulation

SEEDS = [101, 202, 303, 404, 505]

_RUN_CACHE: dict[str, RunRecord] = {}


def run_cached(cfg) -> RunRecord:
    key = config_hash(cfg)
    if key not in _RUN_CACHE:
        _RUN_CACHE[key] = run_simulation(cfg)
    return _RUN_CACHE[key]


@contextmanager
def criterion(num, title):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPTANCE] criterion {num}: FAIL - {title}")
        raise
    print(f"\n[ACCEPTANCE] criterion {num}: PASS - {title} "
          f"({time.monotonic() - start:.1f}s)")


# ---------------------------------------------------------------------------
# experiment configurations (three distinct architectures in every mix)

MIX16 = [
    {"layer_sizes": [2, 16, 4], "count": 6, "spec_id": "w16"},
    {"layer_sizes": [2, 24, 4], "count": 5, "spec_id": "w24"},
    {"layer_sizes": [2, 12, 8, 4], "count": 5, "spec_id": "deep"},
]


def four_device_config(protocol, seed=20250807):
    """Two single-class device pairs whose feature distributions coincide, so
    full averaging mixes contradictory knowledge while pairwise selection
    keeps each device with its like-minded twin."""
    return toy_config(
        seed=seed, protocol=protocol, clients=4,
        dataset={"samples": 400, "class_count": 2, "spread": 0.0, "cov_scale": 1.0},
        model_mix=[
            {"layer_sizes": [2, 8, 2], "count": 1, "spec_id": "mlp8"},
            {"layer_sizes": [2, 12, 2], "count": 1, "spec_id": "mlp12"},
            {"layer_sizes": [2, 8, 4, 2], "count": 2, "spec_id": "deep"},
        ],
        partition={"policy": "cluster_skew", "clusters": 2, "skew_mix": 0.0},
        hyper={"distill_weight": 0.8, "learning_rate": 0.1, "comm_interval": 20,
               "batch_size": 16, "total_iterations": 200},
        server={"quality_set_size": 4, "neighbor_count": 1},
        eval_every=10,
    )


def sparsity_config(protocol, seed, r):
    """16 heterogeneous clients in two data clusters with moderate class
    overlap; test accuracy is sensitive to training-set size."""
    return toy_config(
        seed=seed, protocol=protocol, clients=16,
        dataset={"samples": 6000, "class_count": 4, "spread": 2.0, "cov_scale": 1.0},
        model_mix=MIX16,
        partition={"policy": "cluster_skew", "clusters": 2, "skew_mix": 0.05},
        hyper={"distill_weight": 0.8, "learning_rate": 0.1, "comm_interval": 5,
               "batch_size": 16, "total_iterations": 150},
        server={"quality_set_size": 8, "neighbor_count": 4},
        sparsity=r,
        eval_every=150,
    )


ASYNC_STAGE1 = list(range(8))
ASYNC_STAGE2 = list(range(8, 12))
ASYNC_STAGE3 = list(range(12, 16))


def async_config(protocol, seed, join2=60, join3=120):
    """Three-stage staged join on a shared task with heavy class overlap;
    newcomers start untrained, so their early messengers are noise."""
    return toy_config(
        seed=seed, protocol=protocol, clients=16,
        dataset={"samples": 8000, "class_count": 4, "spread": 1.2, "cov_scale": 1.0},
        model_mix=MIX16,
        partition={"policy": "even_random"},
        hyper={"distill_weight": 0.8, "learning_rate": 0.1, "comm_interval": 5,
               "batch_size": 16, "total_iterations": 150},
        server={"quality_set_size": 8, "neighbor_count": 4},
        join_schedule=[
            {"clients": ASYNC_STAGE1, "start_round": 1},
            {"clients": ASYNC_STAGE2, "start_round": join2},
            {"clients": ASYNC_STAGE3, "start_round": join3},
        ],
        eval_every=1,
    )


def ablation_config(seed, quality_filter=True, selection="nearest"):
    """Sparsity-stressed cluster task (r=10%): overfit clients produce
    genuinely low-quality messengers for the filter to prune."""
    return toy_config(
        seed=seed, protocol="SQMD", clients=16,
        dataset={"samples": 6000, "class_count": 4, "spread": 2.0, "cov_scale": 1.0},
        model_mix=MIX16,
        partition={"policy": "cluster_skew", "clusters": 2, "skew_mix": 0.05},
        hyper={"distill_weight": 0.8, "learning_rate": 0.1, "comm_interval": 5,
               "batch_size": 16, "total_iterations": 150},
        server={"quality_set_size": 8, "neighbor_count": 4,
                "quality_filter": quality_filter, "selection": selection},
        sparsity=10.0,
        eval_every=150,
    )


# ---------------------------------------------------------------------------
# helpers


def random_soft(rng, r, c):
    raw = rng.uniform(0.01, 1.0, size=(r, c))
    return raw / raw.sum(axis=1, keepdims=True)


def param_arrays(p):
    return list(p.weights) + list(p.biases)


def window_acc(rec, ids, lo, hi):
    vals = [r["accuracy"] for r in rec.metrics
            if r["split"] == "test" and r["client_id"] in ids and lo <= r["round"] < hi]
    return float(np.mean(vals))


def neighbor_maps_at(rec, rnd, ids):
    entry = next(e for e in rec.comm_rounds if e["round"] == rnd)
    return {str(i): entry["neighbors"][str(i)] for i in ids}


def scores_at(rec, rnd, ids):
    return {r["client_id"]: r["quality_score"] for r in rec.metrics
            if r["round"] == rnd and r["client_id"] in ids}


# ---------------------------------------------------------------------------
# 1. formula oracles


def test_criterion_1_formula_oracles():
    with criterion(1, "formula oracles within 1e-9 of brute force on 100+ instances"):
        start = time.monotonic()
        rng = np.random.default_rng(2024)
        for _ in range(120):
            r = int(rng.integers(1, 8))
            c = int(rng.integers(2, 6))
            probs = random_soft(rng, r, c)
            labels_idx = rng.integers(0, c, size=r)
            labels = one_hot(labels_idx, c)

            # cross-entropy: explicit per-row loop
            expected_ce = 0.0
            for j in range(r):
                expected_ce += -math.log(min(max(probs[j, labels_idx[j]], 1e-12), 1.0))
            assert abs(cross_entropy(probs, labels) - expected_ce) < 1e-9

            # quality score: same loop through the messenger interface
            balanced_idx = np.arange(r) % c
            reference = ReferenceSet(rng.normal(size=(r, 2)), one_hot(balanced_idx, c))
            expected_score = 0.0
            for j in range(r):
                expected_score += -math.log(min(max(probs[j, balanced_idx[j]], 1e-12), 1.0))
            got = score_quality(Messenger(0, 0, probs), reference)
            assert abs(got - expected_score) < 1e-9

            # divergence: clamp + renormalize + double loop
            other = random_soft(rng, r, c)
            pa = np.clip(probs, 1e-12, None)
            pa = pa / pa.sum(axis=1, keepdims=True)
            pb = np.clip(other, 1e-12, None)
            pb = pb / pb.sum(axis=1, keepdims=True)
            expected_d = 0.0
            for j in range(r):
                for k in range(c):
                    expected_d += pa[j, k] * math.log(pa[j, k] / pb[j, k])
            expected_d /= r
            assert abs(messenger_divergence(probs, other) - expected_d) < 1e-9

            # squared-disagreement loss through a real model
            spec = ModelSpec((2, c))
            params = init_params(spec, rng)
            feats = rng.normal(size=(r, 2))
            target = random_soft(rng, r, c)
            model_probs = forward(spec, params, feats)
            expected_loss = 0.0
            for j in range(r):
                for k in range(c):
                    expected_loss += (model_probs[j, k] - target[j, k]) ** 2
            _, got_loss = backward_reference(spec, params, feats, target)
            assert abs(got_loss - expected_loss) < 1e-9
        assert time.monotonic() - start < 10.0


# ---------------------------------------------------------------------------
# 2. gradient checks


def small_model(rng):
    # keep every sampled model under 200 parameters
    while True:
        depth = int(rng.integers(0, 3))
        sizes = [int(rng.integers(2, 6))] + [int(rng.integers(2, 8)) for _ in range(depth)] \
            + [int(rng.integers(2, 5))]
        spec = ModelSpec(tuple(sizes))
        params = init_params(spec, rng)
        params = ModelParams(
            params.weights, [rng.uniform(-0.3, 0.3, size=b.shape) for b in params.biases]
        )
        if params.n_params <= 200:
            return spec, params


def central_diff(loss_fn, params, step=1e-5):
    grads = []
    for arr in param_arrays(params):
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            hi = loss_fn(params)
            arr[idx] = orig - step
            lo = loss_fn(params)
            arr[idx] = orig
            g[idx] = (hi - lo) / (2.0 * step)
            it.iternext()
        grads.append(g)
    return grads


def vec_rel_error(analytic, numeric):
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)


def sample_away_from_kinks(rng, n_rows):
    from sqmd.nn import _cached_forward

    while True:
        spec, params = small_model(rng)
        x = rng.normal(size=(n_rows, spec.input_dim))
        pre, _, _ = _cached_forward(spec, params, x)
        if all(np.abs(z).min() > 1e-3 for z in pre[:-1]) if len(pre) > 1 else True:
            return spec, params, x


def test_criterion_2_gradient_checks():
    with criterion(2, "backprop matches central finite differences within 1e-4"):
        start = time.monotonic()
        rng = np.random.default_rng(77)
        for _ in range(50):
            b = int(rng.integers(1, 5))
            spec, params, x = sample_away_from_kinks(rng, b)
            batch = Batch(x, one_hot(rng.integers(0, spec.class_count, size=b), spec.class_count))
            grads, _ = backward_local(spec, params, batch)

            def local_loss(p):
                return cross_entropy(forward(spec, p, batch.features), batch.labels)

            numeric = central_diff(local_loss, params)
            assert vec_rel_error(param_arrays(grads), numeric) < 1e-4
        for _ in range(50):
            r = int(rng.integers(1, 5))
            spec, params, feats = sample_away_from_kinks(rng, r)
            target = random_soft(rng, r, spec.class_count)
            grads, _ = backward_reference(spec, params, feats, target)

            def ref_loss(p):
                diff = forward(spec, p, feats) - target
                return float((diff * diff).sum())

            numeric = central_diff(ref_loss, params)
            assert vec_rel_error(param_arrays(grads), numeric) < 1e-4
        assert time.monotonic() - start < 30.0


# ---------------------------------------------------------------------------
# 3. degeneration equivalences


def test_criterion_3_degenerations():
    with criterion(3, "rho=0 == local SGD bitwise; saturated mean == global mean; "
                      "update linear in rho"):
        start = time.monotonic()

        # (a) rho=0 trajectories bit-identical to communication-free training
        base = dict(
            clients=4,
            dataset={"samples": 400, "class_count": 2},
            hyper={"distill_weight": 0.0, "learning_rate": 0.2, "comm_interval": 5,
                   "batch_size": 8, "total_iterations": 30},
            server={"quality_set_size": 4, "neighbor_count": 2},
            eval_every=5,
        )
        rec_s, states_s = run_simulation(toy_config(protocol="SQMD", **base), return_states=True)
        rec_i, states_i = run_simulation(toy_config(protocol="I-SGD", **base), return_states=True)
        for cid in states_s:
            for a, b in zip(param_arrays(states_s[cid].params), param_arrays(states_i[cid].params)):
                assert np.array_equal(a, b)
        view = lambda rec: [(r["round"], r["client_id"], r["accuracy"]) for r in rec.metrics]
        assert view(rec_s) == view(rec_i)

        # (b) quality filter off + saturated k: neighbor mean == global mean
        rng = np.random.default_rng(11)
        n, r, c = 5, 12, 3
        reference = ReferenceSet(rng.normal(size=(r, 2)), one_hot(np.arange(r) % c, c))
        server = Server(reference, ServerConfig(quality_set_size=n, neighbor_count=n,
                                                quality_filter=False), np.random.default_rng(0))
        specs = [ModelSpec((2, 6, 3), spec_id=f"m{i}") for i in range(n)]
        models = [(specs[i], init_params(specs[i], np.random.default_rng(100 + i))) for i in range(n)]
        for cid in range(n):
            server.register_client(cid)
        for rnd in range(10):
            for cid, (spec, params) in enumerate(models):
                server.receive_messenger(generate_messenger(spec, params, reference, cid, rnd))
            result = server.server_round()
            for cid in range(n):
                got = ensemble_mean(result[cid])
                others = np.mean(
                    [server.latest[m].soft_decisions for m in range(n) if m != cid], axis=0
                )
                assert np.abs(got - others).max() < 1e-12
            # drift the models so each round grades fresh messengers
            models = [
                (spec, ModelParams([w + 0.01 * rnd for w in p.weights], p.biases))
                for spec, p in models
            ]

        # (c) update linearity in the distill weight, to 1e-12
        rng = np.random.default_rng(5)
        spec = ModelSpec((2, 5, 2))
        params = init_params(spec, rng)
        batch = Batch(rng.normal(size=(6, 2)), one_hot(rng.integers(0, 2, size=6), 2))
        feats = rng.normal(size=(7, 2))
        target = random_soft(rng, 7, 2)
        local = distill_update(spec, params, batch, feats, target,
                               distill_weight=0.0, learning_rate=0.3)
        refer = distill_update(spec, params, batch, feats, target,
                               distill_weight=1.0, learning_rate=0.3)
        for rho in (0.25, 0.5, 0.8):
            mixed = distill_update(spec, params, batch, feats, target,
                                   distill_weight=rho, learning_rate=0.3)
            for m, p, l, rr in zip(param_arrays(mixed), param_arrays(params),
                                   param_arrays(local), param_arrays(refer)):
                recombined = (1.0 - rho) * (l - p) + rho * (rr - p)
                assert np.abs((m - p) - recombined).max() < 1e-12
        assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# 4. four-device disjoint-class experiment


def test_criterion_4_four_device_scenario():
    with criterion(4, "disjoint-class pairs: selective distillation keeps 100%, "
                      "full averaging does not"):
        start = time.monotonic()
        rec = run_cached(four_device_config("SQMD"))
        pairing = {"0": [1], "1": [0], "2": [3], "3": [2]}
        assert rec.comm_rounds, "expected communication rounds"
        for entry in rec.comm_rounds:
            assert entry["neighbors"] == pairing
        for row in rec.metrics:
            if row["split"] == "test":
                assert row["accuracy"] == 1.0

        fed = run_cached(four_device_config("FedMD"))
        post_comm = [r["accuracy"] for r in fed.metrics
                     if r["split"] == "test" and r["round"] >= 20]
        assert min(post_comm) < 1.0
        assert time.monotonic() - start < 120.0


# ---------------------------------------------------------------------------
# 5. sparsity trend


def test_criterion_5_sparsity_trend():
    with criterion(5, "accuracy falls from r=100% to r=1% for every protocol; "
                      "selective beats static-random groups when data is sparse"):
        start = time.monotonic()

        def seed_mean(protocol, r):
            return float(np.mean([
                run_cached(sparsity_config(protocol, s, r)).summary["accuracy"]
                for s in SEEDS
            ]))

        for protocol in ("SQMD", "FedMD", "D-Dist", "I-SGD"):
            full = seed_mean(protocol, 100.0)
            sparse = seed_mean(protocol, 1.0)
            assert full > sparse, f"{protocol}: {full:.4f} !> {sparse:.4f}"

        for r in (10.0, 1.0):
            sqmd = seed_mean("SQMD", r)
            ddist = seed_mean("D-Dist", r)
            assert sqmd >= ddist, f"r={r}: SQMD {sqmd:.4f} < D-Dist {ddist:.4f}"
        assert time.monotonic() - start < 600.0


# ---------------------------------------------------------------------------
# 6. asynchronous shielding


def test_criterion_6_asynchronous_shielding():
    with criterion(6, "staged joins leave incumbent neighbor maps untouched and "
                      "cost incumbents less than full averaging"):
        start = time.monotonic()
        deficits = {"SQMD": [], "FedMD": []}
        for seed in SEEDS:
            full = run_cached(async_config("SQMD", seed))
            cf_none = run_cached(async_config("SQMD", seed, join2=1000, join3=1000))
            cf_stage3 = run_cached(async_config("SQMD", seed, join3=1000))

            # incumbents' neighbor maps at both join rounds match the
            # counterfactual runs where the join never happens
            assert neighbor_maps_at(full, 60, ASYNC_STAGE1) == \
                neighbor_maps_at(cf_none, 60, ASYNC_STAGE1)
            assert neighbor_maps_at(full, 120, ASYNC_STAGE1 + ASYNC_STAGE2) == \
                neighbor_maps_at(cf_stage3, 120, ASYNC_STAGE1 + ASYNC_STAGE2)

            # scenario precondition: fresh joiners grade worse than incumbents
            incumbent_scores = scores_at(full, 60, set(ASYNC_STAGE1))
            newcomer_scores = scores_at(full, 60, set(ASYNC_STAGE2))
            assert max(incumbent_scores.values()) < min(newcomer_scores.values())

            fed_full = run_cached(async_config("FedMD", seed))
            fed_cf = run_cached(async_config("FedMD", seed, join2=1000, join3=1000))
            for proto, with_join, without_join in (
                ("SQMD", full, cf_none),
                ("FedMD", fed_full, fed_cf),
            ):
                after_without = window_acc(without_join, set(ASYNC_STAGE1), 60, 80)
                after_with = window_acc(with_join, set(ASYNC_STAGE1), 60, 80)
                deficits[proto].append(after_without - after_with)

        sqmd_drop = float(np.mean(deficits["SQMD"]))
        fed_drop = float(np.mean(deficits["FedMD"]))
        assert sqmd_drop < fed_drop, f"SQMD {sqmd_drop:.5f} !< FedMD {fed_drop:.5f}"
        assert time.monotonic() - start < 600.0


# ---------------------------------------------------------------------------
# 7. ablation ordering


def test_criterion_7_ablation_ordering():
    with criterion(7, "full protocol >= no-quality-filter and >= random-selection "
                      "ablations in seed-mean accuracy"):
        start = time.monotonic()

        def seed_mean(**kw):
            return float(np.mean([
                run_cached(ablation_config(s, **kw)).summary["accuracy"] for s in SEEDS
            ]))

        full = seed_mean()
        no_filter = seed_mean(quality_filter=False)
        random_sel = seed_mean(selection="random")
        assert full >= no_filter, f"full {full:.4f} < no-filter {no_filter:.4f}"
        assert full >= random_sel, f"full {full:.4f} < random-selection {random_sel:.4f}"
        assert time.monotonic() - start < 600.0


# ---------------------------------------------------------------------------
# 8. determinism and serialization


def test_criterion_8_determinism_and_serialization(tmp_path):
    with criterion(8, "same seed -> byte-identical run records; JSON round-trips"):
        start = time.monotonic()
        cfg = four_device_config("SQMD")
        a = run_simulation(cfg)
        b = run_simulation(cfg)
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        pa.write_text(a.to_json())
        pb.write_text(b.to_json())
        assert pa.read_bytes() == pb.read_bytes()
        parsed = RunRecord.from_dict(json.loads(pa.read_text()))
        assert parsed.to_json() == a.to_json()
        assert parsed.to_dict() == a.to_dict()
        assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# 9. heterogeneity of the experiment populations


def test_criterion_9_heterogeneous_populations():
    with criterion(9, "experiments 4-7 each run three distinct architectures"):
        configs = [
            four_device_config("SQMD"),
            sparsity_config("SQMD", SEEDS[0], 100.0),
            async_config("SQMD", SEEDS[0]),
            ablation_config(SEEDS[0]),
        ]
        for cfg in configs:
            shapes = {cfg.client_spec(cid).layer_sizes for cid in range(cfg.n_clients)}
            assert len(shapes) >= 3, f"only {len(shapes)} distinct architectures"
            record = run_cached(cfg)  # cached for the suites above; runs standalone too
            assert record.summary["accuracy"] >= 0.0
