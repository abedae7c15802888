"""Dense feed-forward classifiers with hand-rolled backpropagation.

Clients hold models of differing depth and width, so everything here is a
pure function over explicit (spec, params) pairs. All arithmetic is float64
and every operation is deterministic, which keeps whole simulation runs
bit-reproducible from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionError, NumericError

# Floor applied to probabilities before logarithms and KL ratios.
PROB_EPS = 1e-12

_ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class ModelSpec:
    """Layer widths (input dim, hidden dims..., class count) plus the hidden
    nonlinearity. The output layer is always a softmax."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    spec_id: str = ""

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("layer_sizes needs at least an input and an output entry")
        if any(s < 1 for s in sizes):
            raise ConfigError("layer_sizes entries must all be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def class_count(self) -> int:
        return self.layer_sizes[-1]

    @property
    def layer_count(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass
class ModelParams:
    """Per-layer weight matrices and bias vectors. Layer l maps width[l] ->
    width[l+1], so weights[l] has shape (width[l], width[l+1])."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases):
            raise DimensionError("weights and biases must pair up layer by layer")
        prev = None
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
                raise DimensionError(f"inconsistent layer shapes {w.shape} / {b.shape}")
            if prev is not None and w.shape[0] != prev:
                raise DimensionError("consecutive layer widths do not chain")
            prev = w.shape[1]
        for arr in (*self.weights, *self.biases):
            if not np.all(np.isfinite(arr)):
                raise NumericError("model parameters contain non-finite values")

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights) + sum(b.size for b in self.biases))

    def matches(self, spec: ModelSpec) -> bool:
        if len(self.weights) != spec.layer_count:
            return False
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (spec.layer_sizes[i], spec.layer_sizes[i + 1]):
                return False
            if b.shape != (spec.layer_sizes[i + 1],):
                return False
        return True


@dataclass
class Gradients:
    """Same layout as ModelParams; produced by the backward operations."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class Batch:
    """A feature matrix with optional one-hot labels (absent for reference
    use, where ground truth stays on the server)."""

    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError("features must be a 2-D matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.ndim != 2 or self.labels.shape[0] != self.features.shape[0]:
                raise DimensionError("labels must align with features row for row")
            if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
                raise ValueError("labels must be one-hot with entries in {0, 1}")
            if not np.all(self.labels.sum(axis=1) == 1.0):
                raise ValueError("each label row must contain exactly one 1")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        labels = None if self.labels is None else self.labels[idx]
        return Batch(self.features[idx], labels)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Integer class vector -> (N, n_classes) one-hot float64 matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform Glorot weights in +-sqrt(6/(fan_in+fan_out)), zero biases.

    Draws come from the caller's generator so per-client streams stay
    independent and runs are reproducible bit for bit.
    """
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return ModelParams(weights, biases)


def _check_forward_inputs(spec: ModelSpec, params: ModelParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise DimensionError(
            f"feature shape {features.shape} incompatible with input dim {spec.input_dim}"
        )
    if not params.matches(spec):
        raise DimensionError("parameter shapes do not match the model spec")
    if not np.all(np.isfinite(features)):
        raise NumericError("features contain non-finite values")
    return features


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    # Shift-stable softmax, then clamp-and-renormalize so no entry is ever an
    # exact 0 or 1; downstream logs and KL ratios rely on this floor.
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    p = np.clip(p, PROB_EPS, None)
    return p / p.sum(axis=1, keepdims=True)


def _cached_forward(
    spec: ModelSpec, params: ModelParams, features: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Forward pass keeping what backprop needs: per-layer pre-activations
    and per-layer inputs (inputs[l] feeds layer l)."""
    pre: list[np.ndarray] = []
    inputs: list[np.ndarray] = [features]
    a = features
    last = spec.layer_count - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        pre.append(z)
        if layer < last:
            a = np.maximum(z, 0.0)
            inputs.append(a)
    return pre, inputs, _softmax_rows(pre[-1])


def forward(spec: ModelSpec, params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Class-probability matrix (B x C); every row sums to 1."""
    features = _check_forward_inputs(spec, params, features)
    _, _, probs = _cached_forward(spec, params, features)
    return probs


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Summed negative log-likelihood of the true classes over the batch,
    with probabilities clamped to [PROB_EPS, 1] before the log."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise DimensionError(f"probs shape {probs.shape} != labels shape {labels.shape}")
    p_true = np.clip((probs * labels).sum(axis=1), PROB_EPS, 1.0)
    return float(-np.log(p_true).sum())


def _backprop(
    spec: ModelSpec,
    params: ModelParams,
    pre: list[np.ndarray],
    inputs: list[np.ndarray],
    d_logits: np.ndarray,
) -> Gradients:
    n = spec.layer_count
    g_w: list[np.ndarray] = [np.empty(0)] * n
    g_b: list[np.ndarray] = [np.empty(0)] * n
    delta = d_logits
    for layer in range(n - 1, -1, -1):
        g_w[layer] = inputs[layer].T @ delta
        g_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (pre[layer - 1] > 0.0)
    return Gradients(g_w, g_b)


def backward_local(spec: ModelSpec, params: ModelParams, batch: Batch) -> tuple[Gradients, float]:
    """Gradient of the summed cross-entropy over a labeled batch.

    For a softmax output the logit gradient is simply probs - onehot, summed
    over the batch (no 1/B factor; callers divide by the set size).
    """
    if batch.labels is None:
        raise ContractViolation("backward_local needs a labeled batch")
    features = _check_forward_inputs(spec, params, batch.features)
    if batch.labels.shape[1] != spec.class_count:
        raise DimensionError("label width does not match the model's class count")
    pre, inputs, probs = _cached_forward(spec, params, features)
    loss = cross_entropy(probs, batch.labels)
    return _backprop(spec, params, pre, inputs, probs - batch.labels), loss


def backward_reference(
    spec: ModelSpec,
    params: ModelParams,
    ref_features: np.ndarray,
    target_mean: np.ndarray,
) -> tuple[Gradients, float]:
    """Gradient of sum_j ||probs_j - target_j||^2 over the reference rows.

    d/dprobs is 2*(probs - target); that is pushed through the softmax
    Jacobian row-wise before `_backprop` handles the affine/relu stack.
    """
    features = _check_forward_inputs(spec, params, ref_features)
    target = np.asarray(target_mean, dtype=np.float64)
    if target.shape != (features.shape[0], spec.class_count):
        raise DimensionError(
            f"target shape {target.shape} does not match reference rows x classes "
            f"({features.shape[0]}, {spec.class_count})"
        )
    if not np.allclose(target.sum(axis=1), 1.0, atol=1e-6):
        raise ContractViolation("target rows must be probability vectors")
    pre, inputs, probs = _cached_forward(spec, params, features)
    diff = probs - target
    loss = float((diff * diff).sum())
    d_probs = 2.0 * diff
    d_logits = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))
    return _backprop(spec, params, pre, inputs, d_logits), loss


def distill_update(
    spec: ModelSpec,
    params: ModelParams,
    batch: Batch | None,
    ref_features: np.ndarray | None,
    neighbor_mean: np.ndarray | None,
    *,
    distill_weight: float,
    learning_rate: float,
    local_count: int | None = None,
    ref_count: int | None = None,
) -> ModelParams:
    """One combined parameter step: local-loss descent blended with the pull
    toward the neighbor ensemble on the reference set.

        new = params - (1-rho)*lr/M * grad(local CE sum)
                     - rho*lr/R     * grad(summed squared disagreement)

    where rho is the distill weight. The squared-norm gradient already
    carries a factor of 2, which accounts for the conventional 2*lr*rho/R
    coefficient written with the half-gradient. rho=0 degenerates to plain
    gradient descent on the local loss; rho=1 ignores local data entirely.
    `local_count`/`ref_count` default to the sizes of the supplied arrays.
    """
    if not 0.0 <= distill_weight <= 1.0:
        raise ConfigError("distill_weight must lie in [0, 1]")
    if learning_rate <= 0.0:
        raise ConfigError("learning_rate must be positive")

    new_w = [w.copy() for w in params.weights]
    new_b = [b.copy() for b in params.biases]

    if distill_weight < 1.0:
        if batch is None:
            raise ContractViolation("a local batch is required when distill_weight < 1")
        grads, _ = backward_local(spec, params, batch)
        m = batch.size if local_count is None else int(local_count)
        coef = (1.0 - distill_weight) * learning_rate / m
        for w, b, gw, gb in zip(new_w, new_b, grads.weights, grads.biases):
            w -= coef * gw
            b -= coef * gb

    if distill_weight > 0.0:
        if neighbor_mean is None or ref_features is None:
            raise ContractViolation("neighbor_mean and ref_features are required when distill_weight > 0")
        grads, _ = backward_reference(spec, params, ref_features, neighbor_mean)
        r = len(ref_features) if ref_count is None else int(ref_count)
        coef = distill_weight * learning_rate / r
        for w, b, gw, gb in zip(new_w, new_b, grads.weights, grads.biases):
            w -= coef * gw
            b -= coef * gb

    return ModelParams(new_w, new_b)
