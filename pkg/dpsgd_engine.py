"""
DPSGD training engine.
A small fixed-architecture MLP in numpy, trained with per-sample clipping and
Gaussian noise, plus the plain regression network used as the reward
surrogate by the reinforcement-learning search.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import special

from data_collector import Dataset, VisitCounter, record_visits
from privacy_accountant import (
    DEFAULT_DELTA,
    MechanismParams,
    PrivacySpend,
    epsilon_of_run,
)
from search_space import SearchSpace, spread_indices

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "sigmoid")
OUTPUTS = ("softmax", "identity")

# Hidden layer widths per dataset profile; input and output widths come from the data.
PROFILES = {
    "mnist": (64,),
    "cifar10": (128,),
    "synthetic": (64,),
}


class ShapeMismatchError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message: str, steps_taken: int, visits: VisitCounter):
        super().__init__(message)
        self.steps_taken = steps_taken
        self.visits = visits


@dataclass(frozen=True)
class MlpModel:
    """
    Dense network. weights[l] has shape (fan_in, fan_out); hidden layers use
    `activation`, the last layer is linear followed by `output`.
    """
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    activation: str = "tanh"
    output: str = "softmax"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output {self.output!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatchError("need one bias per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ShapeMismatchError(f"layer {l}: bias shape {b.shape} vs weight {w.shape}")
            if l and self.weights[l - 1].shape[1] != w.shape[0]:
                raise ShapeMismatchError(f"layer {l}: input width does not chain")

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        """Parameters in gradient order: per layer, W row-major then b."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_params(self, flat: np.ndarray) -> "MlpModel":
        weights, biases, offset = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[offset:offset + w.size].reshape(w.shape).copy())
            offset += w.size
            biases.append(flat[offset:offset + b.size].copy())
            offset += b.size
        return replace(self, weights=tuple(weights), biases=tuple(biases))


def init_mlp(layer_sizes: Sequence[int], activation: str = "tanh", output: str = "softmax",
             rng: Optional[np.random.Generator] = None, zero: bool = False) -> MlpModel:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    if len(layer_sizes) < 2:
        raise ShapeMismatchError("an MLP needs at least input and output sizes")
    rng = rng if rng is not None else np.random.default_rng(0)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        if zero:
            weights.append(np.zeros((fan_in, fan_out)))
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(weights), tuple(biases), activation, output)


@dataclass
class ForwardCache:
    """Layer inputs (inputs[0] is the batch itself) and the final pre-output logits."""
    inputs: List[np.ndarray]
    logits: np.ndarray
    outputs: np.ndarray


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    return special.expit(z)


def _activation_slope(a: np.ndarray, activation: str) -> np.ndarray:
    """Derivative expressed through the activation's output."""
    if activation == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def forward(model: MlpModel, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Per-sample outputs (softmax probabilities or raw regression values)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != model.layer_sizes[0]:
        raise ShapeMismatchError(f"input width {x.shape[1]} != model input {model.layer_sizes[0]}")
    layer_inputs = [x]
    a = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        if l < last:
            a = _activate(z, model.activation)
            layer_inputs.append(a)
        else:
            a = z
    logits = a
    if model.output == "softmax":
        outputs = special.softmax(logits, axis=1)
    else:
        outputs = logits
    return outputs, ForwardCache(layer_inputs, logits, outputs)


def cross_entropy(cache: ForwardCache, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy in nats, computed from logits."""
    logits = cache.logits
    return special.logsumexp(logits, axis=1) - logits[np.arange(logits.shape[0]), labels]


def _backprop(model: MlpModel, cache: ForwardCache,
              delta_out: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Per-sample gradients in factored form: for each layer (inputs, deltas) with
    the gradient of sample i being outer(inputs[i], deltas[i]) for W and
    deltas[i] for b.
    """
    factors: List[Tuple[np.ndarray, np.ndarray]] = []
    delta = delta_out
    for l in range(len(model.weights) - 1, -1, -1):
        a_in = cache.inputs[l]
        factors.append((a_in, delta))
        if l:
            delta = (delta @ model.weights[l].T) * _activation_slope(a_in, model.activation)
    factors.reverse()
    return factors


def _expand(factors: List[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    batch = factors[0][0].shape[0]
    blocks = []
    for a_in, delta in factors:
        blocks.append(np.einsum("bi,bj->bij", a_in, delta).reshape(batch, -1))
        blocks.append(delta)
    return np.concatenate(blocks, axis=1)


def _check_labels(model: MlpModel, cache: ForwardCache, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (cache.logits.shape[0],):
        raise ShapeMismatchError("one label per sample required")
    if labels.size and (labels.min() < 0 or labels.max() >= model.layer_sizes[-1]):
        raise ShapeMismatchError("label outside the model's output classes")
    return labels


def _ce_output_delta(cache: ForwardCache, labels: np.ndarray) -> np.ndarray:
    delta = cache.outputs.copy()
    delta[np.arange(delta.shape[0]), labels] -= 1.0
    return delta


def per_sample_gradients(model: MlpModel, inputs: np.ndarray, labels: np.ndarray,
                         cache: Optional[ForwardCache] = None) -> np.ndarray:
    """
    Exact gradient of each sample's cross-entropy w.r.t. all parameters.

    Returns a (batch, num_params) matrix in `MlpModel.flatten` order.
    """
    if cache is None:
        _, cache = forward(model, inputs)
    labels = _check_labels(model, cache, labels)
    return _expand(_backprop(model, cache, _ce_output_delta(cache, labels)))


def clip(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale to L2 norm at most clip_norm; a 2-D input is clipped row by row."""
    if not clip_norm > 0:
        raise ValueError(f"clip norm must be > 0, got {clip_norm}")
    grad = np.asarray(grad, dtype=np.float64)
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    factor = np.minimum(1.0, np.divide(clip_norm, norms, out=np.full_like(norms, np.inf), where=norms > 0))
    return grad * factor


def clipped_gradient_sum(model: MlpModel, cache: ForwardCache, labels: np.ndarray,
                         clip_norm: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Sum of per-sample clipped gradients without materializing the per-sample
    matrix. Returns (summed gradient, raw per-sample norms, clipped norms).
    Equal to clip(per_sample_gradients(...)).sum(axis=0).
    """
    labels = _check_labels(model, cache, labels)
    factors = _backprop(model, cache, _ce_output_delta(cache, labels))
    sq_norms = sum(
        np.sum(a_in * a_in, axis=1) * np.sum(delta * delta, axis=1) + np.sum(delta * delta, axis=1)
        for a_in, delta in factors
    )
    norms = np.sqrt(sq_norms)
    scale = np.minimum(1.0, np.divide(clip_norm, norms, out=np.full_like(norms, np.inf), where=norms > 0))
    blocks = []
    for a_in, delta in factors:
        scaled = delta * scale[:, None]
        blocks.append((a_in.T @ scaled).ravel())
        blocks.append(scaled.sum(axis=0))
    return np.concatenate(blocks), norms, norms * scale


def noisy_step(model: MlpModel, clipped_grads: np.ndarray, sigma: float, clip_norm: float,
               eta: float, rng: np.random.Generator, batch_size: Optional[int] = None) -> MlpModel:
    """
    One DPSGD update: -eta * (sum of clipped grads + N(0, sigma^2 C^2 I)) / batch.

    `clipped_grads` is either the (batch, P) matrix or an already summed
    vector, in which case batch_size must be given.
    """
    clipped_grads = np.asarray(clipped_grads, dtype=np.float64)
    if clipped_grads.ndim == 2:
        batch = clipped_grads.shape[0]
        total = clipped_grads.sum(axis=0)
    else:
        if batch_size is None:
            raise ValueError("batch_size required with a summed gradient")
        batch, total = batch_size, clipped_grads
    if batch < 1:
        raise ValueError("noisy_step needs a non-empty batch")
    if sigma > 0:
        total = total + rng.normal(0.0, sigma * clip_norm, size=total.shape)
    return model.with_params(model.flatten() - eta * total / batch)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    clip_norm: float
    sigma: float
    eta: float
    seed: int
    delta: float = DEFAULT_DELTA
    step_log: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.sigma > 0 and math.isinf(self.clip_norm):
            raise ValueError("noisy training needs a finite clip_norm")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")


@dataclass
class TrainOutcome:
    val_loss: float
    val_accuracy: float
    epsilon: PrivacySpend
    steps_taken: int
    visits: VisitCounter
    max_clipped_norm: float
    model: MlpModel = field(repr=False, compare=False)

    @property
    def samples_visited(self) -> int:
        return self.visits.total


def evaluate(model: MlpModel, ds: Dataset) -> Tuple[float, float]:
    """Mean cross-entropy (nats) and accuracy on a dataset."""
    probs, cache = forward(model, ds.features)
    loss = float(np.mean(cross_entropy(cache, ds.labels)))
    accuracy = float(np.mean(np.argmax(probs, axis=1) == ds.labels))
    return loss, accuracy


def train(model_init: MlpModel, train_set: Dataset, valid_set: Dataset,
          cfg: TrainConfig) -> TrainOutcome:
    """
    DPSGD over uniformly shuffled minibatches. Every epoch walks all
    ceil(n/batch) batches; the privacy accountant is fed q = batch/n.
    """
    n = len(train_set)
    if n == 0 or len(valid_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds train size {n}")

    rng = np.random.default_rng(cfg.seed)
    model = model_init
    visits = VisitCounter.for_dataset(train_set)
    step_rows = []
    max_clipped = 0.0
    steps = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            record_visits(visits, batch)
            _, cache = forward(model, train_set.features[batch])
            labels = train_set.labels[batch]
            loss = float(np.mean(cross_entropy(cache, labels)))
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at step {steps}", steps, visits)

            grad_sum, norms, clipped_norms = clipped_gradient_sum(model, cache, labels, cfg.clip_norm)
            max_clipped = max(max_clipped, float(clipped_norms.max()))
            model = noisy_step(model, grad_sum, cfg.sigma, cfg.clip_norm, cfg.eta, rng,
                               batch_size=batch.size)
            steps += 1
            if not np.isfinite(model.flatten()).all():
                raise TrainingDivergedError(f"non-finite parameters after step {steps}", steps, visits)
            if cfg.step_log:
                step_rows.append({
                    "step": steps,
                    "epoch": epoch,
                    "loss": loss,
                    "grad_norm_mean": float(norms.mean()),
                    "grad_norm_max": float(norms.max()),
                    "clipped_fraction": float(np.mean(norms > cfg.clip_norm)),
                })

    if cfg.step_log:
        pd.DataFrame(step_rows).to_csv(cfg.step_log, index=False, float_format="%.17g")

    val_loss, val_accuracy = evaluate(model, valid_set)
    if not math.isfinite(val_loss):
        raise TrainingDivergedError("non-finite validation loss", steps, visits)

    if cfg.sigma > 0:
        spend = epsilon_of_run(MechanismParams(cfg.batch_size / n, cfg.sigma, steps), cfg.delta)
    else:
        spend = PrivacySpend(epsilon=math.inf, delta=cfg.delta)
    logger.debug(f"trained {steps} steps: val_loss={val_loss:.4f} acc={val_accuracy:.4f} eps={spend.epsilon:.4f}")
    return TrainOutcome(
        val_loss=val_loss,
        val_accuracy=val_accuracy,
        epsilon=spend,
        steps_taken=steps,
        visits=visits,
        max_clipped_norm=max_clipped,
        model=model,
    )


class SurrogateFitConfig(BaseModel):
    """Plain minibatch SGD settings for the reward-regression network."""
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(300, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    hidden: int = Field(32, ge=1)
    seed: int = 0


def surrogate_init(hidden: int = 32, seed: int = 0, zero: bool = False) -> MlpModel:
    """2 -> hidden -> 1 tanh regression network."""
    return init_mlp((2, hidden, 1), activation="tanh", output="identity",
                    rng=np.random.default_rng(seed), zero=zero)


def surrogate_mse(net: MlpModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    preds, _ = forward(net, inputs)
    return float(np.mean((preds[:, 0] - np.asarray(targets, dtype=np.float64)) ** 2))


def mse_gradient(net: MlpModel, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of the mean squared error over the batch, in flatten order."""
    preds, cache = forward(net, inputs)
    residual = preds - np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    per_sample = _expand(_backprop(net, cache, 2.0 * residual))
    return per_sample.mean(axis=0)


def surrogate_fit(net: MlpModel, inputs: np.ndarray, targets: np.ndarray,
                  cfg: Optional[SurrogateFitConfig] = None) -> MlpModel:
    """
    Fit (normalized hyperparameters -> reward) pairs by minibatch SGD on MSE.
    Keeps the parameters with the lowest full-data MSE seen, so the result
    never fits worse than the starting network.
    """
    cfg = cfg or SurrogateFitConfig()
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("surrogate_fit needs at least one (input, target) pair")

    rng = np.random.default_rng(cfg.seed)
    best, best_mse = net, surrogate_mse(net, x, y)
    params = net.flatten()
    for _ in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            current = net.with_params(params)
            params = params - cfg.learning_rate * mse_gradient(current, x[batch], y[batch])
        if not np.isfinite(params).all():
            logger.warning("surrogate fit diverged; keeping best parameters so far")
            break
        candidate = net.with_params(params)
        mse = surrogate_mse(candidate, x, y)
        if mse < best_mse:
            best, best_mse = candidate, mse
    return best


def surrogate_predict_grid(net: MlpModel, space: SearchSpace,
                           resolution: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Predicted reward over the lattice (or an evenly spaced sub-lattice):
    rows follow sigma, columns follow eta.
    """
    n_sigma, n_eta = space.shape
    rows, cols = resolution or (n_sigma, n_eta)
    sigma_idx = spread_indices(n_sigma, min(rows, n_sigma))
    eta_idx = spread_indices(n_eta, min(cols, n_eta))
    inputs = np.array([
        space.normalize(space.point_at(i, j)) for i in sigma_idx for j in eta_idx
    ])
    preds, _ = forward(net, inputs)
    return preds[:, 0].reshape(len(sigma_idx), len(eta_idx))
