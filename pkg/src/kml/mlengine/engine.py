"""Forward/backward passes, optimizers, and the training loop.

Everything is float64 numpy, single-threaded and reentrant: the trained
weights are a pure function of (spec, data, seed, config), which is what
makes replayed and restarted training runs bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from kml.codec import Sample
from kml.mlengine.model import LayerSpec, MetricsReport, ModelSpec, TrainingConfig

_EPS = 1e-12


class ShapeMismatch(Exception):
    pass


class InvalidLabel(Exception):
    pass


@dataclass
class TrainedModel:
    spec: ModelSpec
    weights: list[tuple[np.ndarray, np.ndarray]]  # (W units x fan_in, b units)
    metrics: MetricsReport = field(default_factory=MetricsReport)

    def copy_weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(W.copy(), b.copy()) for W, b in self.weights]


def init_params(spec: ModelSpec, seed: int) -> TrainedModel:
    """Glorot-uniform weights, zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    weights = []
    for units, fan_in in spec.dense_shapes():
        limit = math.sqrt(6.0 / (fan_in + units))
        W = rng.uniform(-limit, limit, size=(units, fan_in))
        weights.append((W, np.zeros(units)))
    return TrainedModel(spec, weights)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "linear":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if activation == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class _LayerCache:
    layer: LayerSpec
    a_in: np.ndarray
    z: Optional[np.ndarray] = None
    a_out: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None  # dropout keep-mask, already scaled


def _forward(
    model: TrainedModel,
    batch: np.ndarray,
    training_mode: bool,
    dropout_rng: Optional[np.random.Generator],
) -> list[_LayerCache]:
    if batch.ndim != 2 or batch.shape[1] != model.spec.input_dim:
        raise ShapeMismatch(
            f"batch shape {batch.shape} does not match input_dim {model.spec.input_dim}"
        )
    caches: list[_LayerCache] = []
    a = batch
    dense_idx = 0
    for layer in model.spec.layers:
        cache = _LayerCache(layer, a)
        if layer.kind == "dropout":
            if training_mode and layer.rate > 0.0 and dropout_rng is not None:
                keep = (dropout_rng.random(a.shape) >= layer.rate) / (1.0 - layer.rate)
                cache.mask = keep
                a = a * keep
            # otherwise identity
        else:
            W, b = model.weights[dense_idx]
            dense_idx += 1
            cache.z = a @ W.T + b
            a = _activate(cache.z, layer.activation)
        cache.a_out = a
        caches.append(cache)
    return caches


def forward(
    model: TrainedModel,
    batch: np.ndarray,
    training_mode: bool = False,
    seed: Optional[int] = None,
) -> list[np.ndarray]:
    """Per-layer activations; dropout is active only in training mode."""
    rng = np.random.default_rng(seed) if seed is not None else None
    batch = np.asarray(batch, dtype=np.float64)
    return [c.a_out for c in _forward(model, batch, training_mode, rng)]


def predict(model: TrainedModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch.reshape(1, -1)
    return _forward(model, batch, False, None)[-1].a_out


def _check_labels(spec: ModelSpec, labels: np.ndarray, n: int) -> np.ndarray:
    k = spec.output_dim
    if spec.loss == "sparse_categorical_crossentropy":
        y = np.asarray(labels).reshape(-1)
        if y.shape[0] != n:
            raise ShapeMismatch(f"{y.shape[0]} labels for {n} samples")
        yi = y.astype(np.int64)
        if not np.allclose(y, yi) or yi.min(initial=0) < 0 or yi.max(initial=0) >= k:
            raise InvalidLabel(f"class labels must be integers in [0, {k})")
        return yi
    if spec.loss == "binary_crossentropy":
        y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
        if y.shape[0] != n:
            raise ShapeMismatch(f"{y.shape[0]} labels for {n} samples")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise InvalidLabel("binary labels must be 0 or 1")
        return y
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(-1, 1) if k == 1 else y
    if y.shape != (n, k):
        raise ShapeMismatch(f"label shape {y.shape} does not match output ({n}, {k})")
    return y


def _loss_and_grad(
    spec: ModelSpec, preds: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    n = preds.shape[0]
    if spec.loss == "sparse_categorical_crossentropy":
        p = np.clip(preds[np.arange(n), y], _EPS, None)
        loss = float(-np.log(p).mean())
        grad = np.zeros_like(preds)
        grad[np.arange(n), y] = -1.0 / (p * n)
        return loss, grad
    if spec.loss == "binary_crossentropy":
        p = np.clip(preds, _EPS, 1.0 - _EPS)
        loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
        grad = (p - y) / (p * (1.0 - p) * n)
        return loss, grad
    diff = preds - y
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / diff.size


def _activation_backward(cache: _LayerCache, da: np.ndarray) -> np.ndarray:
    act, a = cache.layer.activation, cache.a_out
    if act == "linear":
        return da
    if act == "relu":
        return da * (cache.z > 0.0)
    if act == "sigmoid":
        return da * a * (1.0 - a)
    # softmax: dz_i = a_i * (da_i - sum_j da_j a_j)
    return a * (da - (da * a).sum(axis=1, keepdims=True))


def compute_gradients(
    model: TrainedModel,
    batch: np.ndarray,
    labels: np.ndarray,
    dropout_seed: Optional[int] = None,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], float]:
    """Analytic gradients of the mean batch loss, plus that loss.

    Dropout participates (with the mask seeded by dropout_seed) only when
    a seed is given; with no seed dropout layers are identity, which is
    what finite-difference checks need to see a deterministic function.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch.reshape(1, -1)
    y = _check_labels(model.spec, labels, batch.shape[0])
    rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None
    caches = _forward(model, batch, rng is not None, rng)
    loss, da = _loss_and_grad(model.spec, caches[-1].a_out, y)

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.weights)  # type: ignore[list-item]
    dense_idx = len(model.weights)
    for cache in reversed(caches):
        if cache.layer.kind == "dropout":
            if cache.mask is not None:
                da = da * cache.mask
            continue
        dense_idx -= 1
        dz = _activation_backward(cache, da)
        W, _ = model.weights[dense_idx]
        grads[dense_idx] = (dz.T @ cache.a_in, dz.sum(axis=0))
        da = dz @ W
    return grads, loss


@dataclass
class OptimizerState:
    t: int = 0
    m: Optional[list[tuple[np.ndarray, np.ndarray]]] = None
    v: Optional[list[tuple[np.ndarray, np.ndarray]]] = None


def optimizer_step(
    model: TrainedModel,
    grads: list[tuple[np.ndarray, np.ndarray]],
    state: OptimizerState,
) -> OptimizerState:
    """One in-place update of model.weights; returns the advanced state."""
    opt = model.spec.optimizer
    state.t += 1
    if opt.kind == "sgd":
        for (W, b), (gW, gb) in zip(model.weights, grads):
            W -= opt.learning_rate * gW
            b -= opt.learning_rate * gb
        return state
    if state.m is None:
        state.m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.weights]
        state.v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.weights]
    bc1 = 1.0 - opt.beta1**state.t
    bc2 = 1.0 - opt.beta2**state.t
    for (W, b), (gW, gb), (mW, mb), (vW, vb) in zip(model.weights, grads, state.m, state.v):
        mW *= opt.beta1
        mW += (1.0 - opt.beta1) * gW
        mb *= opt.beta1
        mb += (1.0 - opt.beta1) * gb
        vW *= opt.beta2
        vW += (1.0 - opt.beta2) * gW * gW
        vb *= opt.beta2
        vb += (1.0 - opt.beta2) * gb * gb
        W -= opt.learning_rate * (mW / bc1) / (np.sqrt(vW / bc2) + opt.epsilon)
        b -= opt.learning_rate * (mb / bc1) / (np.sqrt(vb / bc2) + opt.epsilon)
    return state


def _accuracy(spec: ModelSpec, preds: np.ndarray, y: np.ndarray) -> float:
    if spec.output_dim == 1:
        return float(((preds > 0.5).astype(np.float64) == y).mean())
    if spec.loss == "sparse_categorical_crossentropy":
        return float((preds.argmax(axis=1) == y).mean())
    return float((preds.argmax(axis=1) == np.asarray(y).argmax(axis=1)).mean())


def samples_to_arrays(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.features for s in samples]).astype(np.float64)
    y = np.stack([s.label for s in samples]).astype(np.float64)
    if y.shape[1] == 1:
        y = y[:, 0]
    return X, y


def epoch_batches(
    order: np.ndarray, batch_size: int, steps: int
) -> Iterator[np.ndarray]:
    """Index batches for one epoch, cycling through `order` when steps x
    batch_size overruns it."""
    n = len(order)
    pos = 0
    for _ in range(steps):
        if pos + batch_size <= n:
            yield order[pos : pos + batch_size]
        else:
            yield order[(pos + np.arange(batch_size)) % n]
        pos = (pos + batch_size) % n


def train(
    model: TrainedModel, samples: Sequence[Sample], cfg: TrainingConfig
) -> TrainedModel:
    """Epochs x steps of minibatch optimization; metrics from the final epoch."""
    if not samples:
        raise ShapeMismatch("cannot train on an empty sample list")
    X, labels = samples_to_arrays(samples)
    n = X.shape[0]
    out = TrainedModel(model.spec, model.copy_weights(), MetricsReport())
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    steps = cfg.steps_per_epoch or math.ceil(n / cfg.batch_size)
    want_acc = "accuracy" in model.spec.metrics

    final_losses: list[tuple[float, int]] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        last_epoch = epoch == cfg.epochs - 1
        for idx in epoch_batches(order, cfg.batch_size, steps):
            dropout_seed = int(rng.integers(2**31))
            grads, loss = compute_gradients(out, X[idx], labels[idx], dropout_seed)
            optimizer_step(out, grads, state)
            if last_epoch:
                final_losses.append((loss, len(idx)))

    total = sum(c for _, c in final_losses)
    out.metrics.training = {
        "loss": sum(l * c for l, c in final_losses) / total,
    }
    if want_acc:
        y = _check_labels(out.spec, labels, n)
        preds = predict(out, X)
        out.metrics.training["accuracy"] = _accuracy(out.spec, preds, y)
    return out


def evaluate(
    model: TrainedModel, samples: Sequence[Sample], cfg: Optional[TrainingConfig] = None
) -> dict[str, float]:
    """Loss and accuracy over all samples, dropout disabled, no mutation."""
    X, labels = samples_to_arrays(samples)
    y = _check_labels(model.spec, labels, X.shape[0])
    preds = predict(model, X)
    loss, _ = _loss_and_grad(model.spec, preds, y)
    out = {"loss": loss}
    if "accuracy" in model.spec.metrics:
        out["accuracy"] = _accuracy(model.spec, preds, y)
    return out
