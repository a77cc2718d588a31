"""Declarative model and training-run descriptions.

A model is a JSON document naming an input dimension, a stack of dense
and dropout layers, a loss, and an optimizer. Validation collects every
violation before raising so a user fixes the whole spec in one round.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

ACTIVATIONS = {"relu", "sigmoid", "softmax", "linear"}
LOSSES = {"sparse_categorical_crossentropy", "binary_crossentropy", "mse"}
METRICS = {"accuracy"}
OPTIMIZERS = {"sgd", "adam"}


class InvalidSpec(Exception):
    """Raised with a semicolon-joined list of every spec violation."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "dropout"
    units: int = 0
    activation: str = "linear"
    rate: float = 0.0


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    layers: tuple[LayerSpec, ...]
    loss: str
    optimizer: OptimizerSpec
    metrics: tuple[str, ...] = ("accuracy",)

    def dense_shapes(self) -> list[tuple[int, int]]:
        """(units, fan_in) per dense layer, in network order."""
        shapes = []
        dim = self.input_dim
        for layer in self.layers:
            if layer.kind == "dense":
                shapes.append((layer.units, dim))
                dim = layer.units
        return shapes

    @property
    def output_dim(self) -> int:
        for layer in reversed(self.layers):
            if layer.kind == "dense":
                return layer.units
        return self.input_dim

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_dim": self.input_dim,
                "layers": [
                    {"kind": "dense", "units": l.units, "activation": l.activation}
                    if l.kind == "dense"
                    else {"kind": "dropout", "rate": l.rate}
                    for l in self.layers
                ],
                "loss": self.loss,
                "optimizer": {
                    "kind": self.optimizer.kind,
                    "learning_rate": self.optimizer.learning_rate,
                    "beta1": self.optimizer.beta1,
                    "beta2": self.optimizer.beta2,
                    "epsilon": self.optimizer.epsilon,
                },
                "metrics": list(self.metrics),
            }
        )


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    epochs: int = 1
    steps_per_epoch: Optional[int] = None
    shuffle: bool = True
    seed: int = 0
    validation_batch_size: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "batch_size": self.batch_size,
                "epochs": self.epochs,
                "steps_per_epoch": self.steps_per_epoch,
                "shuffle": self.shuffle,
                "seed": self.seed,
                "validation_batch_size": self.validation_batch_size,
            }
        )


@dataclass
class MetricsReport:
    training: dict[str, float] = field(default_factory=dict)
    evaluation: Optional[dict[str, float]] = None


def _parse_optimizer(obj: object, errors: list[str]) -> OptimizerSpec:
    if obj is None:
        return OptimizerSpec()
    if not isinstance(obj, dict):
        errors.append("optimizer must be an object")
        return OptimizerSpec()
    kind = obj.get("kind", "adam")
    if kind not in OPTIMIZERS:
        errors.append(f"unknown optimizer {kind!r}")
        kind = "adam"
    defaults = OptimizerSpec()
    lr = obj.get("learning_rate", defaults.learning_rate)
    beta1 = obj.get("beta1", defaults.beta1)
    beta2 = obj.get("beta2", defaults.beta2)
    eps = obj.get("epsilon", defaults.epsilon)
    if not (isinstance(lr, (int, float)) and lr > 0):
        errors.append(f"learning_rate must be > 0, got {lr!r}")
        lr = defaults.learning_rate
    for name, v in (("beta1", beta1), ("beta2", beta2)):
        if not (isinstance(v, (int, float)) and 0 < v < 1):
            errors.append(f"{name} must be in (0,1), got {v!r}")
    if not (isinstance(eps, (int, float)) and eps > 0):
        errors.append(f"epsilon must be > 0, got {eps!r}")
    return OptimizerSpec(kind, float(lr), float(beta1), float(beta2), float(eps))


def parse_model_spec(spec_json: str) -> ModelSpec:
    try:
        obj = json.loads(spec_json)
    except (json.JSONDecodeError, TypeError) as exc:
        raise InvalidSpec(f"spec is not valid JSON: {exc}")
    if not isinstance(obj, dict):
        raise InvalidSpec("spec must be a JSON object")

    errors: list[str] = []
    input_dim = obj.get("input_dim")
    if not (isinstance(input_dim, int) and input_dim >= 1):
        errors.append(f"input_dim must be an integer >= 1, got {input_dim!r}")
        input_dim = 1

    raw_layers = obj.get("layers")
    layers: list[LayerSpec] = []
    if not (isinstance(raw_layers, list) and raw_layers):
        errors.append("layers must be a non-empty list")
        raw_layers = []
    for i, l in enumerate(raw_layers):
        if not isinstance(l, dict):
            errors.append(f"layer {i} must be an object")
            continue
        kind = l.get("kind")
        if kind == "dense":
            units = l.get("units")
            act = l.get("activation", "linear")
            if not (isinstance(units, int) and units >= 1):
                errors.append(f"layer {i}: units must be an integer >= 1")
                units = 1
            if act not in ACTIVATIONS:
                errors.append(f"layer {i}: unknown activation {act!r}")
                act = "linear"
            layers.append(LayerSpec("dense", units=units, activation=act))
        elif kind == "dropout":
            rate = l.get("rate")
            if not (isinstance(rate, (int, float)) and 0 <= rate < 1):
                errors.append(f"layer {i}: dropout rate must be in [0,1)")
                rate = 0.0
            layers.append(LayerSpec("dropout", rate=float(rate)))
        else:
            errors.append(f"layer {i}: unknown kind {kind!r}")

    dense = [l for l in layers if l.kind == "dense"]
    if not dense:
        errors.append("model needs at least one dense layer")
    for l in dense[:-1]:
        if l.activation == "softmax":
            errors.append("softmax is only allowed on the final layer")

    loss = obj.get("loss")
    if loss not in LOSSES:
        errors.append(f"unknown loss {loss!r}")
        loss = "mse"
    if dense:
        last = dense[-1]
        if loss == "sparse_categorical_crossentropy":
            if last.units < 2:
                errors.append(
                    "sparse_categorical_crossentropy needs >= 2 output units"
                )
            if last.activation != "softmax":
                errors.append("sparse_categorical_crossentropy needs a softmax output")
        if loss == "binary_crossentropy":
            if last.units != 1 or last.activation != "sigmoid":
                errors.append("binary_crossentropy needs a single sigmoid output unit")

    metrics = obj.get("metrics", ["accuracy"])
    if not isinstance(metrics, list) or any(m not in METRICS for m in metrics):
        errors.append(f"metrics must be a subset of {sorted(METRICS)}")
        metrics = []

    optimizer = _parse_optimizer(obj.get("optimizer"), errors)

    if errors:
        raise InvalidSpec("; ".join(errors))
    return ModelSpec(input_dim, tuple(layers), loss, optimizer, tuple(metrics))


def parse_training_config(obj: dict) -> TrainingConfig:
    """Parse a training-config JSON object; 'verbose' is accepted and ignored."""
    known = dict(obj)
    known.pop("verbose", None)
    defaults = TrainingConfig()
    cfg = TrainingConfig(
        batch_size=known.pop("batch_size", defaults.batch_size),
        epochs=known.pop("epochs", defaults.epochs),
        steps_per_epoch=known.pop("steps_per_epoch", None),
        shuffle=known.pop("shuffle", defaults.shuffle),
        seed=known.pop("seed", defaults.seed),
        validation_batch_size=known.pop("validation_batch_size", None),
    )
    if known:
        raise InvalidSpec(f"unknown training config keys: {sorted(known)}")
    if cfg.batch_size < 1 or cfg.epochs < 1:
        raise InvalidSpec("batch_size and epochs must be >= 1")
    if cfg.steps_per_epoch is not None and cfg.steps_per_epoch < 1:
        raise InvalidSpec("steps_per_epoch must be >= 1")
    return cfg
