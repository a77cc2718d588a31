"""Weight blob (de)serialization.

Layout: magic "KMLW", format version as little-endian u16, then per
dense layer the f64 little-endian W matrix row-major followed by b.
Shapes are not stored; the loading spec dictates them, so a blob saved
under one spec refuses to load under a differently-shaped one.
"""
from __future__ import annotations

import struct

import numpy as np

from kml.mlengine.engine import TrainedModel
from kml.mlengine.model import MetricsReport, ModelSpec

MAGIC = b"KMLW"
VERSION = 1


class CorruptWeights(Exception):
    pass


class SpecMismatch(Exception):
    pass


def save_weights(model: TrainedModel) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for W, b in model.weights:
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def load_weights(spec: ModelSpec, blob: bytes) -> TrainedModel:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise CorruptWeights("missing KMLW magic")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CorruptWeights(f"unsupported weight format version {version}")
    body = blob[6:]
    if len(body) % 8 != 0:
        raise CorruptWeights(f"weight body of {len(body)} bytes is not whole f64s")
    expected = sum(units * fan_in + units for units, fan_in in spec.dense_shapes())
    if len(body) != expected * 8:
        raise SpecMismatch(
            f"blob holds {len(body) // 8} parameters, spec wants {expected}"
        )
    flat = np.frombuffer(body, dtype="<f8")
    weights = []
    pos = 0
    for units, fan_in in spec.dense_shapes():
        W = flat[pos : pos + units * fan_in].reshape(units, fan_in).astype(np.float64)
        pos += units * fan_in
        b = flat[pos : pos + units].astype(np.float64)
        pos += units
        weights.append((W, b))
    return TrainedModel(spec, weights, MetricsReport())
