"""Binary record codecs for training and inference streams.

Two formats: RAW (one fixed-dtype tensor plus a reshape, label appended)
and STRUCTURED (named fields encoded fixed-width in schema order, the
stand-in for a full Avro implementation). Numeric fields are
little-endian; string lengths are 4-byte big-endian to match the wire
protocol's length fields. Features always precede the label within a
record, so the feature prefix of a training record decodes unchanged on
the inference path.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np


class CodecError(Exception):
    pass


class LengthMismatch(CodecError):
    pass


class ShapeMismatch(CodecError):
    pass


class UnknownFieldType(CodecError):
    pass


class MalformedConfig(CodecError):
    pass


class InputFormat(str, Enum):
    RAW = "RAW"
    STRUCTURED = "STRUCTURED"


_RAW_DTYPES: dict[str, np.dtype] = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "u8": np.dtype("u1"),
}

_FIELD_TYPES = {"f32", "f64", "i32", "i64", "string"}
_FIELD_STRUCT = {"f32": "<f", "f64": "<d", "i32": "<i", "i64": "<q"}


@dataclass(frozen=True)
class RawConfig:
    data_type: str
    data_reshape: tuple[int, ...]
    label_type: str
    label_shape: tuple[int, ...]

    def data_bytes(self) -> int:
        return _RAW_DTYPES[self.data_type].itemsize * int(np.prod(self.data_reshape))

    def label_bytes(self) -> int:
        return _RAW_DTYPES[self.label_type].itemsize * int(np.prod(self.label_shape))


@dataclass(frozen=True)
class RecordSchema:
    fields: tuple[tuple[str, str], ...]  # (name, type) in layout order


@dataclass(frozen=True)
class StructuredConfig:
    data_scheme: RecordSchema
    label_scheme: RecordSchema


@dataclass
class Sample:
    """Decoded in-memory form: flat f64 vectors plus their shapes."""

    features: np.ndarray
    feature_shape: tuple[int, ...]
    label: Optional[np.ndarray] = None
    label_shape: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1)
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.float64).reshape(-1)


# ------------------------------------------------------------------------ RAW


def encode_raw(sample: Sample, cfg: RawConfig) -> bytes:
    n_feat = int(np.prod(cfg.data_reshape))
    n_label = int(np.prod(cfg.label_shape))
    if sample.features.size != n_feat:
        raise ShapeMismatch(
            f"features have {sample.features.size} elements, config wants {n_feat}"
        )
    if sample.label is None or sample.label.size != n_label:
        raise ShapeMismatch(
            f"label has {0 if sample.label is None else sample.label.size} "
            f"elements, config wants {n_label}"
        )
    feats = sample.features.astype(_RAW_DTYPES[cfg.data_type]).tobytes()
    label = sample.label.astype(_RAW_DTYPES[cfg.label_type]).tobytes()
    return feats + label


def decode_raw(value: bytes, cfg: RawConfig, with_label: bool = True) -> Sample:
    fb, lb = cfg.data_bytes(), cfg.label_bytes()
    expected = fb + lb if with_label else fb
    if with_label:
        if len(value) != expected:
            raise LengthMismatch(f"expected {expected} bytes, got {len(value)}")
    elif len(value) not in (fb, fb + lb):
        raise LengthMismatch(
            f"expected {fb} or {fb + lb} bytes for feature decode, got {len(value)}"
        )
    feats = np.frombuffer(value, dtype=_RAW_DTYPES[cfg.data_type], count=int(np.prod(cfg.data_reshape)))
    feats = feats.astype(np.float64)
    if not with_label:
        return Sample(feats, tuple(cfg.data_reshape))
    label = np.frombuffer(value, dtype=_RAW_DTYPES[cfg.label_type], offset=fb)
    return Sample(feats, tuple(cfg.data_reshape), label.astype(np.float64), tuple(cfg.label_shape))


# ----------------------------------------------------------------- STRUCTURED


def encode_record(values: Sequence, schema: RecordSchema) -> bytes:
    """Encode one schema-ordered record of python values (numbers or str)."""
    if len(values) != len(schema.fields):
        raise ShapeMismatch(
            f"{len(values)} values for a {len(schema.fields)}-field scheme"
        )
    parts = []
    for v, (name, ftype) in zip(values, schema.fields):
        if ftype == "string":
            if not isinstance(v, str):
                raise UnknownFieldType(f"field {name!r} wants a string, got {type(v).__name__}")
            raw = v.encode("utf-8")
            parts.append(struct.pack(">I", len(raw)) + raw)
        elif ftype in ("i32", "i64"):
            parts.append(struct.pack(_FIELD_STRUCT[ftype], int(round(float(v)))))
        else:
            parts.append(struct.pack(_FIELD_STRUCT[ftype], float(v)))
    return b"".join(parts)


def decode_record(value: bytes, schema: RecordSchema, pos: int = 0) -> tuple[list, int]:
    """Decode one schema-ordered record starting at pos; returns (values, end)."""
    out: list = []
    for _, ftype in schema.fields:
        if ftype == "string":
            if pos + 4 > len(value):
                raise LengthMismatch("truncated string length")
            (slen,) = struct.unpack_from(">I", value, pos)
            pos += 4
            if pos + slen > len(value):
                raise LengthMismatch("truncated string body")
            out.append(value[pos : pos + slen].decode("utf-8"))
            pos += slen
            continue
        size = struct.calcsize(_FIELD_STRUCT[ftype])
        if pos + size > len(value):
            raise LengthMismatch(f"truncated {ftype} field")
        (v,) = struct.unpack_from(_FIELD_STRUCT[ftype], value, pos)
        pos += size
        out.append(float(v))
    return out, pos


def _encode_fields(values: np.ndarray, schema: RecordSchema) -> bytes:
    if any(ftype == "string" for _, ftype in schema.fields):
        raise UnknownFieldType(
            "string fields cannot be encoded from numeric samples; map them first"
        )
    return encode_record(list(values), schema)


def _decode_fields(value: bytes, pos: int, schema: RecordSchema) -> tuple[list[float], int]:
    # strings are carried in the record but never enter feature vectors
    values, pos = decode_record(value, schema, pos)
    return [v for v in values if not isinstance(v, str)], pos


def encode_structured(sample: Sample, cfg: StructuredConfig) -> bytes:
    if sample.label is None:
        raise ShapeMismatch("structured training encode requires a label")
    return _encode_fields(sample.features, cfg.data_scheme) + _encode_fields(
        sample.label, cfg.label_scheme
    )


def encode_structured_features(features: np.ndarray, cfg: StructuredConfig) -> bytes:
    """Feature-only record for the inference input topic."""
    return _encode_fields(np.asarray(features, dtype=np.float64).reshape(-1), cfg.data_scheme)


def decode_structured(value: bytes, cfg: StructuredConfig, with_label: bool = True) -> Sample:
    feats, pos = _decode_fields(value, 0, cfg.data_scheme)
    if not with_label:
        return Sample(np.array(feats), (len(feats),))
    label, pos = _decode_fields(value, pos, cfg.label_scheme)
    if pos != len(value):
        raise LengthMismatch(f"{len(value) - pos} trailing bytes after label fields")
    return Sample(np.array(feats), (len(feats),), np.array(label), (len(label),))


# --------------------------------------------------------------------- config


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise MalformedConfig(msg)


def _parse_schema(obj: object, which: str) -> RecordSchema:
    _require(isinstance(obj, dict) and "fields" in obj, f"{which} must have 'fields'")
    raw_fields = obj["fields"]  # type: ignore[index]
    _require(isinstance(raw_fields, list) and raw_fields, f"{which} fields must be non-empty")
    fields = []
    seen = set()
    for f in raw_fields:
        _require(
            isinstance(f, dict) and "name" in f and "type" in f,
            f"{which} field entries need name and type",
        )
        name, ftype = f["name"], f["type"]
        _require(isinstance(name, str) and name, f"{which} field name must be non-empty")
        _require(name not in seen, f"duplicate field name {name!r} in {which}")
        seen.add(name)
        if ftype not in _FIELD_TYPES:
            raise MalformedConfig(f"unknown field type {ftype!r} in {which}")
        fields.append((name, ftype))
    return RecordSchema(tuple(fields))


def validate_config(fmt: Union[InputFormat, str], config_json: str) -> Union[RawConfig, StructuredConfig]:
    try:
        fmt = InputFormat(fmt)
    except ValueError:
        raise MalformedConfig(f"unknown input format {fmt!r}")
    try:
        cfg = json.loads(config_json)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedConfig(f"config is not valid JSON: {exc}")
    _require(isinstance(cfg, dict), "config must be a JSON object")

    if fmt is InputFormat.RAW:
        for key in ("data_type", "data_reshape", "label_type", "label_shape"):
            _require(key in cfg, f"missing key {key!r}")
        for key in ("data_type", "label_type"):
            _require(cfg[key] in _RAW_DTYPES, f"unknown type {cfg[key]!r} for {key}")
        for key in ("data_reshape", "label_shape"):
            shape = cfg[key]
            _require(
                isinstance(shape, list) and shape and all(isinstance(d, int) and d >= 1 for d in shape),
                f"{key} must be a non-empty list of integers >= 1",
            )
        return RawConfig(
            cfg["data_type"], tuple(cfg["data_reshape"]), cfg["label_type"], tuple(cfg["label_shape"])
        )

    for key in ("data_scheme", "label_scheme"):
        _require(key in cfg, f"missing key {key!r}")
    return StructuredConfig(
        _parse_schema(cfg["data_scheme"], "data_scheme"),
        _parse_schema(cfg["label_scheme"], "label_scheme"),
    )
