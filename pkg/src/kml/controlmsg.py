"""The control message: metadata announcing where a training stream lives.

Produced to the control topic after a data stream finishes, consumed by
training jobs (matched on deployment_id) and by the control logger for
replay and inference auto-configuration.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from kml.codec import InputFormat
from kml.logbroker.log import (
    MalformedOffsetSpec,
    OffsetSpec,
    format_offset_spec,
    parse_offset_spec,
)


class MalformedControlMessage(Exception):
    pass


@dataclass(frozen=True)
class ControlMessage:
    deployment_id: int
    topics: tuple[OffsetSpec, ...]
    input_format: InputFormat
    input_config: str  # JSON, as understood by codec.validate_config
    validation_rate: float
    total_msg: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "deployment_id": self.deployment_id,
                "topics": [format_offset_spec(s) for s in self.topics],
                "input_format": self.input_format.value,
                "input_config": self.input_config,
                "validation_rate": self.validation_rate,
                "total_msg": self.total_msg,
            }
        )

    def with_deployment_id(self, deployment_id: int) -> "ControlMessage":
        return ControlMessage(
            deployment_id,
            self.topics,
            self.input_format,
            self.input_config,
            self.validation_rate,
            self.total_msg,
        )


def parse_control_message(raw: bytes | str) -> ControlMessage:
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedControlMessage(f"not valid JSON: {exc}")
    if not isinstance(obj, dict):
        raise MalformedControlMessage("control message must be a JSON object")
    try:
        deployment_id = int(obj["deployment_id"])
        topics = tuple(parse_offset_spec(s) for s in obj["topics"])
        input_format = InputFormat(obj["input_format"])
        input_config = obj["input_config"]
        validation_rate = float(obj["validation_rate"])
        total_msg = int(obj["total_msg"])
    except (KeyError, TypeError, ValueError, MalformedOffsetSpec) as exc:
        raise MalformedControlMessage(f"bad field: {exc}")
    if not isinstance(input_config, str):
        raise MalformedControlMessage("input_config must be a JSON string")
    if not 0.0 <= validation_rate < 1.0:
        raise MalformedControlMessage(f"validation_rate {validation_rate} not in [0,1)")
    if total_msg < 1:
        raise MalformedControlMessage(f"total_msg must be >= 1, got {total_msg}")
    if sum(s.length for s in topics) != total_msg:
        raise MalformedControlMessage(
            f"offset spec lengths sum to {sum(s.length for s in topics)}, "
            f"total_msg is {total_msg}"
        )
    return ControlMessage(
        deployment_id, topics, input_format, input_config, validation_rate, total_msg
    )
