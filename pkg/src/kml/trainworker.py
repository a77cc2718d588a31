"""Training job worker: fetch the model spec, wait for a matching control
message, read the addressed stream slice, train, evaluate, upload.

The job is a pure function of (spec, control message, training config):
it always rescans the control topic from the earliest retained offset
and refetches the whole slice, so a crashed-and-restarted job produces
bit-identical weights.

Context arrives as JSON in the KAFKA_ML_JOB environment variable (or as
the single CLI argument). KML_CRASH_POINT / KML_CRASH_TIMES /
KML_CRASH_MARKER inject crashes for fault-tolerance tests.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import requests

from kml.codec import (
    CodecError,
    InputFormat,
    RawConfig,
    Sample,
    decode_raw,
    decode_structured,
    validate_config,
)
from kml.controlmsg import ControlMessage, MalformedControlMessage, parse_control_message
from kml.logbroker.client import BrokerClient, connect_with_retry
from kml.logbroker.log import OffsetPurged, OffsetSpec, format_offset_spec
from kml.mlengine import init_params, evaluate, parse_model_spec, parse_training_config, save_weights, train

log = logging.getLogger(__name__)

FETCH_BATCH = 500


class StreamExpired(Exception):
    pass


class DecodeError(Exception):
    pass


@dataclass
class JobContext:
    backend_url: str
    broker_addr: str
    control_topic: str
    deployment_id: int
    model_id: int
    training_config: dict


def split_stream(samples: Sequence, validation_rate: float) -> tuple[list, list]:
    """Head of the stream trains, tail evaluates; rate 0 keeps everything."""
    if not 0.0 <= validation_rate < 1.0:
        raise ValueError(f"validation_rate {validation_rate} not in [0,1)")
    n = len(samples)
    cut = math.ceil((1.0 - validation_rate) * n)
    return list(samples[:cut]), list(samples[cut:])


def _maybe_crash(point: str) -> None:
    """Fault injection: crash at a named point a limited number of times."""
    if os.environ.get("KML_CRASH_POINT") != point:
        return
    times = int(os.environ.get("KML_CRASH_TIMES", "1"))
    marker = os.environ.get("KML_CRASH_MARKER")
    count = 0
    if marker and os.path.exists(marker):
        count = int(open(marker).read() or "0")
    if count >= times:
        return
    if marker:
        with open(marker, "w") as f:
            f.write(str(count + 1))
    log.warning("fault injection: crashing at %s (count %s)", point, count + 1)
    os._exit(1)


def _backoff_request(method: str, url: str, attempts: int = 8, **kwargs):
    delay = 0.1
    for attempt in range(attempts):
        try:
            resp = requests.request(method, url, timeout=30, **kwargs)
            if resp.status_code < 500:
                return resp
        except requests.ConnectionError:
            pass
        time.sleep(delay)
        delay = min(delay * 2, 2.0)
    raise ConnectionError(f"backend unreachable after {attempts} attempts: {url}")


def _await_control_message(client: BrokerClient, ctx: JobContext) -> ControlMessage:
    """Scan the control topic from the earliest retained offset until a
    message for our deployment shows up."""
    positions: dict[int, int] = {}
    while True:
        meta = client.topic_meta(ctx.control_topic)
        progress = False
        for partition in range(meta["partitions"]):
            offset = positions.get(partition)
            if offset is None:
                offset, _ = client.offsets(ctx.control_topic, partition)
            try:
                records = client.fetch(ctx.control_topic, partition, offset, 100)
            except OffsetPurged:
                offset, _ = client.offsets(ctx.control_topic, partition)
                positions[partition] = offset
                continue
            for rec in records:
                offset = rec.offset + 1
                try:
                    msg = parse_control_message(rec.value)
                except MalformedControlMessage:
                    continue
                if msg.deployment_id == ctx.deployment_id:
                    positions[partition] = offset
                    return msg
            positions[partition] = offset
            progress = progress or bool(records)
        if not progress:
            time.sleep(0.2)


def _fetch_slice(client: BrokerClient, specs: Sequence[OffsetSpec]) -> list[bytes]:
    """All record values addressed by the offset specs, in listed order."""
    values: list[bytes] = []
    total = sum(s.length for s in specs)
    for spec in specs:
        remaining = spec.length
        offset = spec.offset
        while remaining > 0:
            try:
                records = client.fetch(
                    spec.topic, spec.partition, offset, min(remaining, FETCH_BATCH)
                )
            except OffsetPurged as exc:
                raise StreamExpired(f"slice {format_offset_spec(spec)} expired: {exc}")
            if not records:
                time.sleep(0.1)  # stream may still be filling
                continue
            for rec in records:
                values.append(rec.value)
                if len(values) * 2 >= total:
                    _maybe_crash("after_half_fetch")
            offset = records[-1].offset + 1
            remaining -= len(records)
    return values


def _decode(values: list[bytes], msg: ControlMessage) -> list[Sample]:
    cfg = validate_config(msg.input_format, msg.input_config)
    samples = []
    for i, value in enumerate(values):
        try:
            if isinstance(cfg, RawConfig):
                samples.append(decode_raw(value, cfg, with_label=True))
            else:
                samples.append(decode_structured(value, cfg, with_label=True))
        except CodecError as exc:
            raise DecodeError(f"record {i} failed to decode: {exc}")
    return samples


def run_training_job(ctx: JobContext) -> int:
    backend = ctx.backend_url.rstrip("/")
    resp = _backoff_request(
        "GET",
        f"{backend}/deployments/{ctx.deployment_id}/model-spec",
        params={"model_id": ctx.model_id},
    )
    if resp.status_code != 200:
        log.error("model spec fetch failed: %s %s", resp.status_code, resp.text)
        return 1
    spec = parse_model_spec(resp.json()["spec"])
    cfg = parse_training_config(ctx.training_config)

    client = connect_with_retry(ctx.broker_addr)
    log.info("job deployment=%s model=%s awaiting control message", ctx.deployment_id, ctx.model_id)
    msg = _await_control_message(client, ctx)
    _backoff_request(
        "POST",
        f"{backend}/deployments/{ctx.deployment_id}/status/{ctx.model_id}",
        json={"state": "training"},
    )

    try:
        values = _fetch_slice(client, msg.topics)
    except StreamExpired as exc:
        log.error("%s", exc)
        return 2
    stream_hash = hashlib.sha256(b"".join(values)).hexdigest()
    try:
        samples = _decode(values, msg)
    except DecodeError as exc:
        log.error("%s", exc)
        return 3

    training, evaluation = split_stream(samples, msg.validation_rate)
    model = init_params(spec, cfg.seed)
    trained = train(model, training, cfg)
    metrics = {"training": trained.metrics.training, "stream_hash": stream_hash}
    if msg.validation_rate > 0 and evaluation:
        metrics["evaluation"] = evaluate(trained, evaluation, cfg)

    _maybe_crash("before_upload")
    blob = save_weights(trained)
    resp = _backoff_request(
        "POST",
        f"{backend}/deployments/{ctx.deployment_id}/results/{ctx.model_id}",
        data={"metrics": json.dumps(metrics)},
        files={"weights": ("weights.bin", blob, "application/octet-stream")},
    )
    if resp.status_code != 201:
        log.error("result upload failed: %s %s", resp.status_code, resp.text)
        return 4
    log.info(
        "job deployment=%s model=%s uploaded result %s",
        ctx.deployment_id, ctx.model_id, resp.json().get("id"),
    )
    client.close()
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s trainworker %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    raw = argv[0] if argv else os.environ.get("KAFKA_ML_JOB")
    if not raw:
        print("usage: python -m kml.trainworker '<job context JSON>' (or env KAFKA_ML_JOB)", file=sys.stderr)
        return 64
    obj = json.loads(raw)
    ctx = JobContext(
        backend_url=obj["backend_url"],
        broker_addr=obj["broker_addr"],
        control_topic=obj["control_topic"],
        deployment_id=obj["deployment_id"],
        model_id=obj["model_id"],
        training_config=obj.get("training_config", {}),
    )
    return run_training_job(ctx)


if __name__ == "__main__":
    sys.exit(main())
