"""Inference replica: one member of a consumer group that decodes
feature records, predicts, and publishes predictions.

Commit happens strictly after the prediction is produced, so a crashed
replica's in-flight records are redelivered (at-least-once: duplicates
possible, losses not). Records that fail to decode are skipped and
counted, and their offsets committed, so one poison record cannot wedge
a partition.

Context arrives as JSON in the KAFKA_ML_INFER environment variable.
"""
from __future__ import annotations

import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from typing import Optional

import requests

from kml.codec import (
    CodecError,
    RawConfig,
    decode_raw,
    decode_structured,
    validate_config,
)
from kml.logbroker.client import BrokerClient, connect_with_retry
from kml.logbroker.log import BrokerError, RebalanceInProgress
from kml.mlengine import load_weights, parse_model_spec, predict

log = logging.getLogger(__name__)

POLL_BATCH = 100


@dataclass
class ReplicaContext:
    backend_url: str
    broker_addr: str
    inference_id: int
    replica_index: int
    result_id: int
    input_topic: str
    output_topic: str
    input_format: str
    input_config: str
    group_id: str


def _download_model(ctx: ReplicaContext):
    backend = ctx.backend_url.rstrip("/")
    for attempt in range(30):
        try:
            detail = requests.get(f"{backend}/results/{ctx.result_id}", timeout=10)
            blob = requests.get(f"{backend}/results/{ctx.result_id}/download", timeout=30)
            if detail.status_code == 200 and blob.status_code == 200:
                spec = parse_model_spec(detail.json()["model_spec"])
                return load_weights(spec, blob.content)
        except requests.ConnectionError:
            pass
        time.sleep(0.3)
    raise ConnectionError(f"could not download result {ctx.result_id} from {backend}")


def run_inference_loop(ctx: ReplicaContext, max_batches: Optional[int] = None) -> None:
    model = _download_model(ctx)
    cfg = validate_config(ctx.input_format, ctx.input_config)
    member_id = f"replica-{ctx.replica_index}"
    decode_errors = 0
    client = connect_with_retry(ctx.broker_addr)
    client.join_group(ctx.group_id, member_id, ctx.input_topic)
    log.info("replica %s joined group %s", member_id, ctx.group_id)

    batches = 0
    while max_batches is None or batches < max_batches:
        try:
            tagged = client.poll(ctx.group_id, member_id, POLL_BATCH)
        except RebalanceInProgress:
            topic, assignment = client.assignment(ctx.group_id, member_id)
            log.info("rebalanced; now assigned %s on %s", assignment, topic)
            continue
        except (BrokerError, OSError) as exc:
            log.warning("poll failed (%s); backing off and rejoining", exc)
            time.sleep(0.5)
            try:
                client.close()
                client = connect_with_retry(ctx.broker_addr)
                client.join_group(ctx.group_id, member_id, ctx.input_topic)
            except (ConnectionError, BrokerError):
                time.sleep(0.5)
            continue

        if not tagged:
            batches += 1
            time.sleep(0.05)
            continue

        high_water: dict[tuple[str, int], int] = {}
        for topic, partition, rec in tagged:
            try:
                if isinstance(cfg, RawConfig):
                    sample = decode_raw(rec.value, cfg, with_label=False)
                else:
                    sample = decode_structured(rec.value, cfg, with_label=False)
                preds = predict(model, sample.features.reshape(1, -1))
                out = {
                    "values": [float(v) for v in preds[0]],
                    "input": {"topic": topic, "partition": partition, "offset": rec.offset},
                }
                client.produce(ctx.output_topic, json.dumps(out).encode("utf-8"))
            except CodecError as exc:
                decode_errors += 1
                log.warning(
                    "skipping undecodable record %s:%s:%s (%s errors so far): %s",
                    topic, partition, rec.offset, decode_errors, exc,
                )
            high_water[(topic, partition)] = rec.offset + 1

        try:
            for (topic, partition), offset in high_water.items():
                client.commit(ctx.group_id, member_id, topic, partition, offset)
        except BrokerError as exc:
            log.warning("commit failed (%s); records will be redelivered", exc)
        batches += 1


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s inferworker %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    raw = argv[0] if argv else os.environ.get("KAFKA_ML_INFER")
    if not raw:
        print("usage: python -m kml.inferworker '<replica context JSON>' (or env KAFKA_ML_INFER)", file=sys.stderr)
        return 64
    obj = json.loads(raw)
    ctx = ReplicaContext(
        backend_url=obj["backend_url"],
        broker_addr=obj["broker_addr"],
        inference_id=obj["inference_id"],
        replica_index=obj["replica_index"],
        result_id=obj["result_id"],
        input_topic=obj["input_topic"],
        output_topic=obj["output_topic"],
        input_format=obj["input_format"],
        input_config=obj["input_config"],
        group_id=obj["group_id"],
    )
    run_inference_loop(ctx)
    return 0


if __name__ == "__main__":
    sys.exit(main())
