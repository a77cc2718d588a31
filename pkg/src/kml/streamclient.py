"""Producer-side library and `kml-stream` CLI: ingest a CSV, encode and
stream it to a data topic, emit the control message, plus send/receive
helpers for live inference and a replay shortcut.
"""
from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import click
import numpy as np
import requests

from kml.codec import (
    InputFormat,
    RawConfig,
    Sample,
    StructuredConfig,
    encode_raw,
    encode_structured,
    encode_structured_features,
    validate_config,
)
from kml.controlmsg import ControlMessage
from kml.logbroker.client import BrokerClient, connect_with_retry
from kml.logbroker.log import OffsetSpec
from kml.trainworker import split_stream

DEFAULT_CONTROL_TOPIC = "kafka-ml-control"


class IngestError(Exception):
    pass


class MissingColumn(IngestError):
    pass


class UnmappedCategory(IngestError):
    pass


class MalformedRow(IngestError):
    pass


class StreamIncomplete(Exception):
    """The broker failed mid-stream; no control message was emitted."""


@dataclass
class Dataset:
    feature_columns: list[str]
    label_column: str
    features: np.ndarray  # rows x features, float64
    labels: np.ndarray  # rows

    def __len__(self) -> int:
        return self.features.shape[0]


def ingest_csv(
    path: str,
    feature_columns: Sequence[str],
    label_column: str,
    mappings: Optional[dict[str, dict[str, float]]] = None,
) -> Dataset:
    """Read a CSV into numeric rows, applying categorical mappings.

    mappings maps column name -> {category value -> number}.
    """
    mappings = mappings or {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for col in [*feature_columns, label_column]:
            if col not in header:
                raise MissingColumn(f"column {col!r} not in CSV header {header}")
        feats, labels = [], []
        for i, row in enumerate(reader):
            values = []
            for col in [*feature_columns, label_column]:
                raw = row.get(col)
                if raw is None:
                    raise MalformedRow(f"row {i}: missing value for {col!r}")
                raw = raw.strip()
                if col in mappings:
                    if raw not in mappings[col]:
                        raise UnmappedCategory(
                            f"row {i}, column {col!r}: unmapped category {raw!r}"
                        )
                    values.append(float(mappings[col][raw]))
                else:
                    try:
                        values.append(float(raw))
                    except ValueError:
                        raise MalformedRow(
                            f"row {i}, column {col!r}: {raw!r} is not numeric "
                            "and has no mapping"
                        )
            feats.append(values[:-1])
            labels.append(values[-1])
    return Dataset(
        list(feature_columns),
        label_column,
        np.array(feats, dtype=np.float64).reshape(len(feats), len(feature_columns)),
        np.array(labels, dtype=np.float64),
    )


def standardize_features(
    features: np.ndarray, validation_rate: float
) -> np.ndarray:
    """Zero-mean unit-variance per column, statistics from the training
    portion only (the head of the stream) to avoid evaluation leakage."""
    n = features.shape[0]
    cut, _ = split_stream(list(range(n)), validation_rate)
    head = features[: len(cut)]
    mu = head.mean(axis=0)
    sd = head.std(axis=0)
    sd[sd == 0.0] = 1.0
    return (features - mu) / sd


def send_stream(
    client: BrokerClient,
    dataset: Dataset,
    topic: str,
    deployment_id: int,
    input_format: InputFormat | str,
    config_json: str,
    validation_rate: float,
    standardize: bool = False,
    control_topic: str = DEFAULT_CONTROL_TOPIC,
) -> ControlMessage:
    """Encode and produce every row in order, then emit the control message.

    The control message is only produced after the last data record is
    acknowledged; a broker failure mid-stream leaves no control message.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cfg = validate_config(input_format, config_json)
    features = dataset.features
    if standardize:
        features = standardize_features(features, validation_rate)

    produced: dict[int, list[int]] = {}
    try:
        for i in range(len(dataset)):
            sample = Sample(features[i], (features.shape[1],), [dataset.labels[i]], (1,))
            if isinstance(cfg, RawConfig):
                value = encode_raw(sample, cfg)
            else:
                value = encode_structured(sample, cfg)
            partition, offset = client.produce(topic, value)
            produced.setdefault(partition, []).append(offset)
    except (OSError, ConnectionError) as exc:
        raise StreamIncomplete(f"broker failed after {sum(map(len, produced.values()))} records: {exc}")

    specs = []
    for partition in sorted(produced):
        offsets = produced[partition]
        if offsets != list(range(offsets[0], offsets[0] + len(offsets))):
            raise StreamIncomplete(
                f"partition {partition} offsets are not contiguous; "
                "another producer interleaved with this stream"
            )
        specs.append(OffsetSpec(topic, partition, offsets[0], len(offsets)))

    msg = ControlMessage(
        deployment_id=deployment_id,
        topics=tuple(specs),
        input_format=InputFormat(input_format),
        input_config=config_json,
        validation_rate=validation_rate,
        total_msg=len(dataset),
    )
    client.produce(control_topic, msg.to_json().encode("utf-8"))
    return msg


def infer_send(
    client: BrokerClient,
    input_topic: str,
    features: np.ndarray,
    input_format: InputFormat | str,
    config_json: str,
) -> list[tuple[int, int]]:
    """Encode feature rows (no label) and produce them; returns positions."""
    cfg = validate_config(input_format, config_json)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    out = []
    for row in features:
        if isinstance(cfg, RawConfig):
            n = int(np.prod(cfg.data_reshape))
            if row.size != n:
                raise ValueError(f"expected {n} features per row, got {row.size}")
            sample = Sample(row, tuple(cfg.data_reshape), np.zeros(int(np.prod(cfg.label_shape))), tuple(cfg.label_shape))
            value = encode_raw(sample, cfg)[: cfg.data_bytes()]
        else:
            value = encode_structured_features(row, cfg)
        out.append(client.produce(input_topic, value))
    return out


def infer_recv(
    client: BrokerClient,
    output_topic: str,
    count: Optional[int] = None,
    timeout_s: float = 10.0,
    from_end: bool = False,
) -> list[dict]:
    """Tail the output topic, returning parsed prediction documents."""
    meta = client.topic_meta(output_topic)
    positions = {}
    for p in range(meta["partitions"]):
        base, end = client.offsets(output_topic, p)
        positions[p] = end if from_end else base
    out: list[dict] = []
    deadline = time.monotonic() + timeout_s
    while (count is None or len(out) < count) and time.monotonic() < deadline:
        progress = False
        for p, offset in positions.items():
            records = client.fetch(output_topic, p, offset, 100)
            for rec in records:
                try:
                    out.append(json.loads(rec.value))
                except json.JSONDecodeError:
                    pass
            if records:
                positions[p] = records[-1].offset + 1
                progress = True
        if not progress:
            time.sleep(0.05)
    return out


# ----------------------------------------------------------------------- CLI


def _parse_mappings(raw: Sequence[str]) -> dict[str, dict[str, float]]:
    """--map col=k:v,k:v ... repeated."""
    out: dict[str, dict[str, float]] = {}
    for entry in raw:
        col, _, pairs = entry.partition("=")
        if not pairs:
            raise click.BadParameter(f"bad --map entry {entry!r}; want col=k:v,...")
        table = {}
        for pair in pairs.split(","):
            k, sep, v = pair.rpartition(":")
            if not sep:
                raise click.BadParameter(f"bad --map pair {pair!r} in {entry!r}")
            table[k] = float(v)
        out[col] = table
    return out


@click.group()
def cli() -> None:
    """Stream datasets into the pipeline and talk to inference deployments."""


@cli.command()
@click.option("--csv", "csv_path", required=True, type=click.Path(exists=True))
@click.option("--features", required=True, help="comma-separated feature columns")
@click.option("--label", required=True, help="label column")
@click.option("--map", "maps", multiple=True, help="categorical mapping col=k:v,k:v")
@click.option("--deployment", required=True, type=int)
@click.option("--topic", required=True)
@click.option("--format", "fmt", type=click.Choice(["raw", "structured"]), default="raw")
@click.option("--config", "config_json", required=True, help="input_config JSON")
@click.option("--validation-rate", type=float, default=0.2)
@click.option("--standardize", is_flag=True)
@click.option("--broker", envvar="BROKER_ADDR", default="127.0.0.1:9372")
@click.option("--control-topic", envvar="CONTROL_TOPIC", default=DEFAULT_CONTROL_TOPIC)
@click.option("--create-topic", "create", is_flag=True, help="create the data topic if missing")
@click.option("--partitions", type=int, default=1, help="partitions when creating the topic")
def send(csv_path, features, label, maps, deployment, topic, fmt, config_json,
         validation_rate, standardize, broker, control_topic, create, partitions):
    """Stream a CSV to a data topic and emit the control message."""
    dataset = ingest_csv(csv_path, features.split(","), label, _parse_mappings(maps))
    client = connect_with_retry(broker)
    if create and not client.has_topic(topic):
        client.create_topic(topic, partitions)
    msg = send_stream(
        client, dataset, topic, deployment,
        InputFormat(fmt.upper()), config_json, validation_rate,
        standardize=standardize, control_topic=control_topic,
    )
    click.echo(json.dumps(json.loads(msg.to_json()), indent=2))


@cli.command("infer-send")
@click.option("--topic", required=True)
@click.option("--format", "fmt", type=click.Choice(["raw", "structured"]), default="raw")
@click.option("--config", "config_json", required=True)
@click.option("--values", required=True, help="semicolon-separated rows of comma-separated numbers")
@click.option("--broker", envvar="BROKER_ADDR", default="127.0.0.1:9372")
def infer_send_cmd(topic, fmt, config_json, values, broker):
    """Encode feature rows and send them to an inference input topic."""
    rows = np.array([[float(v) for v in row.split(",")] for row in values.split(";")])
    client = connect_with_retry(broker)
    positions = infer_send(client, topic, rows, InputFormat(fmt.upper()), config_json)
    for partition, offset in positions:
        click.echo(f"sent {topic}:{partition}:{offset}")


@cli.command("infer-recv")
@click.option("--topic", required=True)
@click.option("--count", type=int, default=None, help="stop after this many predictions")
@click.option("--timeout", type=float, default=10.0)
@click.option("--from-end", is_flag=True, help="skip predictions already in the topic")
@click.option("--broker", envvar="BROKER_ADDR", default="127.0.0.1:9372")
def infer_recv_cmd(topic, count, timeout, from_end, broker):
    """Tail an inference output topic, printing prediction JSON lines."""
    client = connect_with_retry(broker)
    start = time.monotonic()
    got = infer_recv(client, topic, count=count, timeout_s=timeout, from_end=from_end)
    elapsed = time.monotonic() - start
    for doc in got:
        click.echo(json.dumps(doc))
    click.echo(f"# {len(got)} predictions in {elapsed:.3f}s", err=True)


@cli.command()
@click.option("--datastream", required=True, type=int)
@click.option("--deployment", required=True, type=int)
@click.option("--backend", envvar="BACKEND_ADDR", default="127.0.0.1:8085")
def replay(datastream, deployment, backend):
    """Re-send a logged control message to another deployment."""
    url = f"http://{backend}/datastreams/{datastream}/replay"
    resp = requests.post(url, json={"deployment_id": deployment}, timeout=30)
    if resp.status_code == 200:
        click.echo(f"replayed datastream {datastream} to deployment {deployment}")
    else:
        doc = resp.json()
        click.echo(f"error: {doc.get('error')}: {doc.get('message')}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    cli()
