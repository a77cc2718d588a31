"""Control logger: tails the control topic and registers every control
message as a datastream entity, which later powers replay and the
auto-configuration of inference deployments. Malformed messages are
logged and skipped. The read position is persisted so a backend restart
does not re-register history.
"""
from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from typing import Optional

from kml.controlmsg import MalformedControlMessage, parse_control_message
from kml.controlplane.registry import EntityRegistry
from kml.logbroker.client import BrokerClient, connect_with_retry
from kml.logbroker.log import BrokerError, OffsetPurged, format_offset_spec

log = logging.getLogger(__name__)


class ControlLogger:
    def __init__(
        self,
        registry: EntityRegistry,
        broker_addr: str,
        control_topic: str,
        poll_interval: float = 0.2,
    ) -> None:
        self.registry = registry
        self.broker_addr = broker_addr
        self.control_topic = control_topic
        self.poll_interval = poll_interval
        self._positions_file = Path(registry.root) / "control_logger_position.json"
        self._positions: dict[str, int] = self._load_positions()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._client: Optional[BrokerClient] = None

    def _load_positions(self) -> dict[str, int]:
        if self._positions_file.exists():
            return json.loads(self._positions_file.read_text())
        return {}

    def _save_positions(self) -> None:
        self._positions_file.write_text(json.dumps(self._positions))

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
        if self._client:
            self._client.close()

    def _run(self) -> None:
        self._client = connect_with_retry(self.broker_addr)
        while not self._stop.is_set():
            try:
                if self.poll_once(self._client) == 0:
                    self._stop.wait(self.poll_interval)
            except BrokerError:
                log.exception("control logger broker error")
                self._stop.wait(1.0)
            except OSError:
                log.warning("control logger lost broker connection; reconnecting")
                try:
                    self._client = connect_with_retry(self.broker_addr)
                except ConnectionError:
                    self._stop.wait(1.0)

    def poll_once(self, client: BrokerClient) -> int:
        """One fetch across all control-topic partitions; returns records seen."""
        meta = client.topic_meta(self.control_topic)
        seen = 0
        for partition in range(meta["partitions"]):
            key = str(partition)
            offset = self._positions.get(key, 0)
            try:
                records = client.fetch(self.control_topic, partition, offset, 100)
            except OffsetPurged:
                base, _ = client.offsets(self.control_topic, partition)
                self._positions[key] = base
                continue
            for rec in records:
                self._register(rec.value, partition, rec.offset)
                offset = rec.offset + 1
            if records:
                self._positions[key] = offset
                self._save_positions()
                seen += len(records)
        return seen

    def _register(self, value: bytes, partition: int, offset: int) -> None:
        try:
            msg = parse_control_message(value)
        except MalformedControlMessage as exc:
            log.warning(
                "skipping malformed control message at %s:%s:%s: %s",
                self.control_topic, partition, offset, exc,
            )
            return
        doc = self.registry.create(
            "datastreams",
            {
                "deployment_id": msg.deployment_id,
                "topics": [format_offset_spec(s) for s in msg.topics],
                "input_format": msg.input_format.value,
                "input_config": msg.input_config,
                "validation_rate": msg.validation_rate,
                "total_msg": msg.total_msg,
                "source": {"topic": self.control_topic, "partition": partition, "offset": offset},
            },
        )
        log.info("registered datastream %s (deployment %s)", doc["id"], msg.deployment_id)
