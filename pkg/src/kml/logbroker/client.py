"""Socket client for the broker wire protocol.

One BrokerClient holds one TCP session. Calls are serialized with a lock
so a client instance can be shared across threads; workers that need
parallel sessions open one client each (group membership is per session).
"""
from __future__ import annotations

import base64
import socket
import threading
import time
from typing import Any, Optional

from kml.logbroker import log as broker_log
from kml.logbroker import wire
from kml.logbroker.log import BrokerError, Record, RetentionPolicy

_ERROR_TYPES: dict[str, type[BrokerError]] = {
    cls.__name__: cls
    for cls in (
        broker_log.DuplicateTopic,
        broker_log.InvalidName,
        broker_log.UnknownTopic,
        broker_log.PartitionOutOfRange,
        broker_log.OffsetPurged,
        broker_log.UnknownMember,
        broker_log.RebalanceInProgress,
        broker_log.NotAssigned,
        broker_log.MalformedOffsetSpec,
    )
}


class BrokerClient:
    def __init__(self, addr: str, connect_timeout: float = 5.0) -> None:
        host, _, port = addr.rpartition(":")
        self._sock = socket.create_connection((host or "127.0.0.1", int(port)), connect_timeout)
        self._sock.settimeout(None)
        self._lock = threading.Lock()
        self._corr = 0

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "BrokerClient":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def _call(self, header: dict[str, Any], payload: bytes = b"") -> tuple[dict[str, Any], bytes]:
        with self._lock:
            self._corr += 1
            header["corr"] = self._corr
            wire.send_frame(self._sock, header, payload)
            resp, out = wire.recv_frame(self._sock)
        if not resp.get("ok"):
            err = _ERROR_TYPES.get(resp.get("error", ""), BrokerError)
            raise err(resp.get("message", resp.get("error", "broker error")))
        return resp, out

    # ------------------------------------------------------------------- ops

    def create_topic(
        self, name: str, partitions: int, retention: RetentionPolicy = RetentionPolicy()
    ) -> None:
        self._call(
            {
                "op": "create_topic",
                "name": name,
                "partitions": partitions,
                "retention_bytes": retention.retention_bytes,
                "retention_ms": retention.retention_ms,
            }
        )

    def produce(
        self,
        topic: str,
        value: bytes,
        key: Optional[bytes] = None,
        partition: Optional[int] = None,
        timestamp_ms: Optional[int] = None,
    ) -> tuple[int, int]:
        header: dict[str, Any] = {"op": "produce", "topic": topic}
        if key is not None:
            header["key"] = base64.b64encode(key).decode("ascii")
        if partition is not None:
            header["partition"] = partition
        if timestamp_ms is not None:
            header["timestamp_ms"] = timestamp_ms
        resp, _ = self._call(header, value)
        return resp["partition"], resp["offset"]

    def fetch(self, topic: str, partition: int, offset: int, max_records: int) -> list[Record]:
        _, payload = self._call(
            {
                "op": "fetch",
                "topic": topic,
                "partition": partition,
                "offset": offset,
                "max_records": max_records,
            }
        )
        return wire.decode_batch(payload)

    def join_group(self, group: str, member: str, topic: str) -> list[int]:
        resp, _ = self._call({"op": "join", "group": group, "member": member, "topic": topic})
        return resp["assignment"]

    def assignment(self, group: str, member: str) -> tuple[str, list[int]]:
        resp, _ = self._call({"op": "assignment", "group": group, "member": member})
        return resp["topic"], resp["assignment"]

    def poll(self, group: str, member: str, max_records: int) -> list[tuple[str, int, Record]]:
        resp, payload = self._call(
            {"op": "poll", "group": group, "member": member, "max_records": max_records}
        )
        records = wire.decode_batch(payload)
        return [
            (tag["topic"], tag["partition"], rec)
            for tag, rec in zip(resp["records"], records)
        ]

    def commit(self, group: str, member: str, topic: str, partition: int, offset: int) -> None:
        self._call(
            {
                "op": "commit",
                "group": group,
                "member": member,
                "topic": topic,
                "partition": partition,
                "offset": offset,
            }
        )

    def leave_group(self, group: str, member: str) -> None:
        self._call({"op": "leave", "group": group, "member": member})

    def offsets(self, topic: str, partition: int) -> tuple[int, int]:
        resp, _ = self._call({"op": "offsets", "topic": topic, "partition": partition})
        return resp["base"], resp["end"]

    def topic_meta(self, topic: str) -> dict[str, Any]:
        resp, _ = self._call({"op": "topic_meta", "topic": topic})
        return {"name": resp["name"], "partitions": resp["partitions"]}

    def has_topic(self, topic: str) -> bool:
        try:
            self.topic_meta(topic)
            return True
        except broker_log.UnknownTopic:
            return False

    def list_topics(self) -> list[dict[str, Any]]:
        resp, _ = self._call({"op": "list_topics"})
        return resp["topics"]

    def enforce_retention(self, now_ms: Optional[int] = None) -> dict[str, int]:
        resp, _ = self._call({"op": "enforce_retention", "now_ms": now_ms})
        return resp["purged"]


def connect_with_retry(
    addr: str, attempts: int = 30, delay: float = 0.2
) -> BrokerClient:
    """Connect to a broker that may still be starting up."""
    last: Optional[Exception] = None
    for _ in range(attempts):
        try:
            return BrokerClient(addr)
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise ConnectionError(f"broker at {addr} unreachable: {last}")
