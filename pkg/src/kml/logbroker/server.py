"""TCP front of the broker: one thread per client session.

Consumer-group membership is tied to the session: when a connection
drops, every member it joined is removed and the group rebalances, so a
crashed consumer frees its partitions without explicit leave calls.
"""
from __future__ import annotations

import argparse
import base64
import logging
import os
import socketserver
import threading
from typing import Any, Optional

from kml.logbroker import wire
from kml.logbroker.log import (
    BrokerError,
    LogBroker,
    RetentionPolicy,
)

log = logging.getLogger(__name__)

DEFAULT_ADDR = "127.0.0.1:9372"


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        broker: LogBroker = self.server.broker  # type: ignore[attr-defined]
        joined: set[tuple[str, str]] = set()
        try:
            while True:
                try:
                    header, payload = wire.recv_frame(self.request)
                except (wire.ConnectionClosed, ConnectionResetError, OSError):
                    return
                corr = header.get("corr", 0)
                try:
                    resp, out = self._dispatch(broker, header, payload, joined)
                    resp["ok"] = True
                except BrokerError as exc:
                    resp = {"ok": False, "error": type(exc).__name__, "message": str(exc)}
                    out = b""
                except Exception as exc:  # malformed request
                    log.exception("request failed")
                    resp = {"ok": False, "error": "BadRequest", "message": str(exc)}
                    out = b""
                resp["corr"] = corr
                try:
                    wire.send_frame(self.request, resp, out)
                except (BrokenPipeError, ConnectionResetError, OSError):
                    return
        finally:
            for group_id, member_id in joined:
                broker.leave_group(group_id, member_id)

    def _dispatch(
        self,
        broker: LogBroker,
        header: dict[str, Any],
        payload: bytes,
        joined: set[tuple[str, str]],
    ) -> tuple[dict[str, Any], bytes]:
        op = header.get("op")
        if op == "create_topic":
            retention = RetentionPolicy(
                retention_bytes=header.get("retention_bytes"),
                retention_ms=header.get("retention_ms", RetentionPolicy().retention_ms),
            )
            meta = broker.create_topic(header["name"], header["partitions"], retention)
            return {"name": meta.name, "partitions": meta.partitions}, b""
        if op == "produce":
            key: Optional[bytes] = None
            if header.get("key") is not None:
                key = base64.b64decode(header["key"])
            partition, offset = broker.produce(
                header["topic"],
                payload,
                key=key,
                partition=header.get("partition"),
                timestamp_ms=header.get("timestamp_ms"),
            )
            return {"partition": partition, "offset": offset}, b""
        if op == "fetch":
            records = broker.fetch(
                header["topic"], header["partition"], header["offset"], header["max_records"]
            )
            return {"count": len(records)}, wire.encode_batch(records)
        if op == "join":
            assignment = broker.join_group(header["group"], header["member"], header["topic"])
            joined.add((header["group"], header["member"]))
            return {"assignment": assignment}, b""
        if op == "assignment":
            topic, parts = broker.group_assignment(header["group"], header["member"])
            return {"topic": topic, "assignment": parts}, b""
        if op == "poll":
            tagged = broker.poll(header["group"], header["member"], header["max_records"])
            tags = [{"topic": t, "partition": p} for t, p, _ in tagged]
            return {"count": len(tagged), "records": tags}, wire.encode_batch(
                [rec for _, _, rec in tagged]
            )
        if op == "commit":
            broker.commit(
                header["group"], header["member"], header["topic"],
                header["partition"], header["offset"],
            )
            return {}, b""
        if op == "leave":
            broker.leave_group(header["group"], header["member"])
            joined.discard((header["group"], header["member"]))
            return {}, b""
        if op == "offsets":
            base, end = broker.offsets(header["topic"], header["partition"])
            return {"base": base, "end": end}, b""
        if op == "topic_meta":
            meta = broker.topic_meta(header["topic"])
            return {"name": meta.name, "partitions": meta.partitions}, b""
        if op == "list_topics":
            return {
                "topics": [
                    {"name": m.name, "partitions": m.partitions} for m in broker.list_topics()
                ]
            }, b""
        if op == "enforce_retention":
            purged = broker.enforce_retention(header.get("now_ms"))
            return {"purged": {f"{t}:{p}": n for (t, p), n in purged.items()}}, b""
        raise ValueError(f"unknown op {op!r}")


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class BrokerServer:
    """Serves a LogBroker over the framed TCP protocol."""

    def __init__(self, addr: str = DEFAULT_ADDR, broker: Optional[LogBroker] = None) -> None:
        self.broker = broker or LogBroker()
        host, port = parse_addr(addr)
        self._server = _TCPServer((host, port), _Handler)
        self._server.broker = self.broker  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None
        self._retention_thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self, retention_interval_s: float = 5.0) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        if retention_interval_s > 0:
            self._retention_thread = threading.Thread(
                target=self._retention_loop, args=(retention_interval_s,), daemon=True
            )
            self._retention_thread.start()

    def _retention_loop(self, interval: float) -> None:
        while not self._stop.wait(interval):
            self.broker.enforce_retention()

    def stop(self) -> None:
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()

    def serve_forever(self, retention_interval_s: float = 5.0) -> None:
        self.start(retention_interval_s)
        assert self._thread is not None
        self._thread.join()


def main(argv: Optional[list[str]] = None) -> None:
    parser = argparse.ArgumentParser(description="Run the commit-log broker")
    parser.add_argument(
        "--addr",
        default=os.environ.get("BROKER_ADDR", DEFAULT_ADDR),
        help="listen address host:port (env BROKER_ADDR)",
    )
    parser.add_argument(
        "--retention-interval", type=float, default=5.0,
        help="seconds between retention sweeps (0 disables)",
    )
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s %(message)s")
    server = BrokerServer(args.addr)
    log.info("broker listening on %s", server.address)
    server.serve_forever(args.retention_interval)


if __name__ == "__main__":
    main()
