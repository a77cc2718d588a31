"""Framing for the broker's TCP protocol.

Frame layout: 4-byte big-endian header length H, H bytes of UTF-8 JSON
header, 4-byte big-endian payload length P, P raw payload bytes.

Record batches travel in the payload as repeated
[8B BE offset][8B BE timestamp_ms][4B BE key_len][key][4B BE value_len][value];
key_len 0 means no key.
"""
from __future__ import annotations

import json
import socket
import struct
from typing import Any, Optional

from kml.logbroker.log import Record

MAX_FRAME = 64 * 1024 * 1024


class ConnectionClosed(ConnectionError):
    pass


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionClosed()
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock: socket.socket, header: dict[str, Any], payload: bytes = b"") -> None:
    raw = json.dumps(header).encode("utf-8")
    sock.sendall(struct.pack(">I", len(raw)) + raw + struct.pack(">I", len(payload)) + payload)


def recv_frame(sock: socket.socket) -> tuple[dict[str, Any], bytes]:
    (hlen,) = struct.unpack(">I", _read_exact(sock, 4))
    if hlen > MAX_FRAME:
        raise ValueError(f"header length {hlen} exceeds frame limit")
    header = json.loads(_read_exact(sock, hlen).decode("utf-8"))
    (plen,) = struct.unpack(">I", _read_exact(sock, 4))
    if plen > MAX_FRAME:
        raise ValueError(f"payload length {plen} exceeds frame limit")
    payload = _read_exact(sock, plen)
    return header, payload


def encode_batch(records: list[Record]) -> bytes:
    parts = []
    for rec in records:
        key = rec.key or b""
        parts.append(struct.pack(">qq", rec.offset, rec.timestamp_ms))
        parts.append(struct.pack(">I", len(key)) + key)
        parts.append(struct.pack(">I", len(rec.value)) + rec.value)
    return b"".join(parts)


def decode_batch(payload: bytes) -> list[Record]:
    records = []
    pos = 0
    while pos < len(payload):
        offset, ts = struct.unpack_from(">qq", payload, pos)
        pos += 16
        (klen,) = struct.unpack_from(">I", payload, pos)
        pos += 4
        key: Optional[bytes] = payload[pos : pos + klen] if klen else None
        pos += klen
        (vlen,) = struct.unpack_from(">I", payload, pos)
        pos += 4
        value = payload[pos : pos + vlen]
        pos += vlen
        records.append(Record(offset, ts, key, value))
    return records
