"""In-process commit log: topics, partitions, retention, consumer groups.

All public methods are linearized under a single broker lock; at desk
scale the contention is negligible and the semantics are easy to audit.
Retention is per-record: purging advances a partition's base offset but
never renumbers surviving records.
"""
from __future__ import annotations

import re
import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

DEFAULT_RETENTION_MS = 604_800_000  # 7 days

_TOPIC_NAME_RE = re.compile(r"^[a-zA-Z0-9._-]+$")


class BrokerError(Exception):
    """Base class for all broker-side failures."""


class DuplicateTopic(BrokerError):
    pass


class InvalidName(BrokerError):
    pass


class UnknownTopic(BrokerError):
    pass


class PartitionOutOfRange(BrokerError):
    pass


class OffsetPurged(BrokerError):
    """Requested offset lies below the retained base: the stream expired."""


class UnknownMember(BrokerError):
    pass


class RebalanceInProgress(BrokerError):
    """Membership changed; the caller must re-read its assignment."""


class NotAssigned(BrokerError):
    pass


class MalformedOffsetSpec(BrokerError):
    pass


@dataclass(frozen=True)
class Record:
    offset: int
    timestamp_ms: int
    key: Optional[bytes]
    value: bytes


@dataclass(frozen=True)
class RetentionPolicy:
    retention_bytes: Optional[int] = None
    retention_ms: Optional[int] = DEFAULT_RETENTION_MS


@dataclass(frozen=True)
class TopicMeta:
    name: str
    partitions: int
    retention: RetentionPolicy


@dataclass(frozen=True)
class OffsetSpec:
    topic: str
    partition: int
    offset: int
    length: int


def format_offset_spec(spec: OffsetSpec) -> str:
    return f"{spec.topic}:{spec.partition}:{spec.offset}:{spec.length}"


def parse_offset_spec(s: str) -> OffsetSpec:
    parts = s.rsplit(":", 3)
    if len(parts) != 4 or not parts[0]:
        raise MalformedOffsetSpec(f"bad offset spec: {s!r}")
    topic = parts[0]
    if ":" in topic or not _TOPIC_NAME_RE.match(topic):
        raise MalformedOffsetSpec(f"bad topic in offset spec: {s!r}")
    try:
        partition, offset, length = (int(p) for p in parts[1:])
    except ValueError:
        raise MalformedOffsetSpec(f"non-numeric field in offset spec: {s!r}")
    if partition < 0 or offset < 0 or length < 0:
        raise MalformedOffsetSpec(f"negative field in offset spec: {s!r}")
    return OffsetSpec(topic, partition, offset, length)


class _Partition:
    def __init__(self) -> None:
        self.base_offset = 0
        self.records: deque[Record] = deque()
        self.byte_size = 0

    @property
    def end_offset(self) -> int:
        return self.base_offset + len(self.records)

    def append(self, timestamp_ms: int, key: Optional[bytes], value: bytes) -> int:
        offset = self.end_offset
        self.records.append(Record(offset, timestamp_ms, key, value))
        self.byte_size += len(value) + (len(key) if key else 0)
        return offset

    def purge_head(self) -> None:
        rec = self.records.popleft()
        self.byte_size -= len(rec.value) + (len(rec.key) if rec.key else 0)
        self.base_offset += 1


@dataclass
class _Topic:
    meta: TopicMeta
    partitions: list[_Partition]
    round_robin: int = 0


@dataclass
class _Member:
    group_id: str
    member_id: str
    topic: str
    synced_generation: int = 0


class _Group:
    def __init__(self, group_id: str) -> None:
        self.group_id = group_id
        self.members: dict[str, _Member] = {}
        self.generation = 0
        # (topic, partition) -> committed offset
        self.committed: dict[tuple[str, int], int] = {}
        # (topic, partition) -> member_id
        self.assignment: dict[tuple[str, int], str] = {}


class LogBroker:
    """The broker core, directly embeddable or served over TCP."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._topics: dict[str, _Topic] = {}
        self._groups: dict[str, _Group] = {}

    # ------------------------------------------------------------------ topics

    def create_topic(
        self, name: str, partitions: int, retention: RetentionPolicy = RetentionPolicy()
    ) -> TopicMeta:
        if not name or not _TOPIC_NAME_RE.match(name):
            raise InvalidName(f"invalid topic name {name!r}")
        if partitions < 1:
            raise InvalidName(f"partition count must be >= 1, got {partitions}")
        with self._lock:
            if name in self._topics:
                raise DuplicateTopic(f"topic {name!r} already exists")
            meta = TopicMeta(name, partitions, retention)
            self._topics[name] = _Topic(meta, [_Partition() for _ in range(partitions)])
            return meta

    def topic_meta(self, name: str) -> TopicMeta:
        with self._lock:
            return self._get_topic(name).meta

    def list_topics(self) -> list[TopicMeta]:
        with self._lock:
            return [t.meta for t in self._topics.values()]

    def has_topic(self, name: str) -> bool:
        with self._lock:
            return name in self._topics

    def _get_topic(self, name: str) -> _Topic:
        topic = self._topics.get(name)
        if topic is None:
            raise UnknownTopic(f"unknown topic {name!r}")
        return topic

    def _get_partition(self, name: str, partition: int) -> _Partition:
        topic = self._get_topic(name)
        if not 0 <= partition < len(topic.partitions):
            raise PartitionOutOfRange(
                f"partition {partition} out of range for topic {name!r} "
                f"({len(topic.partitions)} partitions)"
            )
        return topic.partitions[partition]

    # ---------------------------------------------------------------- produce

    def produce(
        self,
        topic: str,
        value: bytes,
        key: Optional[bytes] = None,
        partition: Optional[int] = None,
        timestamp_ms: Optional[int] = None,
    ) -> tuple[int, int]:
        """Append one record; returns (partition, offset)."""
        ts = int(time.time() * 1000) if timestamp_ms is None else timestamp_ms
        with self._lock:
            t = self._get_topic(topic)
            if partition is None:
                if key is not None:
                    partition = zlib.crc32(key) % t.meta.partitions
                else:
                    partition = t.round_robin % t.meta.partitions
                    t.round_robin += 1
            part = self._get_partition(topic, partition)
            offset = part.append(ts, key, value)
            return partition, offset

    def fetch(
        self, topic: str, partition: int, offset: int, max_records: int
    ) -> list[Record]:
        if offset < 0:
            raise OffsetPurged(f"negative offset {offset}")
        with self._lock:
            part = self._get_partition(topic, partition)
            if offset < part.base_offset:
                raise OffsetPurged(
                    f"offset {offset} below retained base {part.base_offset} "
                    f"for {topic}:{partition}"
                )
            start = offset - part.base_offset
            if start >= len(part.records):
                return []
            return [part.records[i] for i in range(start, min(start + max_records, len(part.records)))]

    def offsets(self, topic: str, partition: int) -> tuple[int, int]:
        """Returns (base_offset, end_offset) of the retained window."""
        with self._lock:
            part = self._get_partition(topic, partition)
            return part.base_offset, part.end_offset

    # -------------------------------------------------------------- retention

    def enforce_retention(self, now_ms: Optional[int] = None) -> dict[tuple[str, int], int]:
        if now_ms is None:
            now_ms = int(time.time() * 1000)
        purged: dict[tuple[str, int], int] = {}
        with self._lock:
            for name, topic in self._topics.items():
                policy = topic.meta.retention
                for idx, part in enumerate(topic.partitions):
                    count = 0
                    if policy.retention_ms is not None:
                        cutoff = now_ms - policy.retention_ms
                        while part.records and part.records[0].timestamp_ms < cutoff:
                            part.purge_head()
                            count += 1
                    if policy.retention_bytes is not None:
                        while part.records and part.byte_size > policy.retention_bytes:
                            part.purge_head()
                            count += 1
                    purged[(name, idx)] = count
        return purged

    # ----------------------------------------------------------------- groups

    def _group(self, group_id: str) -> _Group:
        group = self._groups.get(group_id)
        if group is None:
            group = _Group(group_id)
            self._groups[group_id] = group
        return group

    def _rebalance(self, group: _Group) -> None:
        """Round-robin partitions over sorted member ids, per topic."""
        group.generation += 1
        group.assignment = {}
        by_topic: dict[str, list[str]] = {}
        for member in group.members.values():
            by_topic.setdefault(member.topic, []).append(member.member_id)
        for topic, member_ids in by_topic.items():
            member_ids.sort()
            n_parts = self._topics[topic].meta.partitions
            for p in range(n_parts):
                group.assignment[(topic, p)] = member_ids[p % len(member_ids)]

    def join_group(self, group_id: str, member_id: str, topic: str) -> list[int]:
        with self._lock:
            self._get_topic(topic)
            group = self._group(group_id)
            group.members[member_id] = _Member(group_id, member_id, topic)
            self._rebalance(group)
            group.members[member_id].synced_generation = group.generation
            return self._member_partitions(group, member_id, topic)

    def leave_group(self, group_id: str, member_id: str) -> None:
        with self._lock:
            group = self._groups.get(group_id)
            if group is None or member_id not in group.members:
                return
            del group.members[member_id]
            self._rebalance(group)

    def group_assignment(self, group_id: str, member_id: str) -> tuple[str, list[int]]:
        """Returns (topic, assigned partitions); marks the member as synced."""
        with self._lock:
            group, member = self._get_member(group_id, member_id)
            member.synced_generation = group.generation
            return member.topic, self._member_partitions(group, member_id, member.topic)

    def _get_member(self, group_id: str, member_id: str) -> tuple[_Group, _Member]:
        group = self._groups.get(group_id)
        if group is None or member_id not in group.members:
            raise UnknownMember(f"member {member_id!r} not in group {group_id!r}")
        return group, group.members[member_id]

    def _member_partitions(self, group: _Group, member_id: str, topic: str) -> list[int]:
        return sorted(
            p for (t, p), m in group.assignment.items() if t == topic and m == member_id
        )

    def poll(
        self, group_id: str, member_id: str, max_records: int
    ) -> list[tuple[str, int, Record]]:
        """Records past the committed offsets on this member's partitions.

        Returned entries are (topic, partition, record). Committed offsets
        below a purged base are silently advanced to the base.
        """
        with self._lock:
            group, member = self._get_member(group_id, member_id)
            if member.synced_generation < group.generation:
                member.synced_generation = group.generation
                raise RebalanceInProgress(
                    f"group {group_id!r} rebalanced; re-read assignment"
                )
            out: list[tuple[str, int, Record]] = []
            for partition in self._member_partitions(group, member_id, member.topic):
                if len(out) >= max_records:
                    break
                part = self._get_partition(member.topic, partition)
                committed = group.committed.get((member.topic, partition), part.base_offset)
                committed = max(committed, part.base_offset)
                for rec in self.fetch(
                    member.topic, partition, committed, max_records - len(out)
                ):
                    out.append((member.topic, partition, rec))
            return out

    def commit(
        self, group_id: str, member_id: str, topic: str, partition: int, offset: int
    ) -> None:
        """Monotonically raise the committed offset for an owned partition."""
        with self._lock:
            group, _ = self._get_member(group_id, member_id)
            owner = group.assignment.get((topic, partition))
            if owner != member_id:
                raise NotAssigned(
                    f"member {member_id!r} does not own {topic}:{partition}"
                )
            key = (topic, partition)
            group.committed[key] = max(group.committed.get(key, 0), offset)
