from kml.logbroker.log import (
    BrokerError,
    DuplicateTopic,
    InvalidName,
    LogBroker,
    MalformedOffsetSpec,
    NotAssigned,
    OffsetPurged,
    OffsetSpec,
    PartitionOutOfRange,
    RebalanceInProgress,
    Record,
    RetentionPolicy,
    TopicMeta,
    UnknownMember,
    UnknownTopic,
    format_offset_spec,
    parse_offset_spec,
)
from kml.logbroker.client import BrokerClient
from kml.logbroker.server import BrokerServer

__all__ = [
    "BrokerClient",
    "BrokerError",
    "BrokerServer",
    "DuplicateTopic",
    "InvalidName",
    "LogBroker",
    "MalformedOffsetSpec",
    "NotAssigned",
    "OffsetPurged",
    "OffsetSpec",
    "PartitionOutOfRange",
    "RebalanceInProgress",
    "Record",
    "RetentionPolicy",
    "TopicMeta",
    "UnknownMember",
    "UnknownTopic",
    "format_offset_spec",
    "parse_offset_spec",
]
