from .processor import TypeMismatch, process
from .sensor import BrokerLinks, HeartbeatEmitter, Publisher, VirtualSensor
from .state import (
    ABSENT,
    QUEUE_CAPACITY,
    AggregatedTuple,
    SourceQueue,
    TimedMessage,
    UnknownSource,
    VSState,
)

__all__ = [
    "ABSENT", "QUEUE_CAPACITY", "AggregatedTuple", "BrokerLinks", "HeartbeatEmitter",
    "Publisher", "SourceQueue", "TimedMessage", "TypeMismatch", "UnknownSource",
    "VSState", "VirtualSensor", "process",
]
