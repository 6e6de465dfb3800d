"""In-process publish/subscribe with bounded, drop-oldest subscriber queues.

Publishing never waits on a consumer: a full queue loses its oldest entry.
Delivery is fan-out, every matching subscription gets its own copy.
"""
from __future__ import annotations

import collections
import re
import threading
from dataclasses import dataclass, field

_TOPIC = re.compile(r"[a-z0-9_.]+")


class InvalidTopic(ValueError):
    pass


class InvalidFilter(ValueError):
    pass


class SubscriptionClosed(RuntimeError):
    pass


def check_topic(topic: str) -> str:
    if not isinstance(topic, str) or not _TOPIC.fullmatch(topic):
        raise InvalidTopic(f"topic must match [a-z0-9_.]+, got {topic!r}")
    return topic


@dataclass(frozen=True)
class CloudEnvelope:
    topic: str
    received_ts_ms: int
    payload: bytes
    source: str = ""

    def __post_init__(self):
        check_topic(self.topic)


@dataclass(frozen=True)
class DeliveryReport:
    delivered: int
    dropped: int


class Subscription:
    """A bounded FIFO owned by one consumer.

    A filter ending in ``.`` is a prefix filter; anything else must equal
    the topic exactly.
    """

    def __init__(self, topic_filter: str, capacity: int = 1024):
        if capacity < 1:
            raise InvalidFilter("capacity must be at least 1")
        if not isinstance(topic_filter, str) or not _TOPIC.fullmatch(topic_filter):
            raise InvalidFilter(f"bad topic filter {topic_filter!r}")
        self.filter = topic_filter
        self.capacity = capacity
        self.prefix = topic_filter.endswith(".")
        self.dropped = 0
        self.received = 0
        self.closed = False
        self._q: collections.deque = collections.deque()
        self._cv = threading.Condition()

    def matches(self, topic: str) -> bool:
        return topic.startswith(self.filter) if self.prefix else topic == self.filter

    def _offer(self, env: CloudEnvelope) -> bool:
        """Enqueue; True if an older entry had to be dropped."""
        with self._cv:
            if self.closed:
                return False
            lost = len(self._q) >= self.capacity
            if lost:
                self._q.popleft()
                self.dropped += 1
            self._q.append(env)
            self.received += 1
            self._cv.notify()
            return lost

    def get(self, timeout: float | None = None) -> CloudEnvelope | None:
        """Next envelope, or None on timeout. Raises once closed and empty."""
        with self._cv:
            if not self._q and not self.closed:
                self._cv.wait(timeout)
            if self._q:
                return self._q.popleft()
            if self.closed:
                raise SubscriptionClosed(self.filter)
            return None

    def drain(self) -> list:
        with self._cv:
            out = list(self._q)
            self._q.clear()
            return out

    def __len__(self):
        with self._cv:
            return len(self._q)

    def close(self, discard: bool = False) -> None:
        with self._cv:
            self.closed = True
            if discard:
                self._q.clear()
            self._cv.notify_all()


@dataclass
class DispatcherStats:
    published: int = 0
    delivered: int = 0
    dropped: int = 0
    per_topic: dict = field(default_factory=dict)


class Dispatcher:
    def __init__(self):
        self._subs: list[Subscription] = []
        self._subs_lock = threading.Lock()
        self._topic_locks: dict[str, threading.Lock] = {}
        self.stats = DispatcherStats()
        self._stats_lock = threading.Lock()

    def subscribe(self, topic_filter: str, capacity: int = 1024) -> Subscription:
        sub = Subscription(topic_filter, capacity)
        with self._subs_lock:
            self._subs = self._subs + [sub]  # copy on write; publishers iterate a snapshot
        return sub

    def unsubscribe(self, sub: Subscription, discard: bool = False) -> None:
        with self._subs_lock:
            self._subs = [s for s in self._subs if s is not sub]
        sub.close(discard)

    @property
    def subscriptions(self) -> tuple:
        return tuple(self._subs)

    def _topic_lock(self, topic: str) -> threading.Lock:
        with self._subs_lock:
            lock = self._topic_locks.get(topic)
            if lock is None:
                lock = self._topic_locks[topic] = threading.Lock()
            return lock

    def publish(self, env: CloudEnvelope) -> DeliveryReport:
        delivered = dropped = 0
        # one publication at a time per topic keeps every subscriber's view in publish order
        with self._topic_lock(env.topic):
            for sub in self._subs:
                if sub.closed or not sub.matches(env.topic):
                    continue
                dropped += sub._offer(env)
                delivered += 1
        with self._stats_lock:
            self.stats.published += 1
            self.stats.delivered += delivered
            self.stats.dropped += dropped
            self.stats.per_topic[env.topic] = self.stats.per_topic.get(env.topic, 0) + 1
        return DeliveryReport(delivered, dropped)
