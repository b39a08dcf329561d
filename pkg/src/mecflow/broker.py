"""In-process topic-based publish/subscribe broker.

Carries raw ingest, processed output, and downlink broadcasts between the
components of one edge node.  Topic convention: ``mec/<mec_id>/raw/<datatype>``
for producer-side samples, ``mec/<mec_id>/proc/<datatype>`` for pipeline
output, ``downlink/<datatype>`` for device notifications.

There is no retention and no QoS: a subscription only sees messages
published after it was created, and a full subscription queue drops its
oldest message (counted) rather than ever blocking a publisher.
"""

from __future__ import annotations

import itertools
import re
import threading
from collections import deque
from typing import Any

SEGMENT_RE = re.compile(r"^[a-z0-9-]{1,64}$")
WILDCARD = "+"
MAX_SEGMENTS = 8
DEFAULT_QUEUE_CAPACITY = 10_000


class InvalidTopic(ValueError):
    """Topic or pattern violates the segment grammar."""


def validate_topic(topic: str, allow_wildcard: bool = False) -> list[str]:
    """Split and validate a topic; returns its segments."""
    segments = topic.split("/")
    if not 1 <= len(segments) <= MAX_SEGMENTS:
        raise InvalidTopic(f"topic must have 1..{MAX_SEGMENTS} segments: {topic!r}")
    for seg in segments:
        if seg == WILDCARD:
            if not allow_wildcard:
                raise InvalidTopic(f"wildcard not allowed here: {topic!r}")
        elif not SEGMENT_RE.match(seg):
            raise InvalidTopic(f"bad segment {seg!r} in {topic!r}")
    return segments


def topic_matches(pattern: str, topic: str) -> bool:
    """Segment-wise match; ``+`` matches exactly one segment."""
    p_segs = pattern.split("/")
    t_segs = topic.split("/")
    if len(p_segs) != len(t_segs):
        return False
    return all(p == WILDCARD or p == t for p, t in zip(p_segs, t_segs))


class Subscription:
    """Single-consumer FIFO view of all topics matching one pattern."""

    def __init__(self, sub_id: str, pattern: str, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.id = sub_id
        self.pattern = pattern
        self.capacity = capacity
        self.dropped = 0
        self._queue: deque[tuple[str, Any]] = deque()
        self._cond = threading.Condition()

    def __len__(self) -> int:
        with self._cond:
            return len(self._queue)

    def _offer(self, topic: str, message: Any) -> bool:
        """Enqueue; on overflow drop the oldest entry. Returns False on a drop."""
        with self._cond:
            dropped = False
            if len(self._queue) >= self.capacity:
                self._queue.popleft()
                self.dropped += 1
                dropped = True
            self._queue.append((topic, message))
            self._cond.notify()
            return not dropped

    def pop(self, timeout: float | None = 0.0) -> tuple[str, Any] | None:
        """Next (topic, message), or None if none arrives within ``timeout``.

        ``timeout=0`` polls; ``timeout=None`` blocks until a message arrives.
        """
        with self._cond:
            if not self._queue and timeout != 0.0:
                self._cond.wait(timeout)
            if not self._queue:
                return None
            return self._queue.popleft()

    def drain(self, limit: int | None = None) -> list[tuple[str, Any]]:
        """Remove and return up to ``limit`` queued (topic, message) pairs."""
        with self._cond:
            n = len(self._queue) if limit is None else min(limit, len(self._queue))
            return [self._queue.popleft() for _ in range(n)]


class Broker:
    """Thread-safe fan-out hub with per-topic counters."""

    def __init__(self, default_capacity: int = DEFAULT_QUEUE_CAPACITY):
        self._default_capacity = default_capacity
        self._lock = threading.Lock()
        self._subs: dict[str, Subscription] = {}
        self._ids = itertools.count(1)
        self._published: dict[str, int] = {}
        self._delivered: dict[str, int] = {}
        self._dropped: dict[str, int] = {}

    def subscribe(self, pattern: str, capacity: int | None = None) -> Subscription:
        validate_topic(pattern, allow_wildcard=True)
        with self._lock:
            sub = Subscription(f"s{next(self._ids)}", pattern,
                               capacity or self._default_capacity)
            self._subs[sub.id] = sub
            return sub

    def unsubscribe(self, sub_id: str) -> bool:
        with self._lock:
            return self._subs.pop(sub_id, None) is not None

    def publish(self, topic: str, message: Any) -> int:
        """Deliver to every currently matching subscription; returns the count.

        Zero subscribers is not an error.  The matching set is snapshotted
        atomically, so the returned count is exact for this publish.
        """
        validate_topic(topic)
        with self._lock:
            targets = [s for s in self._subs.values() if topic_matches(s.pattern, topic)]
            self._published[topic] = self._published.get(topic, 0) + 1
        # The new message is always enqueued; overflow evicts that queue's
        # oldest entry instead, so a slow subscriber only hurts itself.
        drops = sum(0 if sub._offer(topic, message) else 1 for sub in targets)
        with self._lock:
            self._delivered[topic] = self._delivered.get(topic, 0) + len(targets)
            if drops:
                self._dropped[topic] = self._dropped.get(topic, 0) + drops
        return len(targets)

    def broadcast_downlink(self, datatype: str, notification: Any) -> int:
        """Publish an alarm/notification to ``downlink/<datatype>`` subscribers.

        No pipeline is involved: downlink messages go straight to devices.
        """
        if not SEGMENT_RE.match(datatype):
            raise InvalidTopic(f"bad datatype segment {datatype!r}")
        return self.publish(f"downlink/{datatype}", notification)

    def subscription_count(self) -> int:
        with self._lock:
            return len(self._subs)

    def metrics(self) -> dict[str, dict[str, int]]:
        """Per-topic published/delivered/dropped counters (snapshot)."""
        with self._lock:
            topics = set(self._published) | set(self._delivered) | set(self._dropped)
            return {
                t: {
                    "published": self._published.get(t, 0),
                    "delivered": self._delivered.get(t, 0),
                    "dropped": self._dropped.get(t, 0),
                }
                for t in sorted(topics)
            }
