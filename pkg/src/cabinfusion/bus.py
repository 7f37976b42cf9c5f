"""Publish/subscribe transport abstractions.

The collector subscribes to sensor topics and publishes fused rows through
anything satisfying the small ``publish/subscribe/unsubscribe`` contract.
``InProcessBus`` is the hermetic implementation used by tests and the
desk-scale demos; ``cabinfusion.mqtt.MqttClient`` satisfies the same
contract against a real broker.

The radar does not speak pub/sub: it is a timestamped byte stream, modeled
by ``RadarByteChannel`` in-process and by TCP/file readers in the
collector.
"""

from __future__ import annotations

import threading
from typing import Callable

MessageHandler = Callable[[str, bytes], None]
ChunkHandler = Callable[[int, bytes], None]  # (wall_ts_ms, chunk)


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT-style filter matching with '+' and '#' wildcards."""
    if pattern == topic:
        return True
    p_parts = pattern.split("/")
    t_parts = topic.split("/")
    for i, p in enumerate(p_parts):
        if p == "#":
            return True
        if i >= len(t_parts):
            return False
        if p != "+" and p != t_parts[i]:
            return False
    return len(p_parts) == len(t_parts)


class InProcessBus:
    """Thread-safe in-process pub/sub with synchronous delivery in the
    publisher's thread. Handler exceptions are isolated per subscriber."""

    def __init__(self):
        self._lock = threading.Lock()
        self._subs: list[tuple[str, MessageHandler]] = []
        self.published = 0

    def subscribe(self, pattern: str, handler: MessageHandler) -> None:
        with self._lock:
            self._subs.append((pattern, handler))

    def unsubscribe(self, pattern: str, handler: MessageHandler) -> None:
        with self._lock:
            self._subs = [(p, h) for p, h in self._subs if (p, h) != (pattern, handler)]

    def publish(self, topic: str, payload: bytes) -> None:
        with self._lock:
            targets = [h for p, h in self._subs if topic_matches(p, topic)]
            self.published += 1
        for handler in targets:
            try:
                handler(topic, payload)
            except Exception:  # noqa: BLE001 - one bad subscriber must not break the bus
                pass


class RadarByteChannel:
    """In-process stand-in for the radar serial/TCP link. The sender
    attaches the wall timestamp a real reader would stamp at receipt,
    which keeps simulated runs deterministic."""

    def __init__(self):
        self._lock = threading.Lock()
        self._receiver: ChunkHandler | None = None
        self._backlog: list[tuple[int, bytes]] = []

    def set_receiver(self, handler: ChunkHandler) -> None:
        with self._lock:
            self._receiver = handler
            backlog, self._backlog = self._backlog, []
        for wall_ts, chunk in backlog:
            handler(wall_ts, chunk)

    def send(self, wall_ts_ms: int, chunk: bytes) -> None:
        with self._lock:
            receiver = self._receiver
            if receiver is None:
                self._backlog.append((wall_ts_ms, chunk))
                return
        receiver(wall_ts_ms, chunk)
