"""Minimal MQTT 3.1.1 client (connect, publish QoS 0/1, subscribe, ping).

Implements just the protocol subset the collector and simulator need
against any standard broker, behind the same publish/subscribe contract as
the in-process bus. Not a general-purpose client: no wills, no retained
messages, no QoS 2, no TLS.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from urllib.parse import urlparse

from .bus import MessageHandler, topic_matches
from .errors import TransportError

CONNECT = 0x10
CONNACK = 0x20
PUBLISH = 0x30
PUBACK = 0x40
SUBSCRIBE = 0x80
SUBACK = 0x90
PINGREQ = 0xC0
PINGRESP = 0xD0
DISCONNECT = 0xE0


def _encode_length(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _encode_string(text: str) -> bytes:
    data = text.encode("utf-8")
    return struct.pack(">H", len(data)) + data


def parse_mqtt_url(url: str) -> tuple[str, int]:
    parsed = urlparse(url if "//" in url else f"mqtt://{url}")
    if parsed.scheme not in ("mqtt", "tcp", ""):
        raise TransportError(f"unsupported MQTT scheme {parsed.scheme!r}")
    return parsed.hostname or "localhost", parsed.port or 1883


class MqttClient:
    """Blocking connect; a reader thread dispatches inbound publishes to
    subscribed handlers and answers pings/QoS-1 acks."""

    def __init__(self, url: str, client_id: str, keepalive_s: int = 30, timeout_s: float = 5.0):
        host, port = parse_mqtt_url(url)
        self._lock = threading.Lock()
        self._subs: list[tuple[str, MessageHandler]] = []
        self._packet_id = 0
        self._acks: dict[int, threading.Event] = {}
        self._closed = False
        self._keepalive = keepalive_s
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout_s)
        except OSError as exc:
            raise TransportError(f"cannot reach MQTT broker at {host}:{port}: {exc}") from exc
        self._sock.settimeout(timeout_s)
        var = _encode_string("MQTT") + bytes((4, 0x02)) + struct.pack(">H", keepalive_s)
        payload = _encode_string(client_id)
        self._send_packet(CONNECT, var + payload)
        kind, body = self._read_packet()
        if kind != CONNACK or len(body) < 2 or body[1] != 0:
            raise TransportError(f"MQTT connect refused (type={kind:#x}, body={body.hex()})")
        self._sock.settimeout(0.5)
        self._reader = threading.Thread(target=self._read_loop, name="mqtt-reader", daemon=True)
        self._reader.start()
        self._pinger = threading.Thread(target=self._ping_loop, name="mqtt-ping", daemon=True)
        self._pinger.start()

    # -- wire helpers ------------------------------------------------------

    def _send_packet(self, header: int, body: bytes) -> None:
        frame = bytes((header,)) + _encode_length(len(body)) + body
        with self._lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise TransportError(f"MQTT send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        data = b""
        while len(data) < n:
            chunk = self._sock.recv(n - len(data))
            if not chunk:
                raise TransportError("MQTT connection closed by broker")
            data += chunk
        return data

    def _read_packet(self) -> tuple[int, bytes]:
        header = self._read_exact(1)[0]
        length = 0
        shift = 0
        while True:
            byte = self._read_exact(1)[0]
            length |= (byte & 0x7F) << shift
            if not byte & 0x80:
                break
            shift += 7
        return header, self._read_exact(length) if length else b""

    # -- protocol ----------------------------------------------------------

    def _next_packet_id(self) -> int:
        with self._lock:
            self._packet_id = self._packet_id % 0xFFFF + 1
            return self._packet_id

    def publish(self, topic: str, payload: bytes, qos: int = 0) -> None:
        body = _encode_string(topic)
        header = PUBLISH | (qos << 1)
        if qos:
            packet_id = self._next_packet_id()
            body += struct.pack(">H", packet_id)
            event = threading.Event()
            self._acks[packet_id] = event
        body += payload
        self._send_packet(header, body)
        if qos:
            if not event.wait(timeout=5.0):
                self._acks.pop(packet_id, None)
                raise TransportError(f"no PUBACK for packet {packet_id}")

    def subscribe(self, pattern: str, handler: MessageHandler, qos: int = 0) -> None:
        with self._lock:
            self._subs.append((pattern, handler))
        packet_id = self._next_packet_id()
        event = threading.Event()
        self._acks[packet_id] = event
        self._send_packet(SUBSCRIBE | 0x02, struct.pack(">H", packet_id) + _encode_string(pattern) + bytes((qos,)))
        if not event.wait(timeout=5.0):
            raise TransportError(f"no SUBACK for subscription {pattern!r}")

    def unsubscribe(self, pattern: str, handler: MessageHandler) -> None:
        with self._lock:
            self._subs = [(p, h) for p, h in self._subs if (p, h) != (pattern, handler)]

    def _handle_publish(self, header: int, body: bytes) -> None:
        qos = (header >> 1) & 0x03
        topic_len = struct.unpack(">H", body[:2])[0]
        topic = body[2 : 2 + topic_len].decode("utf-8")
        offset = 2 + topic_len
        if qos:
            packet_id = struct.unpack(">H", body[offset : offset + 2])[0]
            offset += 2
            self._send_packet(PUBACK, struct.pack(">H", packet_id))
        payload = body[offset:]
        with self._lock:
            targets = [h for p, h in self._subs if topic_matches(p, topic)]
        for handler in targets:
            try:
                handler(topic, payload)
            except Exception:  # noqa: BLE001
                pass

    def _read_loop(self) -> None:
        while not self._closed:
            try:
                kind, body = self._read_packet()
            except socket.timeout:
                continue
            except (TransportError, OSError):
                return
            packet_type = kind & 0xF0
            if packet_type == PUBLISH:
                self._handle_publish(kind, body)
            elif packet_type in (PUBACK, SUBACK):
                packet_id = struct.unpack(">H", body[:2])[0]
                event = self._acks.pop(packet_id, None)
                if event:
                    event.set()
            elif packet_type == PINGRESP:
                pass

    def _ping_loop(self) -> None:
        interval = max(self._keepalive / 2, 1.0)
        while not self._closed:
            time.sleep(interval)
            if self._closed:
                return
            try:
                self._send_packet(PINGREQ, b"")
            except TransportError:
                return

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._send_packet(DISCONNECT, b"")
        except TransportError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
