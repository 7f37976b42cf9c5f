"""The data-fusion collector: session lifecycle, multi-transport ingestion,
the alignment -> metrics -> fusion pipeline, and fan-out to CSV, the
document store, the fused pub/sub topic, and live stream consumers.

One ingestion callback per transport feeds a single queue; one pipeline
thread owns the aligner and fusion engine, which realizes the alignment
module's determinism contract. Slow live-stream consumers are dropped
rather than allowed to back-pressure the pipeline; CSV and store writes
stay synchronous with it.
"""

from __future__ import annotations

import json
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Iterable, Iterator

from .alignment import Aligner, GridConfig, IngestResult, replay_logs
from .bus import InProcessBus, RadarByteChannel
from .errors import CabinError, ConfigError, NotFoundError, StateError, TransportError
from .fusion import FusionEngine, ReliabilityConfig, WarningConfig
from .model import (
    Annotation,
    FusedRow,
    SourceId,
    TimedRecord,
    WarningLevel,
    decode_record,
    encode_record,
    topic_for,
)
from .ocular import MetricsWindowConfig
from .persistence import CsvWriter, DocumentStore
from .radar_codec import DecoderState, decode_stream

SENSOR_SOURCES = (SourceId.RADAR, SourceId.WEARABLE, SourceId.CAMERA)

_ULID_ALPHABET = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"
_ulid_rng = Random()


def now_ms() -> int:
    return int(time.time() * 1000)


def new_session_id(ts_ms: int | None = None) -> str:
    """ULID-style sortable id: 48-bit timestamp + 80 random bits, Crockford
    base32. Contains no MQTT-reserved characters."""
    value = ((ts_ms if ts_ms is not None else now_ms()) << 80) | _ulid_rng.getrandbits(80)
    chars = []
    for _ in range(26):
        chars.append(_ULID_ALPHABET[value & 0x1F])
        value >>= 5
    return "".join(reversed(chars))


@dataclass(frozen=True)
class SourceConfig:
    kind: str  # radar: tcp-listen | file | serial | channel; wearable/camera: mqtt | bus
    host: str = "127.0.0.1"
    port: int = 0
    path: str | None = None
    url: str | None = None


@dataclass(frozen=True)
class CollectorConfig:
    storage_dir: Path
    sources: dict[SourceId, SourceConfig]
    grid: GridConfig = field(default_factory=GridConfig)
    metrics: MetricsWindowConfig = field(default_factory=MetricsWindowConfig)
    reliability: ReliabilityConfig = field(default_factory=ReliabilityConfig)
    warning: WarningConfig = field(default_factory=WarningConfig)
    control_host: str = "127.0.0.1"
    control_port: int = 8700
    calibration_n: int = 20
    subject_default: str = "anon"

    def __post_init__(self):
        if not self.sources:
            raise ConfigError("at least one source must be enabled")
        for source in self.sources:
            if source not in SENSOR_SOURCES:
                raise ConfigError(f"{source.value} is not an ingestible sensor source")

    @property
    def sensor_sources(self) -> tuple[SourceId, ...]:
        return tuple(s for s in SENSOR_SOURCES if s in self.sources)

    @staticmethod
    def from_dict(doc: dict, base_dir: Path | None = None) -> "CollectorConfig":
        storage = Path(doc.get("storage_dir", "sessions"))
        if base_dir is not None and not storage.is_absolute():
            storage = base_dir / storage
        sources: dict[SourceId, SourceConfig] = {}
        for name, entry in doc.get("sources", {}).items():
            if entry is None:
                continue
            try:
                source = SourceId(name)
            except ValueError as exc:
                raise ConfigError(f"unknown source {name!r}") from exc
            sources[source] = SourceConfig(**entry)
        grid_doc = dict(doc.get("grid", {}))
        if "staleness_ms" in grid_doc:
            grid_doc["staleness_ms"] = {SourceId(k): v for k, v in grid_doc["staleness_ms"].items()}
        metrics_doc = dict(doc.get("metrics", {}))
        if "camera_weights" in metrics_doc:
            metrics_doc["camera_weights"] = tuple(metrics_doc["camera_weights"])
        control = doc.get("control_api", {})
        try:
            return CollectorConfig(
                storage_dir=storage,
                sources=sources,
                grid=GridConfig(**grid_doc),
                metrics=MetricsWindowConfig(**metrics_doc),
                reliability=ReliabilityConfig(**doc.get("reliability", {})),
                warning=WarningConfig(**doc.get("warning", {})),
                control_host=control.get("host", "127.0.0.1"),
                control_port=control.get("port", 8700),
                calibration_n=doc.get("calibration_n", 20),
                subject_default=doc.get("session_defaults", {}).get("subject_pseudo_id", "anon"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad collector config: {exc}") from exc

    @staticmethod
    def from_file(path: str | Path) -> "CollectorConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        return CollectorConfig.from_dict(doc, base_dir=path.parent)


@dataclass
class SessionSummary:
    session_id: str
    subject_pseudo_id: str
    started_at: int
    ended_at: int
    row_count: int
    records: dict[str, int]
    late_drops: int
    frames_bad_checksum: int
    bytes_skipped: int
    annotations: int
    warning_episodes: list[dict]
    clock_offsets_ms: dict[str, int]
    clock_residuals_ms: dict[str, int]

    def to_dict(self) -> dict:
        return dict(vars(self))


class _Session:
    """Mutable state for one running session; owned by the pipeline thread
    except for counters read by status()."""

    def __init__(self, session_id: str, subject: str, config: CollectorConfig, store: DocumentStore):
        self.session_id = session_id
        self.subject = subject
        self.started_at = now_ms()
        self.ended_at: int | None = None
        self.store = store
        self.csv_path = config.storage_dir / f"{session_id}.csv"
        self.csv = CsvWriter(self.csv_path)
        self.aligner = Aligner(
            config.sensor_sources,
            grid=config.grid,
            calibration_n=config.calibration_n,
            camera_window_ms=config.metrics.perclos_window_ms,
        )
        self.engine = FusionEngine(config.metrics, config.reliability, config.warning)
        self.decoder = DecoderState()
        self.radar_seq = 0
        self.fused_seq = 0
        self.annotation_seq = 0
        self.record_counts: dict[str, int] = {s.value: 0 for s in config.sensor_sources}
        self.annotations: list[Annotation] = []
        self.last_row: FusedRow | None = None
        self.last_fresh: dict[SourceId, bool] = {}
        self.row_count = 0
        self.max_wall = 0
        self.last_arrival: dict[SourceId, float] = {}
        self.episodes: list[dict] = []
        self.devices: list = []

    def note_warning(self, row: FusedRow) -> None:
        prev = self.episodes[-1] if self.episodes else None
        current = prev["state"] if prev and prev["ended_at_ms"] is None else WarningLevel.NORMAL.value
        if row.warning.value != current:
            if prev and prev["ended_at_ms"] is None:
                prev["ended_at_ms"] = row.grid_ts_ms
            if row.warning is not WarningLevel.NORMAL:
                self.episodes.append(
                    {"state": row.warning.value, "entered_at_ms": row.grid_ts_ms, "ended_at_ms": None}
                )


class Collector:
    """Fig.-1-style workstation service. Test and demo topologies inject an
    InProcessBus and RadarByteChannel; real deployments configure MQTT and
    a TCP/serial/file radar endpoint."""

    def __init__(
        self,
        config: CollectorConfig,
        bus: InProcessBus | None = None,
        radar_channel: RadarByteChannel | None = None,
    ):
        self.config = config
        config.storage_dir.mkdir(parents=True, exist_ok=True)
        self._bus = bus
        self._radar_channel = radar_channel
        self._mqtt = None
        self._state = "idle"
        self._session: _Session | None = None
        self._store = DocumentStore(config.storage_dir)
        self._queue: queue.Queue = queue.Queue()
        self._pipeline: threading.Thread | None = None
        self._lock = threading.RLock()
        self._consumers: list[queue.Queue] = []
        self._subscriptions: list[tuple[str, object]] = []
        self._tcp_server: socket.socket | None = None
        self._closed = False
        self._wire_transports()

    # -- transports ----------------------------------------------------------

    def _pubsub_for(self, source: SourceId):
        cfg = self.config.sources.get(source)
        if cfg is None:
            return None
        if cfg.kind == "bus":
            if self._bus is None:
                raise ConfigError(f"{source.value}: bus transport requires an injected InProcessBus")
            return self._bus
        if cfg.kind == "mqtt":
            if self._mqtt is None:
                from .mqtt import MqttClient

                self._mqtt = MqttClient(cfg.url or "mqtt://localhost:1883", client_id=f"collector-{id(self):x}")
            return self._mqtt
        raise ConfigError(f"{source.value}: unsupported transport kind {cfg.kind!r}")

    def _wire_transports(self) -> None:
        radar_cfg = self.config.sources.get(SourceId.RADAR)
        if radar_cfg is None:
            return
        if radar_cfg.kind == "channel":
            if self._radar_channel is None:
                raise ConfigError("radar: channel transport requires an injected RadarByteChannel")
            self._radar_channel.set_receiver(self._on_radar_chunk)
        elif radar_cfg.kind == "tcp-listen":
            server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                server.bind((radar_cfg.host, radar_cfg.port))
            except OSError as exc:
                raise TransportError(f"radar: cannot listen on {radar_cfg.host}:{radar_cfg.port}: {exc}") from exc
            server.listen(2)
            self._tcp_server = server
            threading.Thread(target=self._tcp_accept_loop, name="radar-tcp", daemon=True).start()
        elif radar_cfg.kind in ("file", "serial"):
            pass  # opened per session in _start_radar_reader
        else:
            raise ConfigError(f"radar: unsupported transport kind {radar_cfg.kind!r}")

    @property
    def radar_port(self) -> int:
        return self._tcp_server.getsockname()[1] if self._tcp_server else 0

    def _tcp_accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, _addr = self._tcp_server.accept()
            except OSError:
                return
            threading.Thread(target=self._tcp_read_loop, args=(conn,), daemon=True).start()

    def _tcp_read_loop(self, conn: socket.socket) -> None:
        with conn:
            while not self._closed:
                try:
                    data = conn.recv(4096)
                except OSError:
                    return
                if not data:
                    return
                self._on_radar_chunk(now_ms(), data)

    def _start_radar_reader(self, session: _Session) -> None:
        """File replay of raw radar bytes: decode locally and synthesize
        wall stamps from the device clock so the timeline is preserved."""
        cfg = self.config.sources.get(SourceId.RADAR)
        if cfg is None or cfg.kind not in ("file", "serial"):
            return

        def reader() -> None:
            state = DecoderState()
            base_wall = now_ms()
            first_device: int | None = None
            try:
                with open(cfg.path, "rb") as fh:
                    while True:
                        chunk = fh.read(4096)
                        if not chunk:
                            session.decoder.frames_bad_checksum += state.frames_bad_checksum
                            session.decoder.bytes_skipped += state.bytes_skipped
                            return
                        frames, _ = decode_stream(state, chunk)
                        for frame in frames:
                            if first_device is None:
                                first_device = frame.device_ts
                            wall = base_wall + (frame.device_ts - first_device)
                            self._queue.put(("frame", wall, frame))
            except OSError as exc:
                raise TransportError(f"radar source {cfg.path}: {exc}") from exc

        threading.Thread(target=reader, name="radar-file", daemon=True).start()

    # -- ingestion callbacks ---------------------------------------------------

    def _on_radar_chunk(self, wall_ts_ms: int, chunk: bytes) -> None:
        with self._lock:
            running = self._state == "running"
        if running:
            self._queue.put(("radar", wall_ts_ms, chunk))

    def _on_record_message(self, _topic: str, payload: bytes) -> None:
        with self._lock:
            running = self._state == "running"
        if running:
            self._queue.put(("message", payload))

    def _enqueue_radar_frames(self, session: _Session, stamped_frames) -> None:
        for wall, frame in stamped_frames:
            record = TimedRecord(
                session_id=session.session_id,
                source=SourceId.RADAR,
                seq=session.radar_seq,
                device_ts_ms=frame.device_ts,
                wall_ts_ms=wall,
                payload=frame,
            )
            session.radar_seq += 1
            self._ingest(session, record)

    # -- lifecycle --------------------------------------------------------------

    def start_session(self, subject_pseudo_id: str | None = None, devices: list | None = None) -> str:
        with self._lock:
            if self._state != "idle":
                raise StateError(f"cannot start a session while {self._state}")
            if not self.config.sensor_sources:
                raise ConfigError("no sensor sources enabled")
            session_id = new_session_id()
            session = _Session(session_id, subject_pseudo_id or self.config.subject_default, self.config, self._store)
            session.devices = devices or []
            self._session = session
            self._queue = queue.Queue()  # fresh queue: no leftovers from a previous session
            self._state = "running"
        for source in (SourceId.WEARABLE, SourceId.CAMERA):
            transport = self._pubsub_for(source)
            if transport is not None:
                topic = topic_for(session_id, source)
                transport.subscribe(topic, self._on_record_message)
                self._subscriptions.append((topic, transport))
        self._start_radar_reader(session)
        self._pipeline = threading.Thread(target=self._pipeline_loop, name="pipeline", daemon=True)
        self._pipeline.start()
        self._push_status_event()
        return session_id

    def annotate(self, session_id: str, annotation: Annotation) -> None:
        with self._lock:
            session = self._session
            if session is None or session.session_id != session_id:
                raise NotFoundError(f"unknown session {session_id}")
            if self._state != "running":
                raise StateError(f"cannot annotate while {self._state}")
        record = TimedRecord(
            session_id=session_id,
            source=SourceId.ANNOTATION,
            seq=session.annotation_seq,
            device_ts_ms=annotation.ts,
            wall_ts_ms=annotation.ts,
            payload=annotation,
        )
        session.annotation_seq += 1
        session.annotations.append(annotation)
        session.store.append(record)
        self._publish_fused(record)

    def stop_session(self, session_id: str) -> SessionSummary:
        with self._lock:
            session = self._session
            if session is None or session.session_id != session_id:
                raise NotFoundError(f"unknown session {session_id}")
            if self._state != "running":
                raise StateError(f"cannot stop while {self._state}")
            self._state = "stopping"
        for topic, transport in self._subscriptions:
            transport.unsubscribe(topic, self._on_record_message)
        self._subscriptions.clear()
        self._queue.put(("stop",))
        self._pipeline.join(timeout=120.0)
        session.ended_at = now_ms()
        session.csv.close()
        self._write_meta(session)
        summary = self._summarize(session)
        with self._lock:
            self._session = None
            self._state = "idle"
        self._push_status_event()
        return summary

    def _write_meta(self, session: _Session) -> None:
        clock = session.aligner.clock
        meta = {
            "session_id": session.session_id,
            "subject_pseudo_id": session.subject,
            "started_at": session.started_at,
            "ended_at": session.ended_at,
            "devices": [[s.value if isinstance(s, SourceId) else s, m] for s, m in getattr(session, "devices", [])],
            "clock_offset_ms": {s.value: c.offset_ms for s, c in clock.items()},
            "clock_residual_ms": {s.value: c.residual_ms for s, c in clock.items()},
            "annotations": [{"ts": a.ts, "kind": a.kind, "value": a.value} for a in session.annotations],
        }
        path = self.config.storage_dir / f"{session.session_id}.meta.json"
        path.write_text(json.dumps(meta, indent=2), encoding="utf-8")

    def _summarize(self, session: _Session) -> SessionSummary:
        if session.episodes and session.episodes[-1]["ended_at_ms"] is None and session.last_row:
            session.episodes[-1]["ended_at_ms"] = session.last_row.grid_ts_ms
        clock = session.aligner.clock
        return SessionSummary(
            session_id=session.session_id,
            subject_pseudo_id=session.subject,
            started_at=session.started_at,
            ended_at=session.ended_at or now_ms(),
            row_count=session.row_count,
            records=dict(session.record_counts),
            late_drops=session.aligner.late_drops,
            frames_bad_checksum=session.decoder.frames_bad_checksum,
            bytes_skipped=session.decoder.bytes_skipped,
            annotations=len(session.annotations),
            warning_episodes=list(session.episodes),
            clock_offsets_ms={s.value: c.offset_ms for s, c in clock.items()},
            clock_residuals_ms={s.value: c.residual_ms for s, c in clock.items()},
        )

    # -- pipeline ---------------------------------------------------------------

    def _pipeline_loop(self) -> None:
        session = self._session
        while True:
            try:
                item = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            kind = item[0]
            if kind == "stop":
                for snapshot in session.aligner.drain():
                    self._emit_row(session, snapshot)
                return
            if kind == "radar":
                _, wall, chunk = item
                frames, _ = decode_stream(session.decoder, chunk)
                session.last_arrival[SourceId.RADAR] = time.monotonic()
                self._enqueue_radar_frames(session, [(wall, f) for f in frames])
            elif kind == "frame":
                _, wall, frame = item
                session.last_arrival[SourceId.RADAR] = time.monotonic()
                self._enqueue_radar_frames(session, [(wall, frame)])
            elif kind == "message":
                try:
                    record = decode_record(item[1])
                except CabinError:
                    continue
                if record.session_id != session.session_id or record.source not in session.aligner.sources:
                    continue
                session.last_arrival[record.source] = time.monotonic()
                self._ingest(session, record)
            for snapshot in session.aligner.advance(session.max_wall):
                self._emit_row(session, snapshot)

    def _ingest(self, session: _Session, record: TimedRecord) -> None:
        result = session.aligner.ingest(record)
        if result in (IngestResult.ACCEPTED, IngestResult.BUFFERED):
            session.record_counts[record.source.value] += 1
            session.max_wall = max(session.max_wall, record.wall_ts_ms)
            session.store.append(record)

    def _emit_row(self, session: _Session, snapshot) -> None:
        row = session.engine.process(snapshot)
        session.csv.write_row(row)
        session.note_warning(row)
        session.last_row = row
        session.last_fresh = dict(snapshot.fresh)
        session.row_count += 1
        fused_record = TimedRecord(
            session_id=session.session_id,
            source=SourceId.FUSED,
            seq=session.fused_seq,
            device_ts_ms=row.grid_ts_ms,
            wall_ts_ms=row.grid_ts_ms,
            payload=row,
        )
        session.fused_seq += 1
        session.store.append(fused_record)
        self._publish_fused(fused_record)
        self._push_stream_event({"event": "row", "data": json.loads(encode_record(fused_record))})

    def _publish_fused(self, record: TimedRecord) -> None:
        payload = encode_record(record).encode()
        topic = topic_for(record.session_id, SourceId.FUSED)
        for transport in {id(t): t for t in (self._bus, self._mqtt) if t is not None}.values():
            try:
                transport.publish(topic, payload)
            except CabinError:
                pass

    # -- status + streaming -------------------------------------------------------

    def status(self) -> dict:
        with self._lock:
            state = self._state
            session = self._session
        doc: dict = {"state": state, "sources": {}}
        if session is None:
            return doc
        doc["session_id"] = session.session_id
        doc["subject_pseudo_id"] = session.subject
        doc["started_at"] = session.started_at
        doc["row_count"] = session.row_count
        doc["counters"] = {
            "records": dict(session.record_counts),
            "late_drops": session.aligner.late_drops,
            "frames_bad_checksum": session.decoder.frames_bad_checksum,
            "bytes_skipped": session.decoder.bytes_skipped,
        }
        row = session.last_row
        now_mono = time.monotonic()
        for source in self.config.sensor_sources:
            seen = session.last_arrival.get(source)
            entry = {
                "last_seen_age_ms": None if seen is None else int((now_mono - seen) * 1000),
                "fresh": session.last_fresh.get(source, False),
            }
            if source is SourceId.RADAR:
                entry["reliable"] = row.radar_reliable if row else False
            doc["sources"][source.value] = entry
        if row is not None:
            doc["warning"] = row.warning.value
            doc["last_row"] = json.loads(encode_record(_row_record(session.session_id, row)))["payload"]
        else:
            doc["warning"] = WarningLevel.NORMAL.value
        return doc

    def subscribe_stream(self) -> queue.Queue:
        """Register a live consumer. The first event is a status snapshot;
        afterwards every fused row and status change is pushed in order."""
        consumer: queue.Queue = queue.Queue(maxsize=512)
        consumer.put({"event": "status", "data": self.status()})
        with self._lock:
            self._consumers.append(consumer)
        return consumer

    def unsubscribe_stream(self, consumer: queue.Queue) -> None:
        with self._lock:
            if consumer in self._consumers:
                self._consumers.remove(consumer)

    def _push_stream_event(self, event: dict) -> None:
        with self._lock:
            consumers = list(self._consumers)
        dead = []
        for consumer in consumers:
            try:
                consumer.put_nowait(event)
            except queue.Full:
                dead.append(consumer)  # slow consumer: drop it, never stall the pipeline
        for consumer in dead:
            self.unsubscribe_stream(consumer)

    def _push_status_event(self) -> None:
        self._push_stream_event({"event": "status", "data": self.status()})

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            session = self._session
        if session is not None and self._state == "running":
            try:
                self.stop_session(session.session_id)
            except CabinError:
                pass
        if self._tcp_server is not None:
            self._tcp_server.close()
        if self._mqtt is not None:
            self._mqtt.close()
        self._store.close()

    # -- queries -------------------------------------------------------------------

    @property
    def store(self) -> DocumentStore:
        return self._store


def _row_record(session_id: str, row: FusedRow) -> TimedRecord:
    return TimedRecord(
        session_id=session_id,
        source=SourceId.FUSED,
        seq=0,
        device_ts_ms=row.grid_ts_ms,
        wall_ts_ms=row.grid_ts_ms,
        payload=row,
    )


def replay_rows(readers: Iterable[Iterable[TimedRecord]], config: CollectorConfig) -> Iterator[FusedRow]:
    """Offline mode: run per-device log readers through the identical
    alignment+fusion path and yield the fused rows."""
    engine = FusionEngine(config.metrics, config.reliability, config.warning)
    for snapshot in replay_logs(
        list(readers),
        sources=config.sensor_sources,
        grid=config.grid,
        calibration_n=config.calibration_n,
        camera_window_ms=config.metrics.perclos_window_ms,
    ):
        yield engine.process(snapshot)
