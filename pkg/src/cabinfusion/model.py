"""Domain types, the JSON wire envelope, and the MQTT topic plan.

Every cross-module value is defined here as an immutable dataclass that
validates its own invariants on construction. Wall/device timestamps are
UTC epoch milliseconds as plain ints; optionals are omitted on the wire,
never encoded as null.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from enum import Enum

from .errors import ParseError, SchemaError, ValidationError

SCHEMA_VERSION = 1

TimestampMs = int


class SourceId(str, Enum):
    RADAR = "radar"
    WEARABLE = "wearable"
    CAMERA = "camera"
    ANNOTATION = "annotation"
    FUSED = "fused"


class WarningLevel(str, Enum):
    NORMAL = "normal"
    DROWSY_WARNING = "drowsy_warning"
    CRITICAL = "critical"
    DISTRACTION_WARNING = "distraction_warning"


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def _quantized(value: float, step: float = 0.1, tol: float = 1e-6) -> bool:
    scaled = value / step
    return abs(scaled - round(scaled)) <= tol


@dataclass(frozen=True)
class RadarSample:
    """One vital-sign radar report. device_ts is u32 ms since device boot;
    hr/rr are carried on the wire in deci-units, so they must be 0.1-quantized."""

    device_ts: int
    hr_bpm: float
    rr_bpm: float
    distance_mm: float
    motion: bool
    presence: bool

    def __post_init__(self):
        _require(0 <= self.device_ts <= 0xFFFFFFFF, "radar device_ts out of u32 range")
        _require(0.0 <= self.hr_bpm <= 300.0, f"hr_bpm {self.hr_bpm} outside [0, 300]")
        _require(0.0 <= self.rr_bpm <= 60.0, f"rr_bpm {self.rr_bpm} outside [0, 60]")
        _require(0.0 <= self.distance_mm <= 65535.0, f"distance_mm {self.distance_mm} outside [0, 65535]")
        _require(_quantized(self.hr_bpm), f"hr_bpm {self.hr_bpm} not 0.1-quantized")
        _require(_quantized(self.rr_bpm), f"rr_bpm {self.rr_bpm} not 0.1-quantized")


@dataclass(frozen=True)
class WearableSample:
    device_ts: TimestampMs
    worn: bool
    hr_bpm: float | None = None
    rr_bpm: float | None = None
    hrv_rmssd_ms: float | None = None
    drowsiness_score: float | None = None

    def __post_init__(self):
        _require(self.device_ts >= 0, "wearable device_ts negative")
        if not self.worn:
            _require(self.hr_bpm is None, "worn=false forbids hr_bpm")
        if self.drowsiness_score is not None:
            _require(0.0 <= self.drowsiness_score <= 1.0, f"drowsiness_score {self.drowsiness_score} outside [0, 1]")


@dataclass(frozen=True)
class CameraSample:
    """Per-frame ocular/pose readings. Optional fields are present exactly
    when a face was detected; angles are degrees in [-90, +90]."""

    device_ts: TimestampMs
    face_detected: bool
    aperture: float | None = None
    gaze_yaw_deg: float | None = None
    gaze_pitch_deg: float | None = None
    head_yaw_deg: float | None = None
    head_pitch_deg: float | None = None
    head_roll_deg: float | None = None

    _OPTIONAL = ("aperture", "gaze_yaw_deg", "gaze_pitch_deg", "head_yaw_deg", "head_pitch_deg", "head_roll_deg")

    def __post_init__(self):
        _require(self.device_ts >= 0, "camera device_ts negative")
        present = [name for name in self._OPTIONAL if getattr(self, name) is not None]
        if self.face_detected:
            _require(len(present) == len(self._OPTIONAL), "face_detected=true requires aperture and all angles")
            _require(0.0 <= self.aperture <= 1.0, f"aperture {self.aperture} outside [0, 1]")
            for name in self._OPTIONAL[1:]:
                value = getattr(self, name)
                _require(-90.0 <= value <= 90.0, f"{name} {value} outside [-90, 90]")
        else:
            _require(not present, "face_detected=false forbids aperture and angles")


@dataclass(frozen=True)
class Annotation:
    ts: TimestampMs
    kind: str  # kss | ess | marker
    value: int | str

    def __post_init__(self):
        _require(self.ts >= 0, "annotation ts negative")
        if self.kind == "kss":
            _require(isinstance(self.value, int) and 1 <= self.value <= 9, f"kss value {self.value} outside [1, 9]")
        elif self.kind == "ess":
            _require(isinstance(self.value, int) and 0 <= self.value <= 24, f"ess value {self.value} outside [0, 24]")
        elif self.kind == "marker":
            _require(isinstance(self.value, str), "marker value must be a string")
        else:
            raise ValidationError(f"unknown annotation kind {self.kind!r}")


@dataclass(frozen=True)
class FusedRow:
    """One grid-aligned fusion output row. Real-valued fields are rounded to
    4 decimals by the builder so the CSV round-trip is exact."""

    grid_ts_ms: TimestampMs
    hr_bpm: float | None = None
    hr_source: SourceId | None = None
    rr_bpm: float | None = None
    rr_source: SourceId | None = None
    hrv_rmssd_ms: float | None = None
    drowsiness_physio: float | None = None
    perclos: float | None = None
    blink_rate_per_min: float | None = None
    long_blink_rate_per_min: float | None = None
    attention: float | None = None
    drowsiness_camera: float | None = None
    warning: WarningLevel = WarningLevel.NORMAL
    radar_reliable: bool = False
    wearable_fresh: bool = False
    camera_fresh: bool = False

    def __post_init__(self):
        _require(self.grid_ts_ms >= 0, "grid_ts_ms negative")
        _require((self.hr_bpm is None) == (self.hr_source is None), "hr_bpm and hr_source must be present together")
        _require((self.rr_bpm is None) == (self.rr_source is None), "rr_bpm and rr_source must be present together")
        if self.hr_source is not None:
            _require(self.hr_source in (SourceId.RADAR, SourceId.WEARABLE), f"hr_source {self.hr_source} invalid")
        if self.rr_source is not None:
            _require(self.rr_source in (SourceId.RADAR, SourceId.WEARABLE), f"rr_source {self.rr_source} invalid")
        for name in ("drowsiness_physio", "perclos", "attention", "drowsiness_camera"):
            value = getattr(self, name)
            if value is not None:
                _require(0.0 <= value <= 1.0, f"{name} {value} outside [0, 1]")


@dataclass(frozen=True)
class SessionMeta:
    session_id: str
    subject_pseudo_id: str
    started_at: TimestampMs
    devices: tuple[tuple[SourceId, str], ...] = ()
    ended_at: TimestampMs | None = None
    clock_offset_ms: dict[SourceId, int] = field(default_factory=dict)
    annotations: tuple[Annotation, ...] = ()


Payload = RadarSample | WearableSample | CameraSample | Annotation | FusedRow

_PAYLOAD_TYPES: dict[SourceId, type] = {
    SourceId.RADAR: RadarSample,
    SourceId.WEARABLE: WearableSample,
    SourceId.CAMERA: CameraSample,
    SourceId.ANNOTATION: Annotation,
    SourceId.FUSED: FusedRow,
}


@dataclass(frozen=True)
class TimedRecord:
    """Envelope unifying any source sample for the wire and the store."""

    session_id: str
    source: SourceId
    seq: int
    device_ts_ms: int
    wall_ts_ms: TimestampMs
    payload: Payload
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        _require(self.schema_version == SCHEMA_VERSION, f"unsupported schema_version {self.schema_version}")
        _require(bool(self.session_id), "session_id empty")
        _require(self.seq >= 0, "seq negative")
        _require(self.device_ts_ms >= 0, "device_ts_ms negative")
        _require(self.wall_ts_ms >= 0, "wall_ts_ms negative")
        expected = _PAYLOAD_TYPES[self.source]
        if not isinstance(self.payload, expected):
            raise ValidationError(
                f"payload {type(self.payload).__name__} does not match source {self.source.value}"
            )


def _payload_to_dict(payload: Payload) -> dict:
    out = {}
    for f in fields(payload):
        value = getattr(payload, f.name)
        if value is None:
            continue
        if isinstance(value, Enum):
            value = value.value
        if isinstance(value, float) and not math.isfinite(value):
            raise ValidationError(f"non-finite value in field {f.name}")
        out[f.name] = value
    return out


def encode_record(record: TimedRecord) -> str:
    """Serialize to the version-1 JSON wire form. Absent optionals are
    omitted entirely; the output never contains a JSON null."""
    doc = {
        "schema_version": record.schema_version,
        "session_id": record.session_id,
        "source": record.source.value,
        "seq": record.seq,
        "device_ts_ms": record.device_ts_ms,
        "wall_ts_ms": record.wall_ts_ms,
        "payload": _payload_to_dict(record.payload),
    }
    return json.dumps(doc, separators=(",", ":"))


_REQUIRED_KEYS = ("schema_version", "session_id", "source", "seq", "device_ts_ms", "wall_ts_ms", "payload")

# Per payload type: (required wire keys, optional wire keys). Unknown extra
# keys are ignored for forward compatibility.
_PAYLOAD_FIELDS: dict[SourceId, tuple[tuple[str, ...], tuple[str, ...]]] = {
    SourceId.RADAR: (("device_ts", "hr_bpm", "rr_bpm", "distance_mm", "motion", "presence"), ()),
    SourceId.WEARABLE: (("device_ts", "worn"), ("hr_bpm", "rr_bpm", "hrv_rmssd_ms", "drowsiness_score")),
    SourceId.CAMERA: (
        ("device_ts", "face_detected"),
        ("aperture", "gaze_yaw_deg", "gaze_pitch_deg", "head_yaw_deg", "head_pitch_deg", "head_roll_deg"),
    ),
    SourceId.ANNOTATION: (("ts", "kind", "value"), ()),
    SourceId.FUSED: (
        ("grid_ts_ms", "warning", "radar_reliable", "wearable_fresh", "camera_fresh"),
        ("hr_bpm", "hr_source", "rr_bpm", "rr_source", "hrv_rmssd_ms", "drowsiness_physio", "perclos",
         "blink_rate_per_min", "long_blink_rate_per_min", "attention", "drowsiness_camera"),
    ),
}


def _decode_payload(source: SourceId, doc: dict) -> Payload:
    if not isinstance(doc, dict):
        raise SchemaError("payload is not a JSON object")
    required, optional = _PAYLOAD_FIELDS[source]
    kwargs = {}
    for key in required:
        if key not in doc:
            raise SchemaError(f"payload for source {source.value} missing key {key!r}")
        kwargs[key] = doc[key]
    for key in optional:
        if key in doc:
            kwargs[key] = doc[key]
    if source is SourceId.FUSED:
        try:
            kwargs["warning"] = WarningLevel(kwargs["warning"])
            for src_key in ("hr_source", "rr_source"):
                if src_key in kwargs:
                    kwargs[src_key] = SourceId(kwargs[src_key])
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
    cls = _PAYLOAD_TYPES[source]
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise SchemaError(f"bad payload for source {source.value}: {exc}") from exc


def decode_record(text: str | bytes) -> TimedRecord:
    """Inverse of encode_record on its image. Unknown extra keys are ignored;
    structural problems raise SchemaError, invariant violations ValidationError."""
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed JSON record: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("record is not a JSON object")
    for key in _REQUIRED_KEYS:
        if key not in doc:
            raise SchemaError(f"record missing key {key!r}")
    try:
        source = SourceId(doc["source"])
    except ValueError as exc:
        raise ValidationError(f"unknown source {doc['source']!r}") from exc
    for key in ("schema_version", "seq", "device_ts_ms", "wall_ts_ms"):
        if not isinstance(doc[key], int) or isinstance(doc[key], bool):
            raise SchemaError(f"record key {key!r} must be an integer")
    payload = _decode_payload(source, doc["payload"])
    return TimedRecord(
        session_id=doc["session_id"],
        source=source,
        seq=doc["seq"],
        device_ts_ms=doc["device_ts_ms"],
        wall_ts_ms=doc["wall_ts_ms"],
        payload=payload,
        schema_version=doc["schema_version"],
    )


_FORBIDDEN_TOPIC_CHARS = set("/#+")


def _check_session_id(session_id: str) -> None:
    if not session_id or any(c in _FORBIDDEN_TOPIC_CHARS for c in session_id):
        raise ValidationError(f"session_id {session_id!r} empty or contains one of / # +")


def topic_for(session_id: str, source: SourceId) -> str:
    """Data topic for a source; the fused output rides its own topic."""
    _check_session_id(session_id)
    if source is SourceId.FUSED:
        return f"cabin/{session_id}/fused"
    return f"cabin/{session_id}/{source.value}/data"


def control_topic(session_id: str) -> str:
    _check_session_id(session_id)
    return f"cabin/{session_id}/control"
