"""Deterministic, scriptable sensor simulators for desk-scale runs.

A ScenarioScript drives all three sensors from one timeline: segments
switch behaviors (alert baseline, drowsiness ramp, distraction, dropouts,
radar motion, nod bursts) while seeded RNG streams add realistic jitter.
Given the same (script, seed) the generated records and radar bytes are
byte-identical across runs and replay speeds; wall timestamps come from the
script's simulated clock, not the machine clock.

Drowsiness staging: the wearable's score follows the scripted ramp
directly, while the camera's symptoms (longer blinks, rising closure time)
follow the same score curve delayed by ``camera_lag_ms``. Physiology leads,
ocular signs trail - the ordering the drowsy-ramp scenarios assert.

Baseline signal levels are textbook resting values (HR ~70 bpm, RR ~15/min,
HRV ~45 ms, ~15 blinks/min of 150-250 ms); they are scenario scaffolding,
not claims. Device rates default to radar 1 Hz, wearable 1 Hz, camera
10 Hz and are configurable per script.
"""

from __future__ import annotations

import json
import math
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Sequence

from . import radar_codec
from .bus import InProcessBus, RadarByteChannel
from .errors import TransportError, ValidationError
from .model import (
    CameraSample,
    RadarSample,
    SourceId,
    TimedRecord,
    WearableSample,
    encode_record,
    topic_for,
)

DEFAULT_EPOCH_MS = 1_700_000_000_000

SEGMENT_KINDS = ("alert", "drowsy_ramp", "distracted", "dropout", "motion", "nod_burst")

# Camera symptom ramp as a function of the (lagged) drowsiness score.
CAMERA_ONSET_SCORE = 0.5
CAMERA_FULL_SCORE = 0.9


@dataclass(frozen=True)
class Segment:
    t0_ms: int
    t1_ms: int
    kind: str
    target: float | None = None        # drowsy_ramp
    gaze_yaw_deg: float | None = None  # distracted
    source: str | None = None          # dropout
    rate_per_min: float | None = None  # nod_burst

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ValidationError(f"unknown segment kind {self.kind!r}")
        if self.t1_ms <= self.t0_ms:
            raise ValidationError(f"segment {self.kind}: t1 must exceed t0")
        if self.kind == "drowsy_ramp" and not (self.target is not None and 0.0 <= self.target <= 1.0):
            raise ValidationError("drowsy_ramp needs target in [0, 1]")
        if self.kind == "distracted" and self.gaze_yaw_deg is None:
            raise ValidationError("distracted needs gaze_yaw_deg")
        if self.kind == "dropout" and self.source not in ("radar", "wearable", "camera"):
            raise ValidationError("dropout needs source radar|wearable|camera")
        if self.kind == "nod_burst" and not (self.rate_per_min and self.rate_per_min > 0):
            raise ValidationError("nod_burst needs rate_per_min > 0")


@dataclass(frozen=True)
class ScenarioScript:
    seed: int
    duration_ms: int
    rates_hz: dict[str, float] = field(default_factory=lambda: {"radar": 1.0, "wearable": 1.0, "camera": 10.0})
    clock_offsets_ms: dict[str, int] = field(default_factory=dict)
    jitter_ms: dict[str, int] = field(default_factory=dict)
    segments: tuple[Segment, ...] = ()
    start_epoch_ms: int = DEFAULT_EPOCH_MS
    camera_lag_ms: int = 300_000

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ValidationError("duration_ms must be positive")
        for name, rate in self.rates_hz.items():
            if rate <= 0:
                raise ValidationError(f"rate for {name} must be positive")
        by_channel: dict[tuple, list[Segment]] = {}
        for seg in self.segments:
            key = (seg.kind, seg.source) if seg.kind == "dropout" else (seg.kind,)
            by_channel.setdefault(key, []).append(seg)
        # score-affecting kinds share one channel: overlapping them is undefined
        score_segs = [s for s in self.segments if s.kind in ("alert", "drowsy_ramp")]
        by_channel[("score",)] = score_segs
        for key, segs in by_channel.items():
            segs = sorted(segs, key=lambda s: s.t0_ms)
            for a, b in zip(segs, segs[1:]):
                if b.t0_ms < a.t1_ms:
                    raise ValidationError(f"overlapping segments on channel {key}")

    def rate(self, source: str) -> float:
        return self.rates_hz.get(source, 1.0)

    def offset(self, source: str) -> int:
        return self.clock_offsets_ms.get(source, 0)

    def jitter(self, source: str) -> int:
        return self.jitter_ms.get(source, 0)

    def windows(self, kind: str, source: str | None = None) -> list[tuple[int, int]]:
        out = []
        for seg in self.segments:
            if seg.kind == kind and (source is None or seg.source == source):
                out.append((seg.t0_ms, seg.t1_ms))
        return sorted(out)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "rates_hz": dict(self.rates_hz),
            "clock_offsets_ms": dict(self.clock_offsets_ms),
            "jitter_ms": dict(self.jitter_ms),
            "start_epoch_ms": self.start_epoch_ms,
            "camera_lag_ms": self.camera_lag_ms,
            "segments": [
                {k: v for k, v in vars(seg).items() if v is not None}
                for seg in self.segments
            ],
        }
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "ScenarioScript":
        doc = json.loads(text)
        segments = tuple(Segment(**seg) for seg in doc.pop("segments", []))
        return ScenarioScript(segments=segments, **doc)


def load_script(path: str | Path) -> ScenarioScript:
    return ScenarioScript.from_json(Path(path).read_text(encoding="utf-8"))


# -- curves ------------------------------------------------------------------


class _ScoreCurve:
    """Piecewise-linear drowsiness score derived from alert/drowsy_ramp
    segments; holds its last value between and after segments."""

    def __init__(self, script: ScenarioScript):
        self._spans: list[tuple[int, int, float, float]] = []
        value = 0.0
        for seg in sorted(
            (s for s in script.segments if s.kind in ("alert", "drowsy_ramp")), key=lambda s: s.t0_ms
        ):
            end_value = 0.0 if seg.kind == "alert" else seg.target
            start_value = 0.0 if seg.kind == "alert" else value
            self._spans.append((seg.t0_ms, seg.t1_ms, start_value, end_value))
            value = end_value

    def at(self, t_ms: int) -> float:
        if t_ms < 0:
            return 0.0
        value = 0.0
        for t0, t1, v0, v1 in self._spans:
            if t_ms < t0:
                return value
            if t_ms < t1:
                return v0 + (v1 - v0) * (t_ms - t0) / (t1 - t0)
            value = v1
        return value


def _camera_factor(score: float) -> float:
    span = CAMERA_FULL_SCORE - CAMERA_ONSET_SCORE
    return min(1.0, max(0.0, (score - CAMERA_ONSET_SCORE) / span))


def _in_windows(t_ms: int, windows: Sequence[tuple[int, int]]) -> bool:
    return any(t0 <= t_ms < t1 for t0, t1 in windows)


# -- generation ---------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    """Scenario truth emitted alongside the records, in epoch ms, for test
    assertions: curves as sampled, event times, and the scripted windows."""

    score_curve: tuple[tuple[int, float], ...]
    camera_factor_curve: tuple[tuple[int, float], ...]
    blink_events: tuple[tuple[int, int], ...]  # (start_epoch_ms, duration_ms)
    nod_times: tuple[int, ...]
    dropout_windows: dict[str, tuple[tuple[int, int], ...]]
    distracted_windows: tuple[tuple[int, int], ...]
    motion_windows: tuple[tuple[int, int], ...]
    drowsy_windows: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class SimulationData:
    script: ScenarioScript
    session_id: str
    radar_chunks: tuple[tuple[int, bytes], ...]  # (wall_ts_ms, frame bytes)
    radar_records: tuple[TimedRecord, ...]  # the records a collector wraps around those bytes
    wearable_records: tuple[TimedRecord, ...]
    camera_records: tuple[TimedRecord, ...]
    ground_truth: GroundTruth

    def records_for(self, source: SourceId) -> tuple[TimedRecord, ...]:
        return {
            SourceId.RADAR: self.radar_records,
            SourceId.WEARABLE: self.wearable_records,
            SourceId.CAMERA: self.camera_records,
        }[source]

    @property
    def total_records(self) -> int:
        return len(self.radar_records) + len(self.wearable_records) + len(self.camera_records)


def _sample_times(duration_ms: int, rate_hz: float) -> list[int]:
    period = 1000.0 / rate_hz
    return [round(k * period) for k in range(int(duration_ms * rate_hz / 1000.0))]


def _plan_blinks(script: ScenarioScript, score: _ScoreCurve, rng: Random) -> list[tuple[int, int]]:
    """Blink schedule as (start_ms, duration_ms): baseline ~15/min of
    150-250 ms; the lagged drowsiness factor lengthens blinks toward
    600 ms and slightly raises the rate."""
    blinks = []
    t = 500
    while t < script.duration_ms:
        factor = _camera_factor(score.at(t - script.camera_lag_ms))
        rate = 15.0 + 3.0 * factor
        gap = 60_000.0 / rate * rng.uniform(0.6, 1.4)
        start = t + int(gap)
        if start >= script.duration_ms:
            break
        duration = int(rng.uniform(150, 250) + 350 * _camera_factor(score.at(start - script.camera_lag_ms)))
        blinks.append((start, duration))
        t = start + duration + 500  # enforce an open-eye gap so events never merge
    return blinks


def _plan_nods(script: ScenarioScript, rng: Random) -> list[tuple[int, float]]:
    nods = []
    for seg in script.segments:
        if seg.kind != "nod_burst":
            continue
        step = 60_000.0 / seg.rate_per_min
        t = seg.t0_ms + step / 2
        while t < seg.t1_ms:
            nods.append((int(t + rng.uniform(-step / 8, step / 8)), 25.0 + rng.uniform(-2.0, 2.0)))
            t += step
    return sorted(nods)


NOD_DURATION_MS = 1_500


def generate(script: ScenarioScript, session_id: str = "sim") -> SimulationData:
    """Produce the full deterministic record set plus ground truth."""
    rng_radar = Random(f"{script.seed}/radar")
    rng_wear = Random(f"{script.seed}/wearable")
    rng_cam = Random(f"{script.seed}/camera")
    rng_blinks = Random(f"{script.seed}/blinks")
    rng_nods = Random(f"{script.seed}/nods")
    epoch = script.start_epoch_ms

    score = _ScoreCurve(script)
    blinks = _plan_blinks(script, score, rng_blinks)
    nods = _plan_nods(script, rng_nods)
    drop = {s: script.windows("dropout", s) for s in ("radar", "wearable", "camera")}
    motion_windows = script.windows("motion")
    distracted = [(seg.t0_ms, seg.t1_ms, seg.gaze_yaw_deg) for seg in script.segments if seg.kind == "distracted"]

    # radar ------------------------------------------------------------
    radar_chunks: list[tuple[int, bytes]] = []
    radar_records: list[TimedRecord] = []
    seq = 0
    for t in _sample_times(script.duration_ms, script.rate("radar")):
        in_motion = _in_windows(t, motion_windows)
        hr = round(min(180.0, max(30.0, rng_radar.gauss(71.0, 1.2))), 1)
        rr = round(min(40.0, max(5.0, rng_radar.gauss(15.0, 0.3))), 1)
        sigma = 150.0 if in_motion else 2.5
        distance = float(min(6000, max(200, round(800 + rng_radar.gauss(0.0, sigma)))))
        jitter = rng_radar.randint(-script.jitter("radar"), script.jitter("radar")) if script.jitter("radar") else 0
        if _in_windows(t, drop["radar"]):
            continue
        sample = RadarSample(
            device_ts=(script.offset("radar") + t) % (1 << 32),
            hr_bpm=hr,
            rr_bpm=rr,
            distance_mm=distance,
            motion=in_motion,
            presence=True,
        )
        wall = epoch + t + jitter
        radar_chunks.append((wall, radar_codec.encode_frame(sample)))
        radar_records.append(
            TimedRecord(
                session_id=session_id,
                source=SourceId.RADAR,
                seq=seq,
                device_ts_ms=sample.device_ts,
                wall_ts_ms=wall,
                payload=sample,
            )
        )
        seq += 1

    # wearable ----------------------------------------------------------
    wearable_records: list[TimedRecord] = []
    score_curve: list[tuple[int, float]] = []
    seq = 0
    for t in _sample_times(script.duration_ms, script.rate("wearable")):
        s = score.at(t)
        score_curve.append((epoch + t, s))
        hr = round(rng_wear.gauss(70.0, 1.0), 1)
        rr = round(rng_wear.gauss(15.0, 0.5), 1)
        hrv = round(rng_wear.gauss(45.0, 2.5), 1)
        noisy = round(min(1.0, max(0.0, s + rng_wear.gauss(0.0, 0.008))), 4)
        jitter = rng_wear.randint(-script.jitter("wearable"), script.jitter("wearable")) if script.jitter("wearable") else 0
        if _in_windows(t, drop["wearable"]):
            continue
        sample = WearableSample(
            device_ts=epoch + t - script.offset("wearable"),
            worn=True,
            hr_bpm=hr,
            rr_bpm=rr,
            hrv_rmssd_ms=hrv,
            drowsiness_score=noisy,
        )
        wearable_records.append(
            TimedRecord(
                session_id=session_id,
                source=SourceId.WEARABLE,
                seq=seq,
                device_ts_ms=sample.device_ts,
                wall_ts_ms=epoch + t + jitter,
                payload=sample,
            )
        )
        seq += 1

    # camera --------------------------------------------------------------
    camera_records: list[TimedRecord] = []
    factor_curve: list[tuple[int, float]] = []
    seq = 0
    blink_idx = 0
    for t in _sample_times(script.duration_ms, script.rate("camera")):
        factor = _camera_factor(score.at(t - script.camera_lag_ms))
        factor_curve.append((epoch + t, factor))
        while blink_idx < len(blinks) and blinks[blink_idx][0] + blinks[blink_idx][1] <= t:
            blink_idx += 1
        blinking = blink_idx < len(blinks) and blinks[blink_idx][0] <= t < blinks[blink_idx][0] + blinks[blink_idx][1]
        aperture = (
            0.03 + rng_cam.uniform(0.0, 0.03)
            if blinking
            else min(1.0, max(0.7, 0.9 + rng_cam.gauss(0.0, 0.02)))
        )
        gaze_yaw = rng_cam.gauss(0.0, 3.0)
        gaze_pitch = rng_cam.gauss(0.0, 2.0)
        for d0, d1, yaw in distracted:
            if d0 <= t < d1:
                gaze_yaw = yaw + rng_cam.gauss(0.0, 1.5)
        pitch = -2.0 + rng_cam.gauss(0.0, 1.0)
        for n0, amp in nods:
            if n0 <= t < n0 + NOD_DURATION_MS:
                pitch -= amp * math.sin(math.pi * (t - n0) / NOD_DURATION_MS)
        jitter = rng_cam.randint(-script.jitter("camera"), script.jitter("camera")) if script.jitter("camera") else 0
        if _in_windows(t, drop["camera"]):
            continue
        sample = CameraSample(
            device_ts=epoch + t - script.offset("camera"),
            face_detected=True,
            aperture=round(aperture, 4),
            gaze_yaw_deg=round(min(90.0, max(-90.0, gaze_yaw)), 2),
            gaze_pitch_deg=round(min(90.0, max(-90.0, gaze_pitch)), 2),
            head_yaw_deg=round(rng_cam.gauss(0.0, 2.0), 2),
            head_pitch_deg=round(min(90.0, max(-90.0, pitch)), 2),
            head_roll_deg=round(rng_cam.gauss(0.0, 1.0), 2),
        )
        camera_records.append(
            TimedRecord(
                session_id=session_id,
                source=SourceId.CAMERA,
                seq=seq,
                device_ts_ms=sample.device_ts,
                wall_ts_ms=epoch + t + jitter,
                payload=sample,
            )
        )
        seq += 1

    truth = GroundTruth(
        score_curve=tuple(score_curve),
        camera_factor_curve=tuple(factor_curve),
        blink_events=tuple((epoch + b0, dur) for b0, dur in blinks),
        nod_times=tuple(epoch + n0 for n0, _ in nods),
        dropout_windows={
            s: tuple((epoch + a, epoch + b) for a, b in w) for s, w in drop.items() if w
        },
        distracted_windows=tuple((epoch + a, epoch + b) for a, b, _ in distracted),
        motion_windows=tuple((epoch + a, epoch + b) for a, b in motion_windows),
        drowsy_windows=tuple((epoch + a, epoch + b) for a, b in script.windows("drowsy_ramp")),
    )
    return SimulationData(
        script=script,
        session_id=session_id,
        radar_chunks=tuple(radar_chunks),
        radar_records=tuple(radar_records),
        wearable_records=tuple(wearable_records),
        camera_records=tuple(camera_records),
        ground_truth=truth,
    )


# -- serving ------------------------------------------------------------------


class _TcpRadarSender:
    def __init__(self, address: str):
        host, _, port = address.rpartition(":")
        try:
            self._sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=5.0)
        except (OSError, ValueError) as exc:
            raise TransportError(f"cannot reach radar TCP endpoint {address}: {exc}") from exc

    def send(self, _wall_ts_ms: int, chunk: bytes) -> None:
        try:
            self._sock.sendall(chunk)
        except OSError as exc:
            raise TransportError(f"radar TCP send failed: {exc}") from exc

    def close(self) -> None:
        self._sock.close()


def serve(
    data: SimulationData,
    *,
    bus: InProcessBus | None = None,
    radar_channel: RadarByteChannel | None = None,
    mqtt_url: str | None = None,
    radar_tcp: str | None = None,
    speed: float = 1.0,
) -> int:
    """Replay the generated streams over the collector's ingest transports.

    All sources are merged into one wall-clock-ordered sender so pacing is
    exact at any speed; ``speed=0`` replays as fast as possible. Returns
    the number of items sent. Raises TransportError when a needed endpoint
    is missing or unreachable.
    """
    mqtt_client = None
    publish = None
    if bus is not None:
        publish = bus.publish
    elif mqtt_url is not None:
        from .mqtt import MqttClient

        mqtt_client = MqttClient(mqtt_url, client_id=f"cabinsim-{data.session_id}")
        publish = mqtt_client.publish

    radar_send = None
    tcp_sender = None
    if radar_channel is not None:
        radar_send = radar_channel.send
    elif radar_tcp is not None:
        tcp_sender = _TcpRadarSender(radar_tcp)
        radar_send = tcp_sender.send

    needs_pubsub = bool(data.wearable_records or data.camera_records)
    if needs_pubsub and publish is None:
        raise TransportError("no pub/sub transport configured for wearable/camera streams")
    if data.radar_chunks and radar_send is None:
        raise TransportError("no radar byte transport configured")

    events: list[tuple[int, int, int, object]] = []
    for i, (wall, chunk) in enumerate(data.radar_chunks):
        events.append((wall, 0, i, chunk))
    for order, records in ((1, data.wearable_records), (2, data.camera_records)):
        for record in records:
            events.append((record.wall_ts_ms, order, record.seq, record))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    sent = 0
    prev_wall: int | None = None
    try:
        for wall, order, _key, item in events:
            if speed > 0 and prev_wall is not None and wall > prev_wall:
                time.sleep((wall - prev_wall) / 1000.0 / speed)
            prev_wall = wall
            if order == 0:
                radar_send(wall, item)
            else:
                record: TimedRecord = item
                publish(topic_for(data.session_id, record.source), encode_record(record).encode())
            sent += 1
    finally:
        if mqtt_client is not None:
            mqtt_client.close()
        if tcp_sender is not None:
            tcp_sender.close()
    return sent


# -- canned scripts -----------------------------------------------------------


def make_mwt_script(duration_ms: int = 1_200_000, seed: int = 7) -> ScenarioScript:
    """The 20-minute maintenance-of-wakefulness style session: alert start,
    a 5-minute ramp to a high drowsiness score, then a long hold. Camera
    symptoms trail the score by camera_lag_ms, so the physiological channel
    crosses the warning threshold minutes before the camera index does."""
    ramp_end = min(480_000, duration_ms)
    segments = [Segment(0, min(180_000, duration_ms), "alert")]
    if duration_ms > 180_000:
        segments.append(Segment(180_000, ramp_end, "drowsy_ramp", target=0.95))
    if duration_ms > ramp_end:
        segments.append(Segment(ramp_end, duration_ms, "drowsy_ramp", target=0.95))
    return ScenarioScript(seed=seed, duration_ms=duration_ms, segments=tuple(segments))


def make_fault_script(duration_ms: int = 240_000, seed: int = 11) -> ScenarioScript:
    """Sensor-fault exercise: radar motion, wearable and camera dropouts,
    a distraction interval, and a nod burst, all on an alert baseline."""
    segments = (
        Segment(0, duration_ms, "alert"),
        Segment(60_000, 100_000, "motion"),
        Segment(110_000, 140_000, "dropout", source="wearable"),
        Segment(35_000, 50_000, "dropout", source="camera"),
        Segment(150_000, 180_000, "distracted", gaze_yaw_deg=40.0),
        Segment(190_000, 230_000, "nod_burst", rate_per_min=6.0),
    )
    return ScenarioScript(seed=seed, duration_ms=duration_ms, segments=segments)
