"""Snapshot-to-row fusion: reliability gating, redundant-channel selection,
windowed camera metrics, the blended drowsiness index, and the warning
state machine.

Channel selection encodes the redundancy rule: HR prefers the wearable,
RR prefers the radar, each falling back to the other only when its primary
is unavailable. The radar is trusted only while the subject holds still:
distance variance or motion flags in the trailing window mark it
unreliable. Losing every drowsiness channel freezes the warning timers
rather than clearing an alarm.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from statistics import pstdev
from typing import Sequence

from .alignment import AlignedSnapshot
from .errors import ValidationError
from .model import FusedRow, RadarSample, SourceId, WarningLevel, WearableSample
from .ocular import (
    MetricsWindowConfig,
    attention,
    blink_rates,
    camera_drowsiness,
    detect_blinks,
    detect_nods,
    perclos,
)


@dataclass(frozen=True)
class ReliabilityConfig:
    radar_distance_window_ms: int = 5_000
    radar_distance_stddev_mm: float = 50.0
    radar_motion_fraction: float = 0.2

    def __post_init__(self):
        if min(self.radar_distance_window_ms, self.radar_distance_stddev_mm, self.radar_motion_fraction) <= 0:
            raise ValidationError("reliability thresholds must be positive")


@dataclass(frozen=True)
class WarningConfig:
    warn_threshold: float = 0.6
    critical_threshold: float = 0.8
    clear_threshold: float = 0.5
    warn_sustain_ms: int = 10_000
    clear_sustain_ms: int = 30_000
    attention_threshold: float = 0.5
    attention_sustain_ms: int = 3_000
    physio_weight: float = 0.6
    camera_weight: float = 0.4

    def __post_init__(self):
        if not (self.clear_threshold < self.warn_threshold < self.critical_threshold):
            raise ValidationError("need clear < warn < critical thresholds")
        if abs(self.physio_weight + self.camera_weight - 1.0) > 1e-9:
            raise ValidationError("physio_weight + camera_weight must equal 1")


@dataclass(frozen=True)
class WarningState:
    """Warning level plus sustain accumulators. Streak time is measured
    between consecutive drowsiness-bearing ticks, so ticks with no index
    neither extend nor reset a streak (timers freeze, alarms hold)."""

    current: WarningLevel = WarningLevel.NORMAL
    entered_at: int = 0
    last_tick: int | None = None
    last_d_present: bool = False
    warn_active: bool = False
    warn_acc_ms: int = 0
    crit_active: bool = False
    crit_acc_ms: int = 0
    clear_active: bool = False
    clear_acc_ms: int = 0
    att_active: bool = False
    att_acc_ms: int = 0


def _streak(qualifies: bool, active: bool, acc_ms: int, dt_ms: int, countable: bool) -> tuple[bool, int]:
    if not qualifies:
        return False, 0
    if not active:
        return True, 0
    return True, acc_ms + (dt_ms if countable else 0)


def step_warning(
    state: WarningState,
    drowsiness: float | None,
    attention_fraction: float | None,
    distraction_active: bool,
    grid_ts: int,
    cfg: WarningConfig,
) -> WarningState:
    """Advance the warning state machine by one grid tick.

    Priority when several conditions hold: critical > drowsy_warning >
    distraction_warning > normal. Entering drowsy/critical requires the
    full sustain window at or above the threshold (the transition fires at
    the first tick whose trailing window fully qualifies); clearing back to
    normal requires the index at or below the clear threshold for the clear
    sustain. Distraction needs either sustained low attention or an active
    trailing dwell, and releases as soon as neither holds.
    """
    if state.last_tick is not None and grid_ts <= state.last_tick:
        raise ValidationError(f"grid_ts {grid_ts} not after previous tick {state.last_tick}")
    dt = 0 if state.last_tick is None else grid_ts - state.last_tick

    if drowsiness is not None:
        warn_active, warn_acc = _streak(
            drowsiness >= cfg.warn_threshold, state.warn_active, state.warn_acc_ms, dt, state.last_d_present
        )
        crit_active, crit_acc = _streak(
            drowsiness >= cfg.critical_threshold, state.crit_active, state.crit_acc_ms, dt, state.last_d_present
        )
        clear_active, clear_acc = _streak(
            drowsiness <= cfg.clear_threshold, state.clear_active, state.clear_acc_ms, dt, state.last_d_present
        )
        d_present = True
    else:
        warn_active, warn_acc = state.warn_active, state.warn_acc_ms
        crit_active, crit_acc = state.crit_active, state.crit_acc_ms
        clear_active, clear_acc = state.clear_active, state.clear_acc_ms
        d_present = False

    if attention_fraction is not None:
        att_active, att_acc = _streak(
            attention_fraction < cfg.attention_threshold, state.att_active, state.att_acc_ms, dt, True
        )
    else:
        att_active, att_acc = False, 0

    crit_met = crit_active and crit_acc >= cfg.warn_sustain_ms
    warn_met = warn_active and warn_acc >= cfg.warn_sustain_ms
    clear_met = clear_active and clear_acc >= cfg.clear_sustain_ms
    att_met = (att_active and att_acc >= cfg.attention_sustain_ms) or distraction_active

    cur = state.current
    if crit_met:
        new = WarningLevel.CRITICAL
    elif cur is WarningLevel.CRITICAL:
        new = WarningLevel.NORMAL if clear_met else WarningLevel.CRITICAL
    elif warn_met:
        new = WarningLevel.DROWSY_WARNING
    elif cur is WarningLevel.DROWSY_WARNING:
        new = WarningLevel.NORMAL if clear_met else WarningLevel.DROWSY_WARNING
    elif att_met:
        new = WarningLevel.DISTRACTION_WARNING
    else:
        new = WarningLevel.NORMAL

    return replace(
        state,
        current=new,
        entered_at=grid_ts if new is not cur else state.entered_at,
        last_tick=grid_ts,
        last_d_present=d_present,
        warn_active=warn_active,
        warn_acc_ms=warn_acc,
        crit_active=crit_active,
        crit_acc_ms=crit_acc,
        clear_active=clear_active,
        clear_acc_ms=clear_acc,
        att_active=att_active,
        att_acc_ms=att_acc,
    )


def radar_reliable(
    distances_mm: Sequence[float], motion_flags: Sequence[bool], cfg: ReliabilityConfig
) -> bool:
    """Trailing-window stillness check: enough samples, distance stddev
    within bounds, and few motion flags. No evidence means unreliable."""
    if len(distances_mm) < 2:
        return False
    if pstdev(distances_mm) > cfg.radar_distance_stddev_mm:
        return False
    if motion_flags and sum(motion_flags) / len(motion_flags) > cfg.radar_motion_fraction:
        return False
    return True


@dataclass(frozen=True)
class ChannelSelection:
    hr_bpm: float | None = None
    hr_source: SourceId | None = None
    rr_bpm: float | None = None
    rr_source: SourceId | None = None
    hrv_rmssd_ms: float | None = None


def select_channels(snapshot: AlignedSnapshot, radar_ok: bool) -> ChannelSelection:
    """Redundancy-aware channel pick: HR from the wearable when it is fresh
    and worn (no radar fallback in that case, even if its hr field is
    missing), RR from the radar when fresh and reliable; HRV only ever
    comes from the wearable."""
    wearable: WearableSample | None = snapshot.sample(SourceId.WEARABLE)
    radar: RadarSample | None = snapshot.sample(SourceId.RADAR)
    wearable_ok = snapshot.fresh.get(SourceId.WEARABLE, False) and wearable is not None and wearable.worn
    radar_usable = radar_ok and radar is not None

    hr = hr_src = None
    if wearable_ok:
        if wearable.hr_bpm is not None:
            hr, hr_src = wearable.hr_bpm, SourceId.WEARABLE
    elif radar_usable:
        hr, hr_src = radar.hr_bpm, SourceId.RADAR

    rr = rr_src = None
    if radar_usable:
        rr, rr_src = radar.rr_bpm, SourceId.RADAR
    elif wearable_ok and wearable.rr_bpm is not None:
        rr, rr_src = wearable.rr_bpm, SourceId.WEARABLE

    hrv = wearable.hrv_rmssd_ms if wearable_ok else None
    return ChannelSelection(hr_bpm=hr, hr_source=hr_src, rr_bpm=rr, rr_source=rr_src, hrv_rmssd_ms=hrv)


@dataclass(frozen=True)
class CameraMetrics:
    perclos: float | None = None
    blink_rate_per_min: float | None = None
    long_blink_rate_per_min: float | None = None
    attention: float | None = None
    distraction_active: bool = False
    nod_rate_per_min: float | None = None
    drowsiness_camera: float | None = None


def evaluate_camera_metrics(snapshot: AlignedSnapshot, cfg: MetricsWindowConfig) -> CameraMetrics:
    """Run the ocular metrics over the snapshot's trailing camera window.
    A stale camera yields no metrics at all: a dead sensor must read as a
    gap, not as a frozen value."""
    if not snapshot.fresh.get(SourceId.CAMERA, False):
        return CameraMetrics()
    window = snapshot.camera_window
    if len(window) < 2:
        return CameraMetrics()
    grid_ts = snapshot.grid_ts
    start = grid_ts - cfg.perclos_window_ms

    att_fraction, distracted = attention(window, cfg, window_start=start, window_end=grid_ts)
    usable = any(s.face_detected for _, s in window)
    if not usable:
        return CameraMetrics(attention=att_fraction, distraction_active=distracted)

    p = perclos(window, cfg, window_start=start, window_end=grid_ts)
    blinks = [e for e in detect_blinks(window, cfg) if start < e.reopen_ts <= grid_ts]
    blink_rate, long_rate = blink_rates(blinks, cfg.perclos_window_ms, cfg.long_blink_ms)
    nods = [e for e in detect_nods(window, cfg) if start < e.onset_ts <= grid_ts]
    nod_rate = len(nods) * 60_000 / cfg.perclos_window_ms
    return CameraMetrics(
        perclos=p,
        blink_rate_per_min=blink_rate,
        long_blink_rate_per_min=long_rate,
        attention=att_fraction,
        distraction_active=distracted,
        nod_rate_per_min=nod_rate,
        drowsiness_camera=camera_drowsiness(p, long_rate, nod_rate, cfg),
    )


def _r4(value: float | None) -> float | None:
    return None if value is None else round(value, 4)


def fuse_row(
    snapshot: AlignedSnapshot,
    camera: CameraMetrics,
    radar_ok: bool,
    state: WarningState,
    cfg: WarningConfig,
) -> tuple[FusedRow, WarningState]:
    """Assemble one FusedRow and advance the warning state.

    The combined drowsiness index blends the published physiological and
    camera channels; with one channel missing the other carries full
    weight, and with both missing the index is absent and the state
    machine holds. Real fields are rounded to 4 decimals so the CSV
    round-trip is exact.
    """
    channels = select_channels(snapshot, radar_ok)
    wearable: WearableSample | None = snapshot.sample(SourceId.WEARABLE)
    wearable_ok = snapshot.fresh.get(SourceId.WEARABLE, False) and wearable is not None and wearable.worn
    physio = _r4(wearable.drowsiness_score) if wearable_ok and wearable.drowsiness_score is not None else None
    cam_d = _r4(camera.drowsiness_camera)

    if physio is not None and cam_d is not None:
        drowsiness = _r4(cfg.physio_weight * physio + cfg.camera_weight * cam_d)
    elif physio is not None:
        drowsiness = physio
    else:
        drowsiness = cam_d

    att = _r4(camera.attention)
    new_state = step_warning(state, drowsiness, att, camera.distraction_active, snapshot.grid_ts, cfg)

    row = FusedRow(
        grid_ts_ms=snapshot.grid_ts,
        hr_bpm=_r4(channels.hr_bpm),
        hr_source=channels.hr_source,
        rr_bpm=_r4(channels.rr_bpm),
        rr_source=channels.rr_source,
        hrv_rmssd_ms=_r4(channels.hrv_rmssd_ms),
        drowsiness_physio=physio,
        perclos=_r4(camera.perclos),
        blink_rate_per_min=_r4(camera.blink_rate_per_min),
        long_blink_rate_per_min=_r4(camera.long_blink_rate_per_min),
        attention=att,
        drowsiness_camera=cam_d,
        warning=new_state.current,
        radar_reliable=radar_ok,
        wearable_fresh=snapshot.fresh.get(SourceId.WEARABLE, False),
        camera_fresh=snapshot.fresh.get(SourceId.CAMERA, False),
    )
    return row, new_state


class FusionEngine:
    """Stateful per-session fusion driver: keeps the trailing radar window
    and the warning state across ticks. Single-threaded by design."""

    def __init__(
        self,
        metrics_cfg: MetricsWindowConfig | None = None,
        reliability_cfg: ReliabilityConfig | None = None,
        warning_cfg: WarningConfig | None = None,
    ):
        self.metrics_cfg = metrics_cfg or MetricsWindowConfig()
        self.reliability_cfg = reliability_cfg or ReliabilityConfig()
        self.warning_cfg = warning_cfg or WarningConfig()
        self.state = WarningState()
        self._radar_window: deque[tuple[int, float, bool]] = deque()
        self._last_radar_ts: int | None = None

    def _radar_ok(self, snapshot: AlignedSnapshot) -> bool:
        entry = snapshot.samples.get(SourceId.RADAR)
        if entry is not None:
            ts, sample = entry
            if ts != self._last_radar_ts:
                self._radar_window.append((ts, sample.distance_mm, sample.motion))
                self._last_radar_ts = ts
        cutoff = snapshot.grid_ts - self.reliability_cfg.radar_distance_window_ms
        while self._radar_window and self._radar_window[0][0] <= cutoff:
            self._radar_window.popleft()
        if not snapshot.fresh.get(SourceId.RADAR, False):
            return False
        distances = [d for _, d, _ in self._radar_window]
        motions = [m for _, _, m in self._radar_window]
        return radar_reliable(distances, motions, self.reliability_cfg)

    def process(self, snapshot: AlignedSnapshot) -> FusedRow:
        radar_ok = self._radar_ok(snapshot)
        camera = evaluate_camera_metrics(snapshot, self.metrics_cfg)
        row, self.state = fuse_row(snapshot, camera, radar_ok, self.state, self.warning_cfg)
        return row
