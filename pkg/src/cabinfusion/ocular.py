"""Camera-derived drowsiness and attention indicators.

All functions are pure and operate on a time-sorted series of
``(ts_ms, CameraSample)`` pairs (session time). Between samples the signal
is treated as piecewise constant (sample-and-hold); integration windows are
closed on the left and clipped at ``window_end``.

Eyelid closure is ``1 - aperture``, so "at least 80% closed" reads as
closure >= 0.8. Face-lost frames carry no eyelid information and are
excluded from PERCLOS entirely, but they do count as off-road time for
attention: an undetected face cannot be verified as looking at the road.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError
from .model import CameraSample

TimedCamera = tuple[int, CameraSample]


@dataclass(frozen=True)
class BlinkEvent:
    close_ts: int
    reopen_ts: int

    @property
    def duration_ms(self) -> int:
        return self.reopen_ts - self.close_ts

    def __post_init__(self):
        if self.reopen_ts <= self.close_ts:
            raise ValidationError("blink reopen_ts must be after close_ts")


@dataclass(frozen=True)
class NodEvent:
    onset_ts: int
    drop_deg: float


@dataclass(frozen=True)
class MetricsWindowConfig:
    perclos_threshold: float = 0.8          # closure fraction counting as "closed"
    perclos_window_ms: int = 60_000
    blink_close_threshold: float = 0.8
    blink_reopen_threshold: float = 0.6
    long_blink_ms: int = 500
    gaze_yaw_limit_deg: float = 15.0
    gaze_pitch_limit_deg: float = 10.0
    distraction_dwell_ms: int = 2_000
    nod_drop_deg: float = 20.0
    nod_median_window_ms: int = 10_000
    nod_recovery_ms: int = 3_000
    camera_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)  # perclos, long blink, nod
    perclos_saturation: float = 0.15
    long_blink_saturation_per_min: float = 6.0
    nod_saturation_per_min: float = 3.0

    def __post_init__(self):
        if not (0.0 < self.blink_reopen_threshold < self.blink_close_threshold <= 1.0):
            raise ValidationError("need 0 < reopen_threshold < close_threshold <= 1")
        if abs(sum(self.camera_weights) - 1.0) > 1e-9:
            raise ValidationError("camera_weights must sum to 1")
        if self.perclos_window_ms <= 0 or self.distraction_dwell_ms < 0:
            raise ValidationError("window durations must be positive")


def _check_sorted(samples: Sequence[TimedCamera]) -> None:
    for i in range(1, len(samples)):
        if samples[i][0] < samples[i - 1][0]:
            raise ValidationError("camera series not time-sorted")


def _hold_spans(samples: Sequence[TimedCamera], window_start: int, window_end: int):
    """Yield (sample, span_ms) for the piecewise-constant signal clipped to
    [window_start, window_end]. The latest sample at or before window_start
    holds into the window; time before the first sample is uncovered."""
    for i, (ts, sample) in enumerate(samples):
        span_start = max(ts, window_start)
        span_end = samples[i + 1][0] if i + 1 < len(samples) else window_end
        span_end = min(span_end, window_end)
        if span_end > span_start:
            yield sample, span_end - span_start


def perclos(
    samples: Sequence[TimedCamera],
    cfg: MetricsWindowConfig,
    window_start: int | None = None,
    window_end: int | None = None,
) -> float:
    """Time-weighted fraction of observed eyelid time with closure at or
    above the threshold. Face-lost spans count in neither numerator nor
    denominator; returns 0.0 if no eyelid time was observed."""
    if len(samples) < 2:
        raise ValidationError("perclos needs at least 2 samples")
    _check_sorted(samples)
    if window_start is None:
        window_start = samples[0][0]
    if window_end is None:
        window_end = window_start + cfg.perclos_window_ms
    closed_ms = 0
    seen_ms = 0
    for sample, span in _hold_spans(samples, window_start, window_end):
        if not sample.face_detected:
            continue
        seen_ms += span
        if 1.0 - sample.aperture >= cfg.perclos_threshold:
            closed_ms += span
    if seen_ms == 0:
        return 0.0
    return closed_ms / seen_ms


def detect_blinks(samples: Sequence[TimedCamera], cfg: MetricsWindowConfig) -> list[BlinkEvent]:
    """Hysteresis blink detector on closure. An event opens when closure
    crosses the close threshold and ends when it falls back to the reopen
    threshold; face-lost frames abort any open event, and an event still
    open at the end of the series is discarded."""
    _check_sorted(samples)
    events: list[BlinkEvent] = []
    close_ts: int | None = None
    for ts, sample in samples:
        if not sample.face_detected:
            close_ts = None
            continue
        closure = 1.0 - sample.aperture
        if close_ts is None:
            if closure >= cfg.blink_close_threshold:
                close_ts = ts
        elif closure <= cfg.blink_reopen_threshold:
            if ts > close_ts:
                events.append(BlinkEvent(close_ts=close_ts, reopen_ts=ts))
            close_ts = None
    return events


def blink_rates(events: Sequence[BlinkEvent], window_ms: int, long_blink_ms: int = 500) -> tuple[float, float]:
    """Per-minute blink and long-blink rates for events inside a window."""
    if window_ms <= 0:
        raise ValidationError("window_ms must be positive")
    scale = 60_000 / window_ms
    long_count = sum(1 for e in events if e.duration_ms >= long_blink_ms)
    return len(events) * scale, long_count * scale


def attention(
    samples: Sequence[TimedCamera],
    cfg: MetricsWindowConfig,
    window_start: int | None = None,
    window_end: int | None = None,
) -> tuple[float | None, bool]:
    """On-road attention fraction and trailing-distraction flag.

    Gaze is on-road when both gaze angles are inside the configured cone;
    face-lost time is off-road. Returns (None, False) on empty input.
    distraction_active is true when the off-road run touching the end of
    the window has lasted at least the dwell time.
    """
    if not samples:
        return None, False
    _check_sorted(samples)
    if window_start is None:
        window_start = samples[0][0]
    if window_end is None:
        window_end = samples[-1][0]
    onroad_ms = 0
    total_ms = 0
    trailing_offroad_ms = 0
    for sample, span in _hold_spans(samples, window_start, window_end):
        onroad = (
            sample.face_detected
            and abs(sample.gaze_yaw_deg) <= cfg.gaze_yaw_limit_deg
            and abs(sample.gaze_pitch_deg) <= cfg.gaze_pitch_limit_deg
        )
        total_ms += span
        if onroad:
            onroad_ms += span
            trailing_offroad_ms = 0
        else:
            trailing_offroad_ms += span
    if total_ms == 0:
        return None, False
    distracted = trailing_offroad_ms >= cfg.distraction_dwell_ms
    return onroad_ms / total_ms, distracted


def detect_nods(samples: Sequence[TimedCamera], cfg: MetricsWindowConfig) -> list[NodEvent]:
    """Downward head-pitch excursions: pitch falls at least nod_drop_deg
    below the rolling median and comes back within the recovery bound.

    The median baseline is frozen at excursion onset so recovery is judged
    against a stable reference; an excursion that outlasts the recovery
    bound is a slump, not a nod, and is suppressed until the pitch exits
    the trigger zone.
    """
    _check_sorted(samples)
    events: list[NodEvent] = []
    window: list[tuple[int, float]] = []  # (ts, pitch), time-ordered
    sorted_pitch: list[float] = []
    onset_ts: int | None = None
    baseline = 0.0
    min_pitch = 0.0
    suppressed = False

    def rolling_median() -> float:
        n = len(sorted_pitch)
        mid = n // 2
        if n % 2:
            return sorted_pitch[mid]
        return (sorted_pitch[mid - 1] + sorted_pitch[mid]) / 2.0

    for ts, sample in samples:
        if not sample.face_detected:
            onset_ts = None
            suppressed = False
            continue
        pitch = sample.head_pitch_deg
        window.append((ts, pitch))
        bisect.insort(sorted_pitch, pitch)
        cutoff = ts - cfg.nod_median_window_ms
        while window and window[0][0] < cutoff:
            _, old = window.pop(0)
            del sorted_pitch[bisect.bisect_left(sorted_pitch, old)]
        if suppressed:
            if pitch > baseline - cfg.nod_drop_deg:
                suppressed = False
            continue
        if onset_ts is None:
            med = rolling_median()
            if pitch <= med - cfg.nod_drop_deg:
                onset_ts = ts
                baseline = med
                min_pitch = pitch
        else:
            min_pitch = min(min_pitch, pitch)
            if pitch > baseline - cfg.nod_drop_deg:
                if ts - onset_ts <= cfg.nod_recovery_ms:
                    events.append(NodEvent(onset_ts=onset_ts, drop_deg=baseline - min_pitch))
                onset_ts = None
            elif ts - onset_ts > cfg.nod_recovery_ms:
                onset_ts = None
                suppressed = True
    return events


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def camera_drowsiness(
    perclos_value: float,
    long_blink_rate_per_min: float,
    nod_rate_per_min: float,
    cfg: MetricsWindowConfig,
) -> float:
    """Composite camera drowsiness index: weighted sum of the three
    indicators, each normalized by its saturation point and capped at 1."""
    if min(perclos_value, long_blink_rate_per_min, nod_rate_per_min) < 0:
        raise ValidationError("camera_drowsiness inputs must be non-negative")
    w_perclos, w_longblink, w_nod = cfg.camera_weights
    return _clamp01(
        w_perclos * min(perclos_value / cfg.perclos_saturation, 1.0)
        + w_longblink * min(long_blink_rate_per_min / cfg.long_blink_saturation_per_min, 1.0)
        + w_nod * min(nod_rate_per_min / cfg.nod_saturation_per_min, 1.0)
    )
