"""Session-timeline alignment: clock calibration, out-of-order buffering
under a watermark, and sample-and-hold snapshot emission on a fixed grid.

The same code path serves live ingestion and offline log replay. The
emitted snapshot stream is a pure function of the multiset of ingested
records and the configuration: the "now" driving the watermark is the
maximum wall timestamp seen in the data, never the machine clock, and
clock calibration uses the n lowest-seq records per source rather than
arrival order. Both choices exist so that replaying a session's store dump
reproduces the live output exactly.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from math import floor
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import CalibrationError, ValidationError
from .model import CameraSample, SourceId, TimedRecord

U32_SPAN = 1 << 32

DEFAULT_STALENESS_MS: dict[SourceId, int] = {
    SourceId.RADAR: 2_500,
    SourceId.WEARABLE: 5_000,
    SourceId.CAMERA: 1_500,
}


@dataclass(frozen=True)
class GridConfig:
    step_ms: int = 1_000
    lateness_ms: int = 500
    staleness_ms: Mapping[SourceId, int] = field(default_factory=lambda: dict(DEFAULT_STALENESS_MS))
    # A silent source stalls the watermark for staleness+lateness+grace
    # before being excluded from the min; generous so transient transport
    # lag delays output instead of changing it.
    watermark_grace_ms: int = 10_000

    def __post_init__(self):
        if self.step_ms <= 0:
            raise ValidationError("step_ms must be positive")
        if self.lateness_ms < 0 or self.watermark_grace_ms < 0:
            raise ValidationError("lateness_ms and watermark_grace_ms must be non-negative")

    def staleness(self, source: SourceId) -> int:
        return self.staleness_ms.get(source, 5_000)


@dataclass(frozen=True)
class ClockModel:
    """Constant-offset clock map: session_ts = device_ts + offset_ms.
    residual_ms (median absolute deviation of the fit) is kept so drift
    over a long session would be visible; it is never compensated."""

    offset_ms: int
    calibrated: bool = True
    residual_ms: int = 0

    def __post_init__(self):
        if self.residual_ms < 0:
            raise ValidationError("residual_ms must be non-negative")


class IngestResult(Enum):
    ACCEPTED = "accepted"
    BUFFERED = "buffered"  # held until the source's clock is calibrated
    DUPLICATE = "duplicate"
    LATE = "late"


@dataclass(frozen=True)
class AlignedSnapshot:
    """Per-grid-tick view: latest fresh sample per source plus the trailing
    camera buffer for windowed metrics (one pre-window sample included so
    hold integration can cover the window start)."""

    grid_ts: int
    samples: dict[SourceId, tuple[int, object]]  # source -> (session_ts, payload); fresh only
    fresh: dict[SourceId, bool]
    camera_window: tuple[tuple[int, CameraSample], ...]

    def sample(self, source: SourceId):
        entry = self.samples.get(source)
        return entry[1] if entry else None

    def sample_ts(self, source: SourceId) -> int | None:
        entry = self.samples.get(source)
        return entry[0] if entry else None


def _round_half_up(x: float) -> int:
    return floor(x + 0.5)


def _median_int(values: Sequence[int]) -> int:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2:
        return ordered[mid]
    return _round_half_up((ordered[mid - 1] + ordered[mid]) / 2.0)


def _unwrap_u32(device_ts: Sequence[int]) -> list[int]:
    """Monotonic unwrap of a u32 ms-since-boot clock given seq order."""
    out: list[int] = []
    wraps = 0
    prev = None
    for ts in device_ts:
        if prev is not None and ts < prev:
            wraps += 1
        prev = ts
        out.append(ts + wraps * U32_SPAN)
    return out


def calibrate(source: SourceId, first_records: Sequence[TimedRecord], n: int = 20) -> ClockModel:
    """Fit the constant clock offset from the n lowest-seq records:
    offset = median(wall - device), residual = median absolute deviation.
    The radar's u32 boot clock is unwrapped before the fit."""
    if len(first_records) < 5:
        raise CalibrationError(f"{source.value}: need at least 5 records, got {len(first_records)}")
    records = sorted(first_records, key=lambda r: r.seq)[:n]
    device = [r.device_ts_ms for r in records]
    if source is SourceId.RADAR:
        device = _unwrap_u32(device)
    deltas = [r.wall_ts_ms - d for r, d in zip(records, device)]
    offset = _median_int(deltas)
    residual = _median_int([abs(d - offset) for d in deltas])
    return ClockModel(offset_ms=offset, calibrated=True, residual_ms=residual)


class Aligner:
    """Single-owner alignment state machine. Callers serialize ingest() and
    advance(); snapshots are immutable once emitted."""

    def __init__(
        self,
        sources: Iterable[SourceId],
        grid: GridConfig | None = None,
        calibration_n: int = 20,
        camera_window_ms: int = 60_000,
    ):
        self.sources = frozenset(sources)
        if not self.sources:
            raise ValidationError("aligner needs at least one source")
        self.grid = grid or GridConfig()
        self.calibration_n = calibration_n
        self.camera_window_ms = camera_window_ms
        self.clock: dict[SourceId, ClockModel] = {}
        self.late_drops = 0
        self.uncalibrated_drops = 0
        self._seen_seq: dict[SourceId, set[int]] = {s: set() for s in self.sources}
        self._precal: dict[SourceId, dict[int, TimedRecord]] = {s: {} for s in self.sources}
        self._buffer: dict[SourceId, list[tuple[int, int, object]]] = {s: [] for s in self.sources}
        self._latest: dict[SourceId, int] = {}
        self._first: dict[SourceId, int] = {}
        self._camera_buf: list[tuple[int, int, CameraSample]] = []  # (session_ts, seq, sample)
        self._last_raw_device: dict[SourceId, int] = {}
        self._wraps: dict[SourceId, int] = {s: 0 for s in self.sources}
        self._max_wall = 0
        self._watermark: int | None = None
        self._next_tick: int | None = None

    # -- ingestion ---------------------------------------------------------

    def ingest(self, record: TimedRecord) -> IngestResult:
        source = record.source
        if source not in self.sources:
            raise ValidationError(f"source {source.value} not configured for alignment")
        if record.seq in self._seen_seq[source]:
            return IngestResult.DUPLICATE
        self._seen_seq[source].add(record.seq)
        self._max_wall = max(self._max_wall, record.wall_ts_ms)
        if source not in self.clock:
            self._precal[source][record.seq] = record
            if self._calibration_ready(source):
                self._calibrate_and_flush(source)
            return IngestResult.BUFFERED
        return self._admit(record)

    def _calibration_ready(self, source: SourceId) -> bool:
        seqs = self._precal[source].keys()
        return all(i in seqs for i in range(self.calibration_n))

    def _calibrate_and_flush(self, source: SourceId, n: int | None = None) -> None:
        pending = sorted(self._precal[source].values(), key=lambda r: r.seq)
        self.clock[source] = calibrate(source, pending, n or self.calibration_n)
        self._precal[source] = {}
        for record in pending:
            self._admit(record)

    def _session_ts(self, record: TimedRecord) -> int:
        # Radar wrap tracking assumes in-seq arrival, which the serial byte
        # stream guarantees; epoch-clock sources never wrap.
        raw = record.device_ts_ms
        source = record.source
        if source is SourceId.RADAR:
            last = self._last_raw_device.get(source)
            if last is not None and raw < last:
                self._wraps[source] += 1
            self._last_raw_device[source] = raw
            raw += self._wraps[source] * U32_SPAN
        return raw + self.clock[source].offset_ms

    def _admit(self, record: TimedRecord) -> IngestResult:
        source = record.source
        ts = self._session_ts(record)
        if self._watermark is not None and ts < self._watermark - self.grid.staleness(source):
            self.late_drops += 1
            return IngestResult.LATE
        bisect.insort(self._buffer[source], (ts, record.seq, record.payload))
        if source is SourceId.CAMERA:
            bisect.insort(self._camera_buf, (ts, record.seq, record.payload))
        self._latest[source] = max(self._latest.get(source, ts), ts)
        self._first[source] = min(self._first.get(source, ts), ts)
        return IngestResult.ACCEPTED

    # -- emission ----------------------------------------------------------

    def advance(self, now_wall: int) -> list[AlignedSnapshot]:
        """Emit every not-yet-emitted grid tick at or below the watermark.
        The watermark is the min of the live sources' latest session time,
        capped at now_wall - lateness; a source silent beyond its staleness
        plus grace is excluded until it resumes."""
        if not self._all_calibrated():
            return []
        horizon = now_wall - self.grid.lateness_ms
        live = [
            s
            for s in self.sources
            if self._latest.get(s) is not None
            and self._latest[s] >= horizon - self.grid.staleness(s) - self.grid.watermark_grace_ms
        ]
        if not live:
            return []
        wm = min(min(self._latest[s] for s in live), horizon)
        if self._watermark is not None:
            wm = max(wm, self._watermark)
        self._watermark = wm
        return self._emit_through(wm)

    def drain(self) -> list[AlignedSnapshot]:
        """End-of-session flush: calibrate stragglers with whatever arrived,
        then emit every tick covered by any source's data."""
        for source in self.sources:
            if source not in self.clock:
                pending = self._precal[source]
                if len(pending) >= 5:
                    self._calibrate_and_flush(source, n=self.calibration_n)
                else:
                    self.uncalibrated_drops += len(pending)
                    self._precal[source] = {}
                    self.clock[source] = ClockModel(offset_ms=0, calibrated=False)
        if not self._latest:
            return []
        wm = max(self._latest.values())
        if self._watermark is not None:
            wm = max(wm, self._watermark)
        self._watermark = wm
        return self._emit_through(wm)

    def _all_calibrated(self) -> bool:
        return all(s in self.clock for s in self.sources)

    def _emit_through(self, watermark: int) -> list[AlignedSnapshot]:
        if self._next_tick is None:
            if not self._first:
                return []
            anchor = min(self._first.values())
            self._next_tick = (anchor // self.grid.step_ms) * self.grid.step_ms + self.grid.step_ms
        out = []
        while self._next_tick <= watermark:
            out.append(self._snapshot(self._next_tick))
            self._next_tick += self.grid.step_ms
        if out:
            self._prune(out[-1].grid_ts)
        return out

    def _snapshot(self, tick: int) -> AlignedSnapshot:
        samples: dict[SourceId, tuple[int, object]] = {}
        fresh: dict[SourceId, bool] = {}
        for source in self.sources:
            buf = self._buffer[source]
            idx = bisect.bisect_right(buf, (tick, float("inf")))
            is_fresh = False
            if idx:
                ts, _seq, payload = buf[idx - 1]
                if tick - ts <= self.grid.staleness(source):
                    is_fresh = True
                    samples[source] = (ts, payload)
            fresh[source] = is_fresh
        window_start = tick - self.camera_window_ms
        hi = bisect.bisect_right(self._camera_buf, (tick, float("inf")))
        lo = bisect.bisect_left(self._camera_buf, (window_start, -1))
        if lo > 0:
            lo -= 1  # hold the last pre-window sample into the window
        window = tuple((ts, sample) for ts, _seq, sample in self._camera_buf[lo:hi])
        return AlignedSnapshot(grid_ts=tick, samples=samples, fresh=fresh, camera_window=window)

    def _prune(self, tick: int) -> None:
        for source in self.sources:
            # anything at or below tick - staleness is stale for every
            # future tick and can never be selected again
            cutoff = tick - self.grid.staleness(source)
            buf = self._buffer[source]
            del buf[: bisect.bisect_right(buf, (cutoff, float("inf")))]
        cam_cutoff = tick - self.camera_window_ms - 2 * self.grid.step_ms
        idx = bisect.bisect_left(self._camera_buf, (cam_cutoff, -1))
        if idx > 1:
            del self._camera_buf[: idx - 1]


def replay_logs(
    readers: Sequence[Iterable[TimedRecord]],
    sources: Iterable[SourceId] = (SourceId.RADAR, SourceId.WEARABLE, SourceId.CAMERA),
    grid: GridConfig | None = None,
    calibration_n: int = 20,
    camera_window_ms: int = 60_000,
) -> Iterator[AlignedSnapshot]:
    """Offline mode: feed per-device log readers through the same aligner
    used live, with now simulated as the max wall timestamp seen. Yields
    the identical snapshot stream a live run over the same records emits."""
    aligner = Aligner(sources, grid=grid, calibration_n=calibration_n, camera_window_ms=camera_window_ms)
    max_wall = 0
    for reader in readers:
        for record in reader:
            max_wall = max(max_wall, record.wall_ts_ms)
            aligner.ingest(record)
            yield from aligner.advance(max_wall)
    yield from aligner.drain()
