"""Session persistence: the bit-exact fused CSV log, an append-only
JSON-lines document store with time-range queries, and the log readers
used by offline replay.

CSV contract: the header row below, one FusedRow per line, absent optional
fields empty, reals with '.' separator and at most 4 fractional digits
(trailing zeros trimmed, never exponent notation), booleans "true"/"false".
Rows are quantized to 4 decimals by the fusion builder, so
read(write(rows)) == rows and re-serializing a read file is byte-identical.
"""

from __future__ import annotations

import bisect
import threading
import time
from pathlib import Path
from typing import Iterable, Iterator

from .errors import IoError, ParseError, ReplayError, SchemaError
from .model import FusedRow, SourceId, TimedRecord, WarningLevel, decode_record, encode_record

CSV_COLUMNS = (
    "grid_ts_ms",
    "hr_bpm",
    "hr_source",
    "rr_bpm",
    "rr_source",
    "hrv_rmssd_ms",
    "drowsiness_physio",
    "perclos",
    "blink_rate_per_min",
    "long_blink_rate_per_min",
    "attention",
    "drowsiness_camera",
    "warning",
    "radar_reliable",
    "wearable_fresh",
    "camera_fresh",
)
CSV_HEADER = ",".join(CSV_COLUMNS)

_REAL_FIELDS = {
    "hr_bpm",
    "rr_bpm",
    "hrv_rmssd_ms",
    "drowsiness_physio",
    "perclos",
    "blink_rate_per_min",
    "long_blink_rate_per_min",
    "attention",
    "drowsiness_camera",
}


def format_real(value: float) -> str:
    text = f"{value:.4f}".rstrip("0").rstrip(".")
    return text or "0"


def format_row(row: FusedRow) -> str:
    fields = [str(row.grid_ts_ms)]
    for name in CSV_COLUMNS[1:12]:
        value = getattr(row, name)
        if value is None:
            fields.append("")
        elif name in ("hr_source", "rr_source"):
            fields.append(value.value)
        else:
            fields.append(format_real(value))
    fields.append(row.warning.value)
    for name in ("radar_reliable", "wearable_fresh", "camera_fresh"):
        fields.append("true" if getattr(row, name) else "false")
    return ",".join(fields)


class CsvWriter:
    """Streaming CSV sink: header on open, flush every flush_interval_s and
    on close. Failures raise IoError carrying the rows written so far."""

    def __init__(self, path: str | Path, flush_interval_s: float = 5.0):
        self.path = Path(path)
        self.rows_written = 0
        self._flush_interval = flush_interval_s
        self._last_flush = time.monotonic()
        try:
            self._fh = open(self.path, "w", encoding="utf-8", newline="")
            self._fh.write(CSV_HEADER + "\n")
        except OSError as exc:
            raise IoError(f"cannot open CSV sink {path}: {exc}") from exc

    def write_row(self, row: FusedRow) -> None:
        try:
            self._fh.write(format_row(row) + "\n")
        except OSError as exc:
            raise IoError(f"CSV write failed: {exc}", rows_written=self.rows_written) from exc
        self.rows_written += 1
        now = time.monotonic()
        if now - self._last_flush >= self._flush_interval:
            self._fh.flush()
            self._last_flush = now

    def close(self) -> int:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()
        return self.rows_written


def write_csv(rows: Iterable[FusedRow], sink: str | Path) -> int:
    writer = CsvWriter(sink)
    try:
        for row in rows:
            writer.write_row(row)
    finally:
        writer.close()
    return writer.rows_written


def _parse_real(text: str, name: str, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise ParseError(f"line {lineno}: bad {name} field {text!r}") from exc
    if not value == value or value in (float("inf"), float("-inf")):
        raise ParseError(f"line {lineno}: non-finite {name}")
    return value


def _parse_bool(text: str, name: str, lineno: int) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ParseError(f"line {lineno}: bad {name} field {text!r}")


def read_csv(source: str | Path) -> list[FusedRow]:
    """Read a fused CSV log back into rows. The header must match the
    schema exactly; a malformed or truncated line names its line number."""
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read CSV {path}: {exc}") from exc
    if not text:
        raise SchemaError(f"{path}: empty file, expected header {CSV_HEADER!r}")
    lines = text.split("\n")
    if lines[0] != CSV_HEADER:
        raise SchemaError(f"{path}: header mismatch: expected {CSV_HEADER!r}, got {lines[0]!r}")
    if lines[-1] == "":
        lines.pop()
    elif len(lines) > 1:
        raise ParseError(f"line {len(lines)}: truncated final line (no newline)")
    rows: list[FusedRow] = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(CSV_COLUMNS):
            raise ParseError(f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(fields)}")
        values: dict = {}
        for name, text_value in zip(CSV_COLUMNS, fields):
            if name == "grid_ts_ms":
                try:
                    values[name] = int(text_value)
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: bad grid_ts_ms {text_value!r}") from exc
            elif name in _REAL_FIELDS:
                values[name] = None if text_value == "" else _parse_real(text_value, name, lineno)
            elif name in ("hr_source", "rr_source"):
                if text_value == "":
                    values[name] = None
                else:
                    try:
                        values[name] = SourceId(text_value)
                    except ValueError as exc:
                        raise ParseError(f"line {lineno}: bad {name} {text_value!r}") from exc
            elif name == "warning":
                try:
                    values[name] = WarningLevel(text_value)
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: bad warning {text_value!r}") from exc
            else:
                values[name] = _parse_bool(text_value, name, lineno)
        rows.append(FusedRow(**values))
    return rows


class DocumentStore:
    """Append-only JSON-lines document store, one file per session, with an
    in-memory per-session (wall_ts-sorted) index rebuilt lazily on open.

    Stands in for the remote document database: same narrow interface
    (append + time-range query), schema-flexible records, no fixed tables.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._files: dict[str, object] = {}
        # session -> list of (wall_ts, arrival_index, record), kept sorted
        self._index: dict[str, list[tuple[int, int, TimedRecord]]] = {}
        self._counts: dict[str, int] = {}

    def _path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.jsonl"

    def _load(self, session_id: str) -> list[tuple[int, int, TimedRecord]]:
        if session_id in self._index:
            return self._index[session_id]
        entries: list[tuple[int, int, TimedRecord]] = []
        path = self._path(session_id)
        if path.exists():
            for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
                if not line.strip():
                    continue
                record = decode_record(line)
                bisect.insort(entries, (record.wall_ts_ms, i, record))
        self._index[session_id] = entries
        self._counts[session_id] = len(entries)
        return entries

    def append(self, record: TimedRecord) -> None:
        with self._lock:
            sid = record.session_id
            entries = self._load(sid)
            if sid not in self._files:
                try:
                    self._files[sid] = open(self._path(sid), "a", encoding="utf-8")
                except OSError as exc:
                    raise IoError(f"cannot open store file for {sid}: {exc}") from exc
            fh = self._files[sid]
            try:
                fh.write(encode_record(record) + "\n")
                fh.flush()
            except OSError as exc:
                raise IoError(f"store append failed for {sid}: {exc}") from exc
            order = self._counts[sid]
            self._counts[sid] = order + 1
            bisect.insort(entries, (record.wall_ts_ms, order, record))

    def query(
        self,
        session_id: str,
        source: SourceId | None = None,
        t0: int = 0,
        t1: int = 2**62,
    ) -> list[TimedRecord]:
        """Records with t0 <= wall_ts_ms <= t1 (optionally one source),
        sorted by wall timestamp. Unknown sessions yield an empty list."""
        if t0 > t1:
            raise SchemaError(f"query range inverted: {t0} > {t1}")
        with self._lock:
            entries = self._load(session_id)
            lo = bisect.bisect_left(entries, (t0, -1))
            hi = bisect.bisect_right(entries, (t1, 2**62))
            window = entries[lo:hi]
        records = [r for _, _, r in window]
        if source is not None:
            records = [r for r in records if r.source is source]
        return records

    def sessions(self) -> list[str]:
        with self._lock:
            known = {p.stem for p in self.root.glob("*.jsonl")} | set(self._index)
        return sorted(known)

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.close()
            self._files.clear()


def read_jsonl(path: str | Path) -> Iterator[TimedRecord]:
    """Yield TimedRecords from a raw JSON-lines dump; used as an offline
    replay reader. Unreadable or undecodable input raises ReplayError
    naming the file."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield decode_record(line)
                except Exception as exc:
                    raise ReplayError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise ReplayError(f"{path}: {exc}") from exc


def csv_files_equal(a: str | Path, b: str | Path) -> bool:
    return Path(a).read_bytes() == Path(b).read_bytes()
