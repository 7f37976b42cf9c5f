"""Bit-exact codec for the vital-sign radar's binary serial stream.

Frame layout (17 bytes, little-endian):

    offset  size  field
    0       2     sync        0xAA 0x55
    2       1     version     0x01
    3       1     payload_len 0x0C
    4       4     device_ts   u32, ms since device boot
    8       2     hr          u16, deci-bpm
    10      2     rr          u16, deci-breaths/min
    12      2     distance    u16, mm
    14      1     flags       bit0 motion, bit1 presence
    15      1     reserved    0x00
    16      1     checksum    sum(bytes 2..15) mod 256

The decoder accepts arbitrary chunk boundaries, rescans byte-by-byte after
bad sync or a checksum failure, and never raises on corrupt input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import ValidationError
from .model import RadarSample

SYNC = b"\xAA\x55"
VERSION = 0x01
PAYLOAD_LEN = 0x0C
FRAME_LEN = 17

# The codec operates on the same value type the rest of the pipeline uses.
RadarFrame = RadarSample

_PAYLOAD_STRUCT = struct.Struct("<IHHHBB")


def _checksum(body: bytes) -> int:
    return sum(body) & 0xFF


def encode_frame(frame: RadarFrame) -> bytes:
    """Encode one frame to its 17-byte wire form."""
    hr_deci = round(frame.hr_bpm * 10)
    rr_deci = round(frame.rr_bpm * 10)
    distance = round(frame.distance_mm)
    if abs(frame.distance_mm - distance) > 1e-6:
        raise ValidationError(f"distance_mm {frame.distance_mm} not integral")
    if not 0 <= hr_deci <= 0xFFFF:
        raise ValidationError(f"hr_bpm {frame.hr_bpm} not representable as u16 deci-bpm")
    if not 0 <= rr_deci <= 0xFFFF:
        raise ValidationError(f"rr_bpm {frame.rr_bpm} not representable as u16 deci-units")
    if not 0 <= distance <= 0xFFFF:
        raise ValidationError(f"distance_mm {frame.distance_mm} not representable as u16")
    flags = (1 if frame.motion else 0) | (2 if frame.presence else 0)
    body = bytes((VERSION, PAYLOAD_LEN)) + _PAYLOAD_STRUCT.pack(
        frame.device_ts, hr_deci, rr_deci, distance, flags, 0x00
    )
    return SYNC + body + bytes((_checksum(body),))


@dataclass
class DecoderState:
    """Carry-over buffer plus counters; one instance per serial source."""

    buffer: bytes = b""
    frames_ok: int = 0
    frames_bad_checksum: int = 0
    bytes_skipped: int = 0


def _parse_frame(raw: bytes) -> RadarFrame:
    device_ts, hr_deci, rr_deci, distance, flags, _reserved = _PAYLOAD_STRUCT.unpack(raw[4:16])
    return RadarSample(
        device_ts=device_ts,
        hr_bpm=hr_deci / 10.0,
        rr_bpm=rr_deci / 10.0,
        distance_mm=float(distance),
        motion=bool(flags & 0x01),
        presence=bool(flags & 0x02),
    )


def decode_stream(state: DecoderState, chunk: bytes) -> tuple[list[RadarFrame], DecoderState]:
    """Feed a chunk of bytes; return complete frames plus the updated state.

    Emits every well-formed frame exactly once regardless of chunking. On
    bad sync, wrong header, or checksum mismatch, advances one byte and
    rescans; corruption is counted, never raised.
    """
    buf = state.buffer + bytes(chunk)
    frames: list[RadarFrame] = []
    i = 0
    n = len(buf)
    while i < n:
        if buf[i] != SYNC[0]:
            i += 1
            state.bytes_skipped += 1
            continue
        if i + 2 > n:
            break  # need the second sync byte
        if buf[i + 1] != SYNC[1]:
            i += 1
            state.bytes_skipped += 1
            continue
        if i + FRAME_LEN > n:
            break  # incomplete frame, wait for more data
        candidate = buf[i : i + FRAME_LEN]
        if candidate[2] != VERSION or candidate[3] != PAYLOAD_LEN:
            i += 1
            state.bytes_skipped += 1
            continue
        if _checksum(candidate[2:16]) != candidate[16]:
            state.frames_bad_checksum += 1
            i += 1
            state.bytes_skipped += 1
            continue
        frames.append(_parse_frame(candidate))
        state.frames_ok += 1
        i += FRAME_LEN
    state.buffer = buf[i:]
    return frames, state
