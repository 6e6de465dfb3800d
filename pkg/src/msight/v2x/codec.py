"""Binary perception message: an SDSM-style vehicle list with CRC-32 trailer.

Layout (little-endian)::

    magic     4s   b"MSV2"
    version   u8   1: no predicted path, 2: adds K and K points per vehicle
    seq       u32
    producer  u64  ms, wall clock at encode
    frame     u64  ms, sensor frame time
    count     u16
    [K        u8 ] version 2 only
    count x:
      id u32, class u8, lat i32, lon i32, heading u16, speed u16, reserved u8
      [K x (lat i32, lon i32)]
    crc       u32  CRC-32 (IEEE) of every preceding byte

Quanta: 1e-7 deg for positions, 0.0125 deg heading, 0.02 m/s speed.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

MAGIC = b"MSV2"
LATLON_Q = 1e-7
HEADING_Q = 0.0125
SPEED_Q = 0.02

_HEAD = struct.Struct("<4sBIQQH")
_K = struct.Struct("<B")
_VEH = struct.Struct("<IBiiHHB")
_PT = struct.Struct("<ii")
_CRC = struct.Struct("<I")

HEADER_SIZE = {1: _HEAD.size, 2: _HEAD.size + _K.size}
MIN_SIZE = _HEAD.size + _CRC.size
VEHICLE_SIZE = _VEH.size
POINT_SIZE = _PT.size


class CodecError(ValueError):
    pass


class BadMagic(CodecError):
    pass


class BadCrc(CodecError):
    pass


class TruncatedMessage(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class RangeOverflow(CodecError):
    pass


@dataclass(frozen=True)
class VehicleEntry:
    id: int
    cls: int  # object class code
    lat: float
    lon: float
    heading_deg: float  # compass, clockwise from north
    speed_mps: float
    path: tuple = ()  # predicted (lat, lon) points


@dataclass(frozen=True)
class PerceptionMessage:
    seq: int
    producer_ts_ms: int
    frame_ts_ms: int
    vehicles: tuple = ()
    horizon: int = 0  # K; 0 encodes as version 1

    @property
    def version(self) -> int:
        return 2 if self.horizon else 1


def encoded_size(n_vehicles: int, horizon: int = 0) -> int:
    v = 2 if horizon else 1
    return HEADER_SIZE[v] + n_vehicles * (VEHICLE_SIZE + horizon * POINT_SIZE) + _CRC.size


def _fixed(x: float, q: float, lo: int, hi: int, what: str) -> int:
    if not math.isfinite(x):
        raise RangeOverflow(f"{what} is not finite")
    v = round(x / q)
    if not lo <= v <= hi:
        raise RangeOverflow(f"{what}={x} outside encodable range")
    return v


def _lat(x):
    if abs(x) > 90:
        raise RangeOverflow(f"latitude {x} outside [-90, 90]")
    return _fixed(x, LATLON_Q, -2**31, 2**31 - 1, "lat")


def _lon(x):
    if abs(x) > 180:
        raise RangeOverflow(f"longitude {x} outside [-180, 180]")
    return _fixed(x, LATLON_Q, -2**31, 2**31 - 1, "lon")


def _heading(x):
    if not math.isfinite(x):
        raise RangeOverflow("heading is not finite")
    return round((x % 360.0) / HEADING_Q) % round(360 / HEADING_Q)


def _int(x, bits, what):
    if not (isinstance(x, int) and 0 <= x < 2**bits):
        raise RangeOverflow(f"{what}={x!r} does not fit u{bits}")
    return x


def encode(m: PerceptionMessage) -> bytes:
    k = m.horizon
    if not 0 <= k <= 255:
        raise RangeOverflow(f"horizon {k} does not fit u8")
    if len(m.vehicles) > 0xFFFF:
        raise RangeOverflow("more than 65535 vehicles")
    out = [_HEAD.pack(MAGIC, m.version, _int(m.seq, 32, "seq"), _int(m.producer_ts_ms, 64, "producer_ts"),
                      _int(m.frame_ts_ms, 64, "frame_ts"), len(m.vehicles))]
    if k:
        out.append(_K.pack(k))
    for v in m.vehicles:
        if len(v.path) != k:
            raise RangeOverflow(f"vehicle {v.id} carries {len(v.path)} path points, message horizon is {k}")
        out.append(_VEH.pack(_int(v.id, 32, "id"), _int(v.cls, 8, "class"), _lat(v.lat), _lon(v.lon),
                             _heading(v.heading_deg),
                             _fixed(v.speed_mps, SPEED_Q, 0, 0xFFFF, "speed"), 0))
        for la, lo in v.path:
            out.append(_PT.pack(_lat(la), _lon(lo)))
    body = b"".join(out)
    return body + _CRC.pack(zlib.crc32(body))


def _explained_by_one_field(tail: int, count: int, k: int) -> bool:
    # a corrupted count (k intact) or corrupted k (count intact) still leaves a
    # body that is a whole number of records; a cut-off buffer does not
    per = VEHICLE_SIZE + k * POINT_SIZE
    if tail >= 0 and tail % per == 0:
        return True
    if count == 0:
        return tail == 0
    return tail >= count * VEHICLE_SIZE and (tail - count * VEHICLE_SIZE) % (count * POINT_SIZE) == 0


def decode(buf: bytes) -> PerceptionMessage:
    """Validate and parse one message.

    The CRC is checked before any field is trusted. A bad CRC on a buffer
    whose length cannot be explained by the header is reported as truncation.
    """
    buf = bytes(buf)
    if len(buf) < MIN_SIZE:
        raise TruncatedMessage(f"{len(buf)} bytes is shorter than the minimum {MIN_SIZE}")
    magic, version, seq, prod, frame, count = _HEAD.unpack_from(buf)
    body, (crc,) = buf[:-4], _CRC.unpack_from(buf, len(buf) - 4)
    if zlib.crc32(body) != crc:
        if version in HEADER_SIZE and len(buf) >= HEADER_SIZE[version] + _CRC.size:
            k = _K.unpack_from(buf, _HEAD.size)[0] if version == 2 else 0
            tail = len(buf) - HEADER_SIZE[version] - _CRC.size
            if tail < count * (VEHICLE_SIZE + k * POINT_SIZE) and not _explained_by_one_field(tail, count, k):
                raise TruncatedMessage(f"{len(buf)} bytes, header advertises {encoded_size(count, k)}")
        raise BadCrc("CRC-32 mismatch")
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version not in HEADER_SIZE:
        raise UnsupportedVersion(f"version {version}")
    k = _K.unpack_from(buf, _HEAD.size)[0] if version == 2 else 0
    if version == 2 and k == 0:
        raise UnsupportedVersion("version 2 message with zero horizon")
    want = encoded_size(count, k)
    if len(buf) != want:
        raise TruncatedMessage(f"{len(buf)} bytes, header advertises {want}")
    off = HEADER_SIZE[version]
    vehicles = []
    for _ in range(count):
        vid, cls, la, lo, hd, sp, _res = _VEH.unpack_from(buf, off)
        off += VEHICLE_SIZE
        path = []
        for _ in range(k):
            pa, po = _PT.unpack_from(buf, off)
            off += POINT_SIZE
            path.append((pa * LATLON_Q, po * LATLON_Q))
        vehicles.append(VehicleEntry(vid, cls, la * LATLON_Q, lo * LATLON_Q, hd * HEADING_Q, sp * SPEED_Q,
                                     tuple(path)))
    return PerceptionMessage(seq, prod, frame, tuple(vehicles), k)


def quantize(m: PerceptionMessage) -> PerceptionMessage:
    """The message exactly as a receiver will see it."""
    return decode(encode(m))
