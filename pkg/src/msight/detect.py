"""Detection data contract, NDJSON log replay, and a synthetic detector.

Boxes follow the bottom-surface convention: the box is the minimum bounding
rectangle of the object's ground footprint, so its centre is the object's
ground position.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .calib import CAMERA_IDS, CalibrationError, CameraCalibration
from .geo import PixelPoint

FRAME_INTERVAL_MS = 400  # 2.5 Hz


class ParseError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class NonMonotoneTimestamp(ValueError):
    pass


class ObjectClass(enum.Enum):
    Car = "car"
    TruckBusTrailer = "truck"
    VulnerableRoadUser = "vru"

    @property
    def code(self) -> int:
        return _CLASS_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "ObjectClass":
        return _CODE_CLASSES[code]


_CLASS_CODES = {ObjectClass.Car: 0, ObjectClass.TruckBusTrailer: 1, ObjectClass.VulnerableRoadUser: 2}
_CODE_CLASSES = {v: k for k, v in _CLASS_CODES.items()}


@dataclass(frozen=True)
class BottomBox:
    u: float
    v: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"box size must be positive, got {self.width} x {self.height}")

    @property
    def center(self) -> PixelPoint:
        return PixelPoint(self.u, self.v)

    def corners(self) -> np.ndarray:
        hw, hh = self.width / 2, self.height / 2
        return np.array([[self.u - hw, self.v - hh], [self.u + hw, self.v - hh],
                         [self.u + hw, self.v + hh], [self.u - hw, self.v + hh]])


@dataclass(frozen=True)
class DetectionRecord:
    camera_id: str
    frame_ts: int
    cls: ObjectClass
    box: BottomBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> dict:
        b = self.box
        return {"cam": self.camera_id, "ts": self.frame_ts, "cls": self.cls.value,
                "u": b.u, "v": b.v, "w": b.width, "h": b.height, "conf": self.confidence}


@dataclass(frozen=True)
class DetectionFrame:
    camera_id: str
    frame_ts: int
    detections: tuple = ()

    def __post_init__(self):
        for d in self.detections:
            if d.camera_id != self.camera_id or d.frame_ts != self.frame_ts:
                raise ValueError("all records in a frame must share camera id and timestamp")


# ---------------------------------------------------------------------------
# NDJSON log

_FIELDS = ("cam", "ts", "cls", "u", "v", "w", "h", "conf")


def _parse_line(lineno: int, text: str) -> DetectionRecord:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(lineno, f"invalid JSON ({e.msg})") from None
    if not isinstance(obj, dict):
        raise ParseError(lineno, "record must be a JSON object")
    for k in _FIELDS:
        if k not in obj:
            raise ParseError(lineno, f"missing field '{k}'")
    if obj["cam"] not in CAMERA_IDS:
        raise ParseError(lineno, f"field 'cam': unknown camera {obj['cam']!r}")
    ts = obj["ts"]
    if not isinstance(ts, int) or isinstance(ts, bool) or ts < 0:
        raise ParseError(lineno, "field 'ts': expected non-negative integer milliseconds")
    try:
        cls = ObjectClass(obj["cls"])
    except ValueError:
        raise ParseError(lineno, f"field 'cls': unknown class {obj['cls']!r}") from None
    nums = {}
    for k in ("u", "v", "w", "h", "conf"):
        x = obj[k]
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ParseError(lineno, f"field '{k}': expected a finite number")
        nums[k] = float(x)
    if not 0.0 <= nums["conf"] <= 1.0:
        raise ParseError(lineno, f"field 'conf': {nums['conf']} outside [0, 1]")
    if nums["w"] <= 0 or nums["h"] <= 0:
        raise ParseError(lineno, "field 'w'/'h': box size must be positive")
    box = BottomBox(nums["u"], nums["v"], nums["w"], nums["h"])
    return DetectionRecord(obj["cam"], ts, cls, box, nums["conf"])


def read_detection_log(stream: Iterable[str]) -> list[DetectionFrame]:
    """Group NDJSON detection records into frames keyed by (camera, ts).

    Frames come back sorted by timestamp, then camera id. A record whose
    timestamp is older than an earlier record of the same camera raises
    NonMonotoneTimestamp.
    """
    groups: dict[tuple[str, int], list[DetectionRecord]] = {}
    last: dict[str, int] = {}
    for lineno, text in enumerate(stream, 1):
        if not text.strip():
            continue
        rec = _parse_line(lineno, text)
        prev = last.get(rec.camera_id)
        if prev is not None and rec.frame_ts < prev:
            raise NonMonotoneTimestamp(
                f"line {lineno}: camera {rec.camera_id} timestamp {rec.frame_ts} < {prev}")
        last[rec.camera_id] = rec.frame_ts
        groups.setdefault((rec.camera_id, rec.frame_ts), []).append(rec)
    keys = sorted(groups, key=lambda k: (k[1], CAMERA_IDS.index(k[0])))
    return [DetectionFrame(c, t, tuple(groups[(c, t)])) for c, t in keys]


def write_detection_log(frames: Iterable[DetectionFrame], stream) -> None:
    # empty frames carry no records, so they do not survive a round trip
    for fr in frames:
        for d in fr.detections:
            stream.write(json.dumps(d.to_json()) + "\n")


# ---------------------------------------------------------------------------
# synthetic detector

@dataclass(frozen=True)
class TruthObject:
    """Ground truth for one object at one instant, in plane metres."""

    object_id: int
    cls: ObjectClass
    east: float
    north: float
    heading: float  # radians, counter-clockwise from east
    length: float = 4.6
    width: float = 1.9

    def footprint(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ np.array([[c, s], [-s, c]]) + (self.east, self.north)


@dataclass(frozen=True)
class TruthFrame:
    frame: int
    ts: int
    objects: tuple = ()


@dataclass(frozen=True)
class Occlusion:
    object_id: int
    first_frame: int
    last_frame: int  # inclusive
    camera_id: str | None = None  # None: hidden from every camera

    def covers(self, object_id: int, frame: int, camera_id: str) -> bool:
        return (object_id == self.object_id and self.first_frame <= frame <= self.last_frame
                and (self.camera_id is None or self.camera_id == camera_id))


@dataclass(frozen=True)
class DetectorNoise:
    pos_sigma_px: float = 0.0
    drop_prob: float = 0.0
    fp_rate_per_frame: float = 0.0
    occlusions: tuple = ()
    roi_radius_m: float = 50.0

    def __post_init__(self):
        if self.pos_sigma_px < 0 or self.fp_rate_per_frame < 0 or not 0 <= self.drop_prob <= 1:
            raise ValueError("invalid detector noise parameters")


@dataclass
class DetectorStats:
    projected: int = 0
    skipped: int = 0
    dropped: int = 0
    occluded: int = 0
    false_positives: int = 0


_QUADRANT_SIGNS = {"NE": (1, 1), "NW": (-1, 1), "SE": (1, -1), "SW": (-1, -1)}


def _project_box(obj: TruthObject, cam: CameraCalibration) -> tuple[np.ndarray, float, float]:
    pts = cam.plane_to_pixels(np.vstack([[obj.east, obj.north], obj.footprint()]))
    if not np.all(np.isfinite(pts)):
        raise CalibrationError("non-finite projection")
    ext = pts[1:].max(axis=0) - pts[1:].min(axis=0)
    return pts[0], float(ext[0]), float(ext[1])


def synth_detect(truth: TruthFrame, cam: CameraCalibration, noise: DetectorNoise = DetectorNoise(),
                 seed: int = 0, stats: DetectorStats | None = None) -> DetectionFrame:
    """Project ground truth into one camera and corrupt it.

    The random stream is keyed on (seed, camera, frame), so any single frame
    is reproducible on its own and different cameras see independent noise.
    """
    stats = stats if stats is not None else DetectorStats()
    rng = np.random.default_rng([seed, CAMERA_IDS.index(cam.camera_id), truth.frame])
    out = []
    for obj in truth.objects:
        # draw every variate up front so one object's fate never shifts another's noise
        drop = rng.random() < noise.drop_prob
        jitter = rng.normal(0.0, 1.0, 2) * noise.pos_sigma_px
        conf = rng.uniform(0.6, 1.0)
        try:
            center, w, h = _project_box(obj, cam)
        except CalibrationError:
            stats.skipped += 1
            continue
        stats.projected += 1
        if any(o.covers(obj.object_id, truth.frame, cam.camera_id) for o in noise.occlusions):
            stats.occluded += 1
            continue
        if drop:
            stats.dropped += 1
            continue
        box = BottomBox(float(center[0] + jitter[0]), float(center[1] + jitter[1]), w, h)
        out.append(DetectionRecord(cam.camera_id, truth.ts, obj.cls, box, float(conf)))
    n_fp = rng.poisson(noise.fp_rate_per_frame) if noise.fp_rate_per_frame > 0 else 0
    se, sn = _QUADRANT_SIGNS[cam.camera_id]
    for _ in range(n_fp):
        # uniform over the camera's quarter disc
        rad = noise.roi_radius_m * math.sqrt(rng.random())
        ang = rng.uniform(0.0, math.pi / 2)
        heading = rng.uniform(-math.pi, math.pi)
        ghost = TruthObject(-1, ObjectClass.Car, se * rad * math.cos(ang), sn * rad * math.sin(ang), heading)
        conf = rng.uniform(0.3, 0.7)
        try:
            center, w, h = _project_box(ghost, cam)
        except CalibrationError:
            stats.skipped += 1
            continue
        stats.false_positives += 1
        out.append(DetectionRecord(cam.camera_id, truth.ts, ObjectClass.Car,
                                   BottomBox(float(center[0]), float(center[1]), w, h), float(conf)))
    return DetectionFrame(cam.camera_id, truth.ts, tuple(out))
