"""Synthetic roundabout traffic, the ground-truth oracle for end-to-end runs.

Geometry: two concentric circulating lanes around the scene origin, driven
counter-clockwise. Each vehicle approaches on a straight spur tangent to its
lane, circulates through its turn angle, and leaves on the tangent at the
exit point, so paths are C1 with curvature 1/R on the circle. Speeds are
constant per vehicle, which bounds acceleration by v^2 / R.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..detect import FRAME_INTERVAL_MS, ObjectClass, TruthFrame, TruthObject

TRUTH_HZ = 50
TRUTH_STEP_MS = 1000 // TRUTH_HZ
MAX_ACCEL = 3.0  # m/s^2
SPAWN_RADIUS = 60.0  # trips start and end this far from the centre, outside the 50 m ROI

LEGS = {"E": 0.0, "N": 90.0, "W": 180.0, "S": 270.0}
TEMPLATES = {  # lane, turn in degrees
    "inner270": ("inner", 270.0),
    "outer90": ("outer", 90.0),
    "inner180": ("inner", 180.0),
    "outer180": ("outer", 180.0),
}
_DIMS = {ObjectClass.Car: (4.6, 1.9), ObjectClass.TruckBusTrailer: (7.5, 2.5)}


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class TripSpec:
    template: str
    leg: str = "E"
    start_s: float = 0.0  # rounded down to the frame grid
    speed: float | None = None  # None: drawn from the speed profile
    cls: str = "car"


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    duration_s: float = 120.0
    inner_radius: float = 13.0
    outer_radius: float = 18.0
    entry_offset_deg: float = 10.0  # entry point sits this far past the leg, counter-clockwise
    arrival_rate_per_min: float = 3.0  # background traffic, Poisson
    speed_range: tuple = (4.0, 6.0)
    truck_fraction: float = 0.1
    min_gap_m: float = 7.0  # vehicles closer than this at any instant are thinned out
    trips: tuple = ()

    def __post_init__(self):
        if not 0 < self.inner_radius < self.outer_radius < 50.0:
            raise InfeasibleConfig("lane radii must satisfy 0 < inner < outer < 50 m")
        if self.arrival_rate_per_min < 0 or self.duration_s <= 0:
            raise InfeasibleConfig("rates and duration must be non-negative")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise InfeasibleConfig("bad speed range")
        for t in self.trips:
            if t.template not in TEMPLATES or t.leg not in LEGS:
                raise InfeasibleConfig(f"unknown trip {t}")

    def lane_radius(self, lane: str) -> float:
        return self.inner_radius if lane == "inner" else self.outer_radius

    def to_json(self) -> dict:
        d = asdict(self)
        d["trips"] = [asdict(t) for t in self.trips]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d["trips"] = tuple(TripSpec(**t) for t in d.get("trips", ()))
        if "speed_range" in d:
            d["speed_range"] = tuple(d["speed_range"])
        return cls(**d)


def paper_trips(spacing_s: float = 12.0) -> tuple:
    """Eight test trips: four 270-degree inner-lane, four 90-degree outer-lane, one per leg each."""
    out = []
    for i, leg in enumerate(LEGS):
        out.append(TripSpec("inner270", leg, 2 * i * spacing_s))
        out.append(TripSpec("outer90", leg, (2 * i + 1) * spacing_s))
    return tuple(out)


class RoundaboutPath:
    """Tangent spur in, arc of ``turn`` radians, tangent spur out."""

    def __init__(self, radius: float, entry_angle: float, turn: float, spawn_radius: float = SPAWN_RADIUS):
        self.radius = radius
        self.phi0 = entry_angle
        self.turn = turn
        self.spur = math.sqrt(spawn_radius**2 - radius**2)
        self.arc = radius * turn
        self.length = 2 * self.spur + self.arc

    def _circle(self, phi):
        return self.radius * np.stack([np.cos(phi), np.sin(phi)], -1), np.stack([-np.sin(phi), np.cos(phi)], -1)

    def sample(self, s):
        """Positions (n, 2) and unit tangents (n, 2) at arc lengths ``s``."""
        s = np.asarray(s, dtype=float)
        pos = np.empty(s.shape + (2,))
        tan = np.empty(s.shape + (2,))
        p0, t0 = self._circle(np.array(self.phi0))
        p1, t1 = self._circle(np.array(self.phi0 + self.turn))
        a = s < self.spur
        b = ~a & (s <= self.spur + self.arc)
        c = ~a & ~b
        pos[a] = p0 - (self.spur - s[a])[:, None] * t0
        tan[a] = t0
        pb, tb = self._circle(self.phi0 + (s[b] - self.spur) / self.radius)
        pos[b], tan[b] = pb, tb
        pos[c] = p1 + (s[c] - self.spur - self.arc)[:, None] * t1
        tan[c] = t1
        return pos, tan


@dataclass
class GroundTruthTrack:
    object_id: int
    cls: ObjectClass
    template: str
    leg: str
    start_ms: int
    speed: float
    length: float
    width: float
    path: RoundaboutPath = field(repr=False)
    t_ms: np.ndarray = field(repr=False)  # 50 Hz sample times
    xy: np.ndarray = field(repr=False)  # (n, 2)
    heading: np.ndarray = field(repr=False)  # radians, counter-clockwise from east

    @property
    def end_ms(self) -> int:
        return int(self.t_ms[-1])

    def index(self, ts_ms: int) -> int | None:
        k, rem = divmod(ts_ms - self.start_ms, TRUTH_STEP_MS)
        if rem or not 0 <= k < len(self.t_ms):
            return None
        return int(k)

    def state(self, ts_ms: int):
        """(east, north, heading, velocity (2,)) at a sample time, or None when absent."""
        i = self.index(ts_ms)
        if i is None:
            return None
        h = self.heading[i]
        return float(self.xy[i, 0]), float(self.xy[i, 1]), float(h), self.speed * np.array([math.cos(h), math.sin(h)])

    def frame_samples(self, frame_ms: int = FRAME_INTERVAL_MS) -> np.ndarray:
        """Indices of the 2.5 Hz samples (every frame_ms) within the 50 Hz record."""
        step = frame_ms // TRUTH_STEP_MS
        first = (-self.start_ms) % frame_ms // TRUTH_STEP_MS
        return np.arange(first, len(self.t_ms), step)

    def to_truth(self, ts_ms: int) -> TruthObject | None:
        st = self.state(ts_ms)
        if st is None:
            return None
        return TruthObject(self.object_id, self.cls, st[0], st[1], st[2], self.length, self.width)


def _make_track(oid: int, trip: TripSpec, speed: float, cfg: ScenarioConfig) -> GroundTruthTrack:
    lane, turn_deg = TEMPLATES[trip.template]
    r = cfg.lane_radius(lane)
    if speed**2 / r > MAX_ACCEL:
        raise InfeasibleConfig(f"{speed} m/s on a {r} m lane exceeds {MAX_ACCEL} m/s^2")
    path = RoundaboutPath(r, math.radians(LEGS[trip.leg] + cfg.entry_offset_deg), math.radians(turn_deg))
    start = int(round(trip.start_s * 1000)) // FRAME_INTERVAL_MS * FRAME_INTERVAL_MS
    n = int(path.length / speed * TRUTH_HZ) + 1
    t = start + TRUTH_STEP_MS * np.arange(n)
    pos, tan = path.sample(speed * (t - start) / 1000.0)
    cls = ObjectClass(trip.cls)
    length, width = _DIMS.get(cls, _DIMS[ObjectClass.Car])
    return GroundTruthTrack(oid, cls, trip.template, trip.leg, start, speed, length, width, path, t, pos,
                            np.arctan2(tan[:, 1], tan[:, 0]))


def _min_gap(a: GroundTruthTrack, b: GroundTruthTrack) -> float:
    lo, hi = max(a.start_ms, b.start_ms), min(a.end_ms, b.end_ms)
    if lo > hi:
        return math.inf
    ia = (lo - a.start_ms) // TRUTH_STEP_MS
    ib = (lo - b.start_ms) // TRUTH_STEP_MS
    n = (hi - lo) // TRUTH_STEP_MS + 1
    d = a.xy[ia:ia + n] - b.xy[ib:ib + n]
    return float(np.min(np.hypot(d[:, 0], d[:, 1])))


def generate_scenario(cfg: ScenarioConfig) -> list[GroundTruthTrack]:
    """Deterministic per seed. Template trips come first and always survive
    thinning; a background vehicle that would pass within ``min_gap_m`` of an
    earlier vehicle is not spawned."""
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.speed_range
    wanted = []
    for trip in cfg.trips:
        wanted.append((trip, trip.speed if trip.speed is not None else float(rng.uniform(lo, hi)), True))
    if cfg.arrival_rate_per_min > 0:
        t = 0.0
        while True:
            t += rng.exponential(60.0 / cfg.arrival_rate_per_min)
            if t >= cfg.duration_s:
                break
            tmpl = str(rng.choice(sorted(TEMPLATES)))
            leg = str(rng.choice(sorted(LEGS)))
            truck = rng.random() < cfg.truck_fraction
            spd = float(rng.uniform(lo, hi))
            wanted.append((TripSpec(tmpl, leg, t, None, "truck" if truck else "car"), spd, False))
    tracks: list[GroundTruthTrack] = []
    for trip, spd, pinned in wanted:
        cand = _make_track(len(tracks) + 1, trip, spd, cfg)
        if not pinned and any(_min_gap(cand, o) < cfg.min_gap_m for o in tracks):
            continue
        tracks.append(cand)
    return tracks


def truth_frames(tracks: list[GroundTruthTrack], frame_ms: int = FRAME_INTERVAL_MS,
                 end_ms: int | None = None) -> list[TruthFrame]:
    """Ground truth on the global frame grid, from the first to the last frame with a vehicle."""
    if not tracks:
        return []
    end = max(t.end_ms for t in tracks) if end_ms is None else end_ms
    out = []
    for k in range(0, end // frame_ms + 1):
        ts = k * frame_ms
        objs = tuple(o for o in (t.to_truth(ts) for t in tracks) if o is not None)
        out.append(TruthFrame(k, ts, objs))
    return out


def write_truth(tracks: list[GroundTruthTrack], stream, every: int = 1) -> None:
    """NDJSON, one 50 Hz sample per line (or every n-th)."""
    for t in tracks:
        for i in range(0, len(t.t_ms), every):
            stream.write(json.dumps({"ts": int(t.t_ms[i]), "id": t.object_id, "cls": t.cls.value,
                                     "east": round(float(t.xy[i, 0]), 4), "north": round(float(t.xy[i, 1]), 4),
                                     "heading": round(float(t.heading[i]), 6), "trip": t.template,
                                     "leg": t.leg}) + "\n")
