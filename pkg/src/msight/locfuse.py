"""Image-to-world localization and quadrant fusion of the four camera streams."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .calib import CAMERA_IDS, CalibrationError, CameraCalibration, OutOfFieldOfView
from .detect import DetectionFrame, DetectionRecord, ObjectClass
from .geo import TangentPlane, WorldPoint

log = logging.getLogger(__name__)

JITTER_MS = 50


class OutsideRoi(ValueError):
    pass


class FrameSkew(ValueError):
    pass


@dataclass(frozen=True)
class RoiMap:
    center: WorldPoint
    radius_m: float = 50.0

    @property
    def plane(self) -> TangentPlane:
        return TangentPlane(self.center)

    def to_json(self) -> dict:
        return {"center": {"lat": self.center.lat, "lon": self.center.lon}, "radius_m": self.radius_m}

    @classmethod
    def from_json(cls, d: dict) -> "RoiMap":
        return cls(WorldPoint(d["center"]["lat"], d["center"]["lon"]), float(d.get("radius_m", 50.0)))


@dataclass(frozen=True)
class WorldDetection:
    source_camera: str
    ts: int
    cls: ObjectClass
    east: float
    north: float
    s: float  # plane area of the box, m^2
    r: float  # east extent / north extent
    confidence: float = 1.0
    origin: WorldPoint | None = None

    def __post_init__(self):
        if not (self.s > 0 and self.r > 0):
            raise ValueError(f"box scale and aspect must be positive, got s={self.s}, r={self.r}")

    @property
    def en(self) -> np.ndarray:
        return np.array([self.east, self.north])

    @property
    def position(self) -> WorldPoint:
        if self.origin is None:
            raise ValueError("detection has no scene origin")
        return TangentPlane(self.origin).plane_to_point(self.en)


def quadrant(east: float, north: float) -> str:
    # zero offsets fall to the east and north halves: NE first, then SE
    ns = "N" if north >= 0 else "S"
    ew = "E" if east >= 0 else "W"
    return ns + ew


def roi_assign_en(east: float, north: float, radius_m: float = 50.0) -> str:
    if math.hypot(east, north) > radius_m:
        raise OutsideRoi(f"({east:.2f}, {north:.2f}) m is outside the {radius_m} m ROI")
    return quadrant(east, north)


def roi_assign(p: WorldPoint, m: RoiMap) -> str:
    e, n = m.plane.to_plane(p.lat, p.lon)
    return roi_assign_en(float(e), float(n), m.radius_m)


def _shoelace(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def localize(d: DetectionRecord, c: CameraCalibration, roi: RoiMap | None = None) -> WorldDetection:
    """Map a bottom box to the ground plane.

    The centre goes through undistortion and the homography. The four box
    corners are mapped too: their polygon area gives s and their east/north
    extents give r. With an ROI, any corner leaving the disc is rejected.
    """
    if c.camera_id != d.camera_id:
        raise ValueError(f"detection from {d.camera_id} with calibration of {c.camera_id}")
    plane = roi.plane if roi is not None else c.plane
    try:
        pts = c.pixels_to_plane(np.vstack([[d.box.u, d.box.v], d.box.corners()]))
    except CalibrationError as e:
        raise OutOfFieldOfView(str(e)) from None
    if roi is not None and c.scene_origin != roi.center:
        # calibration plane and ROI plane differ only by a shift at scene scale
        lat, lon = c.plane.to_world(pts[:, 0], pts[:, 1])
        pts = np.c_[plane.to_plane(lat, lon)]
    if not np.all(np.isfinite(pts)):
        raise OutOfFieldOfView("box does not map to a finite ground position")
    if roi is not None and np.any(np.hypot(pts[1:, 0], pts[1:, 1]) > roi.radius_m):
        raise OutOfFieldOfView("box corners project outside the ROI disc")
    corners = pts[1:]
    ext = corners.max(axis=0) - corners.min(axis=0)
    area = _shoelace(corners)
    if area <= 0 or ext[1] <= 0:
        raise OutOfFieldOfView("box collapses on the ground plane")
    return WorldDetection(d.camera_id, d.frame_ts, d.cls, float(pts[0, 0]), float(pts[0, 1]),
                          area, float(ext[0] / ext[1]), d.confidence, plane.origin)


@dataclass
class FusionStats:
    missing_cameras: tuple = ()
    out_of_view: int = 0
    filtered: int = 0


def fuse(frames: Iterable[DetectionFrame], calibs: Mapping[str, CameraCalibration], m: RoiMap,
         jitter_ms: int = JITTER_MS, stats: FusionStats | None = None) -> list[WorldDetection]:
    """Keep each camera's detections inside its own quadrant and pool them.

    Cameras are processed in fixed id order, so the output does not depend on
    the order of ``frames``. Cameras with no frame are logged and skipped.
    """
    stats = stats if stats is not None else FusionStats()
    by_cam: dict[str, DetectionFrame] = {}
    for fr in frames:
        if fr.camera_id in by_cam:
            raise ValueError(f"two frames for camera {fr.camera_id}")
        by_cam[fr.camera_id] = fr
    if by_cam:
        ts = [fr.frame_ts for fr in by_cam.values()]
        if max(ts) - min(ts) > 2 * jitter_ms:
            raise FrameSkew(f"frame timestamps spread {max(ts) - min(ts)} ms exceeds +-{jitter_ms} ms")
    missing = tuple(c for c in CAMERA_IDS if c not in by_cam)
    if missing:
        log.info("fusion proceeding without cameras %s", ",".join(missing))
    stats.missing_cameras = missing
    out = []
    for cam in CAMERA_IDS:
        fr = by_cam.get(cam)
        if fr is None:
            continue
        for d in fr.detections:
            try:
                wd = localize(d, calibs[cam], m)
            except OutOfFieldOfView:
                stats.out_of_view += 1
                continue
            if quadrant(wd.east, wd.north) != cam:
                stats.filtered += 1
                continue
            out.append(wd)
    return out
