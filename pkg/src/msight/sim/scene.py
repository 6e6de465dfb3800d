"""Synthetic roadside camera rig: four downward-looking fisheye cameras on
poles at the corners of a roundabout, with exact ground-truth projection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..calib import (
    CameraCalibration,
    FisheyeIntrinsics,
    Homography,
    LandmarkPair,
    OutOfFieldOfView,
    distort_points,
)
from ..geo import PixelPoint, TangentPlane, WorldPoint

# Ellsworth Rd / State St roundabout, Ann Arbor (approximate centre)
DEFAULT_ORIGIN = WorldPoint(42.229300, -83.739000)
IMAGE_SIZE = 1024

_CORNERS = {"NE": (1, 1), "NW": (-1, 1), "SE": (1, -1), "SW": (-1, -1)}


@dataclass(frozen=True)
class CameraPose:
    east: float
    north: float
    height: float
    yaw: float = 0.0
    tilt: float = 0.0

    def rotation(self) -> np.ndarray:
        """World (east, north, up) -> camera (x right, y down-image, z optical axis)."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        base = np.array([[cy, sy, 0.0], [sy, -cy, 0.0], [0.0, 0.0, -1.0]])
        ct, st = math.cos(self.tilt), math.sin(self.tilt)
        rx = np.array([[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]])
        return rx @ base


@dataclass(frozen=True)
class SyntheticCamera:
    camera_id: str
    pose: CameraPose
    intrinsics: FisheyeIntrinsics
    image_size: int = IMAGE_SIZE

    def plane_to_undistorted(self) -> np.ndarray:
        """Homography from plane (east, north) to ideal pinhole pixels."""
        r = self.pose.rotation()
        c = np.array([self.pose.east, self.pose.north, self.pose.height])
        m = np.c_[r[:, 0], r[:, 1], -r @ c]
        k = self.intrinsics
        kmat = np.array([[k.f, 0, k.cx], [0, k.f, k.cy], [0, 0, 1.0]])
        return kmat @ m

    def ray_angles(self, en) -> np.ndarray:
        en = np.atleast_2d(np.asarray(en, dtype=float))
        r = self.pose.rotation()
        d = (np.c_[en, np.zeros(len(en))] - (self.pose.east, self.pose.north, self.pose.height)) @ r.T
        return np.arctan2(np.hypot(d[:, 0], d[:, 1]), d[:, 2])

    def visible(self, en, margin: float = 0.0) -> np.ndarray:
        theta = self.ray_angles(en)
        return theta <= self.intrinsics.theta_max - margin

    def project(self, en) -> np.ndarray:
        """Exact fisheye pixels for ground points; raises if any is outside the FOV."""
        en = np.atleast_2d(np.asarray(en, dtype=float))
        if not np.all(self.visible(en)):
            raise OutOfFieldOfView("ground point outside the camera field of view")
        h = self.plane_to_undistorted()
        q = np.c_[en, np.ones(len(en))] @ h.T
        return distort_points(q[:, :2] / q[:, 2:3], self.intrinsics)

    def true_calibration(self, origin: WorldPoint = DEFAULT_ORIGIN) -> CameraCalibration:
        return CameraCalibration(self.camera_id, self.intrinsics,
                                 Homography(np.linalg.inv(self.plane_to_undistorted())), origin)


def default_intrinsics(camera_id: str = "NE") -> FisheyeIntrinsics:
    # slight per-camera spread so the four lenses are not identical
    i = ("NE", "NW", "SE", "SW").index(camera_id)
    k2, k3 = -0.030 + 0.002 * i, 0.0020 - 0.0002 * i
    theta_max = math.radians(88.0)
    r_max = theta_max + k2 * theta_max**3 + k3 * theta_max**5
    f = 0.49 * IMAGE_SIZE / r_max
    return FisheyeIntrinsics(IMAGE_SIZE / 2 + 3.0 * (i - 1.5), IMAGE_SIZE / 2 - 2.0 * (i - 1.5),
                             f, 1.0, k2, k3, theta_max)


def default_rig(pole_offset_m: float = 30.0, height_m: float = 12.0) -> dict[str, SyntheticCamera]:
    rig = {}
    for i, (cid, (se, sn)) in enumerate(_CORNERS.items()):
        pose = CameraPose(se * pole_offset_m, sn * pole_offset_m, height_m,
                          yaw=math.radians(15.0 * i), tilt=math.radians(4.0 + i))
        rig[cid] = SyntheticCamera(cid, pose, default_intrinsics(cid))
    return rig


def make_landmarks(cam: SyntheticCamera, n: int = 20, noise_px: float = 0.0, seed: int = 0,
                   origin: WorldPoint = DEFAULT_ORIGIN, max_range_m: float = 42.0,
                   min_range_m: float = 4.0, world_noise_m: float = 0.0) -> list[LandmarkPair]:
    """Ground landmarks around a camera's own quadrant, labelled with pixel noise.

    Points are spread over the camera's quadrant of the 50 m disc (where
    road markings sit) and restricted to ``max_range_m`` of the pole.
    ``world_noise_m`` models satellite-image labelling error on the world side.
    """
    rng = np.random.default_rng(seed)
    plane = TangentPlane(origin)
    se = math.copysign(1.0, cam.pose.east)
    sn = math.copysign(1.0, cam.pose.north)
    pts = []
    while len(pts) < n:
        e, nn = rng.uniform(-5, 50) * se, rng.uniform(-5, 50) * sn
        d = math.hypot(e - cam.pose.east, nn - cam.pose.north)
        if math.hypot(e, nn) > 50 or not (min_range_m <= d <= max_range_m):
            continue
        if any(math.hypot(e - a, nn - b) < 2.0 for a, b in pts):
            continue
        pts.append((e, nn))
    en = np.array(pts)
    px = cam.project(en) + rng.normal(0.0, noise_px, size=(n, 2))
    labelled = en + rng.normal(0.0, world_noise_m, size=(n, 2))
    lat, lon = plane.to_world(labelled[:, 0], labelled[:, 1])
    return [LandmarkPair(cam.camera_id, PixelPoint(float(u), float(v)), WorldPoint(float(a), float(b)))
            for (u, v), a, b in zip(px, lat, lon)]
