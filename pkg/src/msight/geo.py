"""Scene geometry: WGS84 points and the local east/north tangent plane.

All inner-loop computations run on the plane; lat/lon only appear at I/O
boundaries. The plane is an equirectangular projection anchored at the scene
origin, which is accurate to well under a millimetre over a 100 m scene.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6378137.0


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError(f"non-finite pixel ({self.u}, {self.v})")

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)


@dataclass(frozen=True)
class WorldPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (abs(self.lat) <= 90.0 and abs(self.lon) <= 180.0):
            raise ValueError(f"WGS84 coordinates out of range: ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class TangentPlane:
    """Local east/north frame in metres around ``origin``."""

    origin: WorldPoint

    @property
    def _scale(self) -> tuple[float, float]:
        k = math.pi / 180.0 * EARTH_RADIUS_M
        return k * math.cos(math.radians(self.origin.lat)), k

    def to_plane(self, lat, lon):
        """lat/lon (scalars or arrays) -> (east, north) metres."""
        ke, kn = self._scale
        east = (np.asarray(lon, dtype=float) - self.origin.lon) * ke
        north = (np.asarray(lat, dtype=float) - self.origin.lat) * kn
        return east, north

    def to_world(self, east, north):
        """(east, north) metres -> (lat, lon) degrees."""
        ke, kn = self._scale
        lat = self.origin.lat + np.asarray(north, dtype=float) / kn
        lon = self.origin.lon + np.asarray(east, dtype=float) / ke
        return lat, lon

    def point_to_plane(self, p: WorldPoint) -> np.ndarray:
        e, n = self.to_plane(p.lat, p.lon)
        return np.array([float(e), float(n)])

    def plane_to_point(self, en) -> WorldPoint:
        lat, lon = self.to_world(en[0], en[1])
        return WorldPoint(float(lat), float(lon))


def heading_deg(ve: float, vn: float) -> float:
    """Compass heading (clockwise from north) of an east/north velocity."""
    return math.degrees(math.atan2(ve, vn)) % 360.0
