"""Landmark-based fisheye calibration.

Lens model: a ray at angle ``theta`` from the optical axis lands at radius
``f * (k1*theta + k2*theta**3 + k3*theta**5)`` pixels from the principal
point. Undistortion maps that pixel onto the ideal pinhole image
(``f * tan(theta)``), which is related to the ground plane by a homography.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geo import PixelPoint, TangentPlane, WorldPoint

CAMERA_IDS = ("NE", "NW", "SE", "SW")
DEFAULT_THETA_MAX = math.radians(88.0)


class CalibrationError(Exception):
    pass


class NonInvertibleRadius(CalibrationError):
    pass


class OutOfFieldOfView(CalibrationError):
    pass


class DegenerateConfiguration(CalibrationError):
    pass


class InsufficientInliers(CalibrationError):
    pass


class EmptySet(CalibrationError):
    pass


class CalibrationGateError(CalibrationError):
    pass


# ---------------------------------------------------------------------------
# radial lens model


@dataclass(frozen=True)
class FisheyeIntrinsics:
    cx: float
    cy: float
    f: float
    k1: float = 1.0
    k2: float = 0.0
    k3: float = 0.0
    theta_max: float = DEFAULT_THETA_MAX
    check: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError("focal length must be positive")
        if not 0 < self.theta_max < math.pi / 2:
            raise ValueError("theta_max must lie in (0, pi/2)")
        if self.check and not self.is_monotonic():
            raise NonInvertibleRadius(
                f"r(theta) not strictly increasing on [0, {self.theta_max:.4f}] "
                f"for k=({self.k1}, {self.k2}, {self.k3})"
            )

    @classmethod
    def equidistant(cls, cx: float, cy: float, image_radius: float,
                    theta_max: float = DEFAULT_THETA_MAX) -> "FisheyeIntrinsics":
        """Default initial guess: k1=1, k2=k3=0, focal from the field of view."""
        return cls(cx, cy, image_radius / theta_max, 1.0, 0.0, 0.0, theta_max)

    @property
    def principal_point(self) -> PixelPoint:
        return PixelPoint(self.cx, self.cy)

    def r(self, theta):
        t = np.asarray(theta, dtype=float)
        return self.k1 * t + self.k2 * t**3 + self.k3 * t**5

    def dr(self, theta):
        t = np.asarray(theta, dtype=float)
        return self.k1 + 3 * self.k2 * t**2 + 5 * self.k3 * t**4

    def is_monotonic(self, samples: int = 2001) -> bool:
        t = np.linspace(0.0, self.theta_max, samples)
        return bool(np.all(self.dr(t) > 0))

    @property
    def max_radius(self) -> float:
        return float(self.f * self.r(self.theta_max))

    def normalized(self) -> "FisheyeIntrinsics":
        """Same camera expressed with k1 = 1 (focal absorbs k1)."""
        k1 = self.k1
        return FisheyeIntrinsics(self.cx, self.cy, self.f * k1, 1.0,
                                 self.k2 / k1, self.k3 / k1, self.theta_max, self.check)

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "f": self.f,
                "k1": self.k1, "k2": self.k2, "k3": self.k3}

    def solve_theta(self, rho) -> np.ndarray:
        """Invert rho = f * r(theta) for arrays of pixel radii."""
        target = np.asarray(rho, dtype=float) / self.f
        if np.any(target > self.r(self.theta_max) * (1 + 1e-12)):
            raise OutOfFieldOfView("radius exceeds r(theta_max)")
        lo = np.zeros_like(target)
        hi = np.full_like(target, self.theta_max)
        for _ in range(48):
            mid = 0.5 * (lo + hi)
            below = self.r(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        theta = 0.5 * (lo + hi)
        for _ in range(4):
            d = self.dr(theta)
            if np.any(d <= 0):
                raise NonInvertibleRadius("r'(theta) <= 0 at the inverted sample")
            theta = theta - (self.r(theta) - target) / d
        return theta


def undistort_points(pts, k: FisheyeIntrinsics) -> np.ndarray:
    """Fisheye pixels (N, 2) -> ideal pinhole pixels (N, 2)."""
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite pixel")
    d = p - (k.cx, k.cy)
    rho = np.hypot(d[:, 0], d[:, 1])
    theta = k.solve_theta(rho)
    scale = np.ones_like(rho)
    nz = rho > 0
    # r(theta) ~ k1*theta near the axis, so the ratio stays well defined
    scale[nz] = k.f * np.tan(theta[nz]) / rho[nz]
    scale[~nz] = 1.0 / k.k1
    return (k.cx, k.cy) + d * scale[:, None]


def distort_points(pts, k: FisheyeIntrinsics) -> np.ndarray:
    """Ideal pinhole pixels (N, 2) -> fisheye pixels (N, 2)."""
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    d = p - (k.cx, k.cy)
    rho_u = np.hypot(d[:, 0], d[:, 1])
    theta = np.arctan(rho_u / k.f)
    if np.any(theta > k.theta_max * (1 + 1e-12)):
        raise OutOfFieldOfView("ray outside the declared field of view")
    scale = np.empty_like(rho_u)
    nz = rho_u > 0
    scale[nz] = k.f * k.r(theta[nz]) / rho_u[nz]
    scale[~nz] = k.k1
    return (k.cx, k.cy) + d * scale[:, None]


def undistort_point(p: PixelPoint, k: FisheyeIntrinsics) -> PixelPoint:
    u, v = undistort_points([[p.u, p.v]], k)[0]
    return PixelPoint(float(u), float(v))


def distort_point(p: PixelPoint, k: FisheyeIntrinsics) -> PixelPoint:
    u, v = distort_points([[p.u, p.v]], k)[0]
    return PixelPoint(float(u), float(v))


# ---------------------------------------------------------------------------
# homography


@dataclass(frozen=True)
class Homography:
    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=float).reshape(3, 3)
        if h[2, 2] != 0:
            h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-12:
            raise DegenerateConfiguration("homography is singular")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, pts) -> np.ndarray:
        return apply_h(self.h, pts)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def __eq__(self, other):
        return isinstance(other, Homography) and np.array_equal(self.h, other.h)

    def __hash__(self):
        return hash(self.h.tobytes())


def apply_h(h: np.ndarray, pts) -> np.ndarray:
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    q = p @ h[:, :2].T + h[:, 2]
    return q[:, :2] / q[:, 2:3]


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Hartley similarity: centroid to origin, mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.mean(np.hypot(*(pts - c).T))
    s = math.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _dlt_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Stacked DLT system for (..., n, 2) point arrays -> (..., 2n, 9)."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    o, z = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([x, y, o, z, z, z, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([z, z, z, x, y, o, -v * x, -v * y, -v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def dlt(src, dst) -> np.ndarray:
    """Normalized direct linear transform; least squares for n > 4."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 4:
        raise DegenerateConfiguration("need at least 4 correspondences")
    ts, td = _normalizer(src), _normalizer(dst)
    a = _dlt_rows(apply_h(ts, src), apply_h(td, dst))
    _, sv, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    if abs(h[2, 2]) > 1e-300:
        h = h / h[2, 2]
    return h


def _refine_geometric(h: np.ndarray, src: np.ndarray, dst: np.ndarray, iters: int = 10) -> np.ndarray:
    """Gauss-Newton on plane transfer error; only accepts improving steps."""
    def resid(hv):
        return (apply_h(np.append(hv, 1.0).reshape(3, 3), src) - dst).ravel()

    hv = h.ravel()[:8].copy()
    cost = float(resid(hv) @ resid(hv))
    for _ in range(iters):
        r = resid(hv)
        jac = np.empty((r.size, 8))
        for j in range(8):
            step = 1e-7 * max(1.0, abs(hv[j]))
            e = np.zeros(8)
            e[j] = step
            jac[:, j] = (resid(hv + e) - resid(hv - e)) / (2 * step)
        delta, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        cand = hv + delta
        c2 = float(resid(cand) @ resid(cand))
        if not c2 < cost:
            break
        hv, cost = cand, c2
    return np.append(hv, 1.0).reshape(3, 3)


def _tri_area(a, b, c):
    return 0.5 * np.abs((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
                        - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))


def _min_triangle_area(quad: np.ndarray) -> np.ndarray:
    """Smallest triangle among the 4 points of each (..., 4, 2) sample."""
    combos = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))
    areas = [_tri_area(quad[..., i, :], quad[..., j, :], quad[..., k, :]) for i, j, k in combos]
    return np.min(np.stack(areas, axis=-1), axis=-1)


def _bbox_area(pts: np.ndarray) -> float:
    span = pts.max(axis=0) - pts.min(axis=0)
    return float(max(span[0] * span[1], 1e-300))


@dataclass(frozen=True)
class RansacParams:
    iters: int = 2000
    inlier_threshold_m: float = 0.5
    min_inliers: int = 4
    seed: int = 0
    confidence: float = 0.9999
    degeneracy_ratio: float = 1e-6


@dataclass(frozen=True)
class HomographyFit:
    homography: Homography
    inlier_mask: np.ndarray
    residuals_m: np.ndarray
    samples_drawn: int


def fit_homography(src, dst, ransac: RansacParams = RansacParams()) -> HomographyFit:
    """RANSAC over minimal 4-point samples, then DLT + least squares on the inliers.

    ``src`` are undistorted pixels, ``dst`` plane coordinates (metres); the
    inlier threshold applies to the transfer error in the plane.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise DegenerateConfiguration(f"need >= 4 paired points, got {n}")
    rng = np.random.default_rng(ransac.seed)
    ts, td = _normalizer(src), _normalizer(dst)
    src_n, dst_n = apply_h(ts, src), apply_h(td, dst)
    src_gate = ransac.degeneracy_ratio * _bbox_area(src)
    dst_gate = ransac.degeneracy_ratio * _bbox_area(dst)
    thr = ransac.inlier_threshold_m

    best_count, best_err, best_h = -1, math.inf, None
    drawn, needed, chunk = 0, ransac.iters, 64
    while drawn < min(needed, ransac.iters):
        m = min(chunk, ransac.iters - drawn)
        idx = np.argsort(rng.random((m, n)), axis=1)[:, :4]
        drawn += m
        ok = (_min_triangle_area(src[idx]) >= src_gate) & (_min_triangle_area(dst[idx]) >= dst_gate)
        if not ok.any():
            continue
        idx = idx[ok]
        a = _dlt_rows(src_n[idx], dst_n[idx])
        _, _, vt = np.linalg.svd(a)
        hn = vt[:, -1].reshape(-1, 3, 3)
        hs = np.linalg.inv(td) @ hn @ ts
        q = np.einsum("kij,nj->kni", hs, np.c_[src, np.ones(n)])
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = q[..., :2] / q[..., 2:3]
            err = np.hypot(*(proj - dst).transpose(2, 0, 1))
        err = np.where(np.isfinite(err), err, np.inf)
        inl = err <= thr
        counts = inl.sum(axis=1)
        sums = np.where(inl, err, 0).sum(axis=1)
        for k in range(len(idx)):
            c = int(counts[k])
            if c > best_count or (c == best_count and sums[k] < best_err):
                best_count, best_err, best_h = c, float(sums[k]), hs[k]
        w = best_count / n
        if 0 < w < 1:
            denom = math.log(max(1e-300, 1 - w**4))
            needed = int(math.ceil(math.log(1 - ransac.confidence) / denom)) if denom < 0 else ransac.iters
        elif w >= 1:
            needed = 0
    if best_h is None:
        raise DegenerateConfiguration("every minimal sample was degenerate")

    mask = np.hypot(*(apply_h(best_h, src) - dst).T) <= thr
    h = best_h
    for _ in range(5):
        if mask.sum() < max(4, ransac.min_inliers):
            raise InsufficientInliers(f"{int(mask.sum())} inliers < {max(4, ransac.min_inliers)}")
        h = dlt(src[mask], dst[mask])
        if mask.sum() > 4:
            h = _refine_geometric(h, src[mask], dst[mask])
        new_mask = np.hypot(*(apply_h(h, src) - dst).T) <= thr
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if mask.sum() < max(4, ransac.min_inliers):
        raise InsufficientInliers(f"{int(mask.sum())} inliers < {max(4, ransac.min_inliers)}")
    res = np.hypot(*(apply_h(h, src) - dst).T)
    return HomographyFit(Homography(h), mask, res, drawn)


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class LandmarkPair:
    camera_id: str
    pixel: PixelPoint
    world: WorldPoint


@dataclass(frozen=True)
class CameraCalibration:
    """Fisheye intrinsics + homography (undistorted pixel -> plane metres)."""

    camera_id: str
    intrinsics: FisheyeIntrinsics
    homography: Homography
    scene_origin: WorldPoint
    mean_error_m: float = 0.0
    gate_m: float = 1.0

    def __post_init__(self):
        if self.camera_id not in CAMERA_IDS:
            raise ValueError(f"unknown camera id {self.camera_id!r}")
        if not self.mean_error_m <= self.gate_m:
            raise CalibrationGateError(
                f"{self.camera_id}: mean landmark error {self.mean_error_m:.3f} m exceeds gate {self.gate_m} m"
            )

    @property
    def plane(self) -> TangentPlane:
        return TangentPlane(self.scene_origin)

    def pixels_to_plane(self, pts) -> np.ndarray:
        return self.homography.apply(undistort_points(pts, self.intrinsics))

    def plane_to_pixels(self, en) -> np.ndarray:
        hinv = np.linalg.inv(self.homography.h)
        en = np.atleast_2d(np.asarray(en, dtype=float))
        w = en @ hinv[2, :2] + hinv[2, 2]
        # the ground point under the principal axis is in front by definition;
        # a projective scale of the other sign means the point is behind the camera
        front = self.homography.apply([[self.intrinsics.cx, self.intrinsics.cy]])[0]
        if np.any(w * (front @ hinv[2, :2] + hinv[2, 2]) <= 0):
            raise OutOfFieldOfView("ground point behind the camera")
        return distort_points(apply_h(hinv, en), self.intrinsics)

    def to_json(self) -> str:
        return json.dumps({
            "version": 1,
            "camera_id": self.camera_id,
            "intrinsics": self.intrinsics.to_dict(),
            "theta_max": self.intrinsics.theta_max,
            "homography": [float(x) for x in self.homography.h.ravel()],
            "scene_origin": {"lat": self.scene_origin.lat, "lon": self.scene_origin.lon},
            "mean_error_m": self.mean_error_m,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str, gate_m: float = 1.0) -> "CameraCalibration":
        d = json.loads(text)
        if d.get("version") != 1:
            raise ValueError(f"unsupported calibration version {d.get('version')!r}")
        k = d["intrinsics"]
        intr = FisheyeIntrinsics(k["cx"], k["cy"], k["f"], k["k1"], k["k2"], k["k3"],
                                 d.get("theta_max", DEFAULT_THETA_MAX))
        if len(d["homography"]) != 9:
            raise ValueError("homography must have 9 entries")
        return cls(d["camera_id"], intr, Homography(np.reshape(d["homography"], (3, 3))),
                   WorldPoint(d["scene_origin"]["lat"], d["scene_origin"]["lon"]),
                   float(d["mean_error_m"]), gate_m)


def pixel_to_world(p: PixelPoint, c: CameraCalibration) -> WorldPoint:
    en = c.pixels_to_plane([[p.u, p.v]])[0]
    return c.plane.plane_to_point(en)


def _pairs_arrays(pairs: Sequence[LandmarkPair], plane: TangentPlane):
    px = np.array([[p.pixel.u, p.pixel.v] for p in pairs], dtype=float)
    lat = np.array([p.world.lat for p in pairs])
    lon = np.array([p.world.lon for p in pairs])
    e, n = plane.to_plane(lat, lon)
    return px, np.c_[e, n]


def calibration_errors(pairs: Sequence[LandmarkPair], c: CameraCalibration) -> np.ndarray:
    if not pairs:
        raise EmptySet("no landmark pairs")
    px, en = _pairs_arrays(pairs, c.plane)
    return np.hypot(*(c.pixels_to_plane(px) - en).T)


def calibration_error(pairs: Sequence[LandmarkPair], c: CameraCalibration) -> float:
    """Mean tangent-plane distance (m) between mapped landmark pixels and their world points."""
    return float(np.mean(calibration_errors(pairs, c)))


# ---------------------------------------------------------------------------
# intrinsics


@dataclass
class IntrinsicsFit:
    intrinsics: FisheyeIntrinsics
    homography: Homography
    residual_before: float
    residual_after: float
    iterations: int
    converged: bool
    message: str = ""


def _unpack(x: np.ndarray, theta_max: float):
    f, k2, k3, cx, cy = x[:5]
    h = np.append(x[5:], 1.0).reshape(3, 3)
    return FisheyeIntrinsics(cx, cy, f, 1.0, k2, k3, theta_max, check=False), h


def _residuals(x, px, en, theta_max):
    k, h = _unpack(x, theta_max)
    if k.f <= 0 or not k.is_monotonic(257):
        return None
    try:
        und = undistort_points(px, k)
    except CalibrationError:
        return None
    q = und @ h[:, :2].T + h[:, 2]
    if np.any(np.abs(q[:, 2]) < 1e-12):
        return None
    return (q[:, :2] / q[:, 2:3] - en).ravel()


def estimate_intrinsics(px, en, init: FisheyeIntrinsics, h_init: np.ndarray | None = None,
                        max_iter: int = 200, step_tol: float = 1e-10) -> IntrinsicsFit:
    """Levenberg-Marquardt over (focal, k2, k3, principal point) and the homography.

    ``k1`` is the gauge: scaling focal by a and every k by 1/a leaves every
    pixel unchanged (the homography absorbs the pinhole scale), so the fit
    works with ``init.normalized()`` and returns intrinsics with k1 = 1.
    """
    px = np.asarray(px, dtype=float)
    en = np.asarray(en, dtype=float)
    if len(px) < 10:
        raise DegenerateConfiguration("intrinsics estimation needs >= 10 landmark pairs")
    k0 = init.normalized()
    if h_init is None:
        h_init = dlt(undistort_points(px, k0), en)
    x = np.r_[k0.f, k0.k2, k0.k3, k0.cx, k0.cy, (h_init / h_init[2, 2]).ravel()[:8]]
    r = _residuals(x, px, en, k0.theta_max)
    if r is None:
        raise NonInvertibleRadius("initial intrinsics cannot undistort the landmarks")
    cost0 = cost = float(r @ r)
    lam = 1e-3
    converged, it, msg = False, 0, ""
    scale = np.maximum(np.abs(x), 1e-3)
    floor = (1e-9) ** 2 * len(px)
    for it in range(1, max_iter + 1):
        if cost < floor:
            converged, msg = True, "residual at numerical floor"
            break
        jac = np.empty((r.size, x.size))
        for j in range(x.size):
            step = 1e-6 * scale[j]
            e = np.zeros_like(x)
            e[j] = step
            rp = _residuals(x + e, px, en, k0.theta_max)
            rm = _residuals(x - e, px, en, k0.theta_max)
            if rp is not None and rm is not None:
                jac[:, j] = (rp - rm) / (2 * step)
            elif rp is not None:
                jac[:, j] = (rp - r) / step
            elif rm is not None:
                jac[:, j] = (r - rm) / step
            else:
                jac[:, j] = 0.0
        # column scaling keeps focal (~300) and homography terms (~1e-3) comparable
        d = np.sqrt(np.sum(jac**2, axis=0)) + 1e-300
        js = jac / d
        g = js.T @ r
        a = js.T @ js
        accepted = False
        for _ in range(30):
            try:
                dz = np.linalg.solve(a + lam * np.diag(np.diag(a) + 1e-12), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dx = dz / d
            cand = x + dx
            rc = _residuals(cand, px, en, k0.theta_max)
            if rc is not None and float(rc @ rc) < cost:
                x, r, cost = cand, rc, float(rc @ rc)
                lam = max(lam / 3, 1e-12)
                accepted = True
                break
            lam *= 4
        if not accepted:
            converged, msg = True, "no further decrease"
            break
        if np.linalg.norm(dx / scale) < step_tol:
            converged, msg = True, "step norm below tolerance"
            break
    else:
        msg = "iteration budget exhausted"
    k, h = _unpack(x, k0.theta_max)
    n = len(px)
    return IntrinsicsFit(
        FisheyeIntrinsics(k.cx, k.cy, k.f, 1.0, k.k2, k.k3, k.theta_max),
        Homography(h), math.sqrt(cost0 / n), math.sqrt(cost / n), it, converged, msg,
    )


def calibrate(pairs: Sequence[LandmarkPair], init: FisheyeIntrinsics, scene_origin: WorldPoint,
              ransac: RansacParams = RansacParams(), estimate: bool = True,
              gate_m: float = 1.0) -> CameraCalibration:
    """Full landmark calibration for one camera.

    RANSAC on the initial undistortion selects inliers; the intrinsics and
    homography are then refined jointly on the inliers, and a final RANSAC
    pass re-fits the homography under the refined lens model.
    """
    if not pairs:
        raise EmptySet("no landmark pairs")
    cams = {p.camera_id for p in pairs}
    if len(cams) != 1:
        raise ValueError(f"pairs span several cameras: {sorted(cams)}")
    plane = TangentPlane(scene_origin)
    px, en = _pairs_arrays(pairs, plane)
    intr = init
    fit = fit_homography(undistort_points(px, intr), en, ransac)
    if estimate:
        m = fit.inlier_mask
        est = estimate_intrinsics(px[m], en[m], intr, fit.homography.h)
        intr = est.intrinsics
        fit = fit_homography(undistort_points(px, intr), en, ransac)
    cam = CameraCalibration(pairs[0].camera_id, intr, fit.homography, scene_origin, 0.0, math.inf)
    err = calibration_error(pairs, cam)
    return CameraCalibration(cam.camera_id, intr, fit.homography, scene_origin, err, gate_m)


# ---------------------------------------------------------------------------
# landmark CSV


LANDMARK_HEADER = ["camera_id", "u_px", "v_px", "lat_deg", "lon_deg"]


def read_landmarks(stream: Iterable[str] | io.TextIOBase) -> list[LandmarkPair]:
    reader = csv.DictReader(stream)
    if reader.fieldnames != LANDMARK_HEADER:
        raise ValueError(f"landmark header must be {','.join(LANDMARK_HEADER)}")
    out = []
    for row in reader:
        out.append(LandmarkPair(row["camera_id"], PixelPoint(float(row["u_px"]), float(row["v_px"])),
                                WorldPoint(float(row["lat_deg"]), float(row["lon_deg"]))))
    return out


def write_landmarks(pairs: Iterable[LandmarkPair], stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(LANDMARK_HEADER)
    for p in pairs:
        w.writerow([p.camera_id, repr(p.pixel.u), repr(p.pixel.v), repr(p.world.lat), repr(p.world.lon)])
