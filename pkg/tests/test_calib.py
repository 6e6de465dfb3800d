import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msight.calib import (
    CameraCalibration,
    CalibrationGateError,
    DegenerateConfiguration,
    FisheyeIntrinsics,
    Homography,
    InsufficientInliers,
    LandmarkPair,
    NonInvertibleRadius,
    OutOfFieldOfView,
    RansacParams,
    apply_h,
    calibrate,
    calibration_error,
    distort_points,
    estimate_intrinsics,
    fit_homography,
    pixel_to_world,
    read_landmarks,
    undistort_point,
    undistort_points,
    write_landmarks,
)
from msight.geo import PixelPoint, TangentPlane, WorldPoint
from msight.sim.scene import DEFAULT_ORIGIN, default_rig, make_landmarks


def bisect_theta(rho, k):
    """Scalar reference inversion of rho = f*r(theta), independent of the library path."""
    lo, hi = 0.0, k.theta_max
    for _ in range(200):
        mid = (lo + hi) / 2
        val = k.f * (k.k1 * mid + k.k2 * mid**3 + k.k3 * mid**5)
        if val < rho:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def random_h(rng, max_cond=1e3):
    while True:
        h = np.eye(3) + rng.normal(0, 0.2, (3, 3))
        h[2, :2] = rng.normal(0, 1e-3, 2)
        h[:2, 2] = rng.uniform(-50, 50, 2)
        h /= h[2, 2]
        if np.linalg.cond(h[:2, :2]) < max_cond and abs(np.linalg.det(h)) > 1e-3:
            return h


@pytest.fixture
def lens():
    return FisheyeIntrinsics(512.0, 500.0, 330.0, 1.0, -0.03, 0.002)


def test_principal_point_is_fixed(lens):
    assert undistort_point(PixelPoint(512.0, 500.0), lens) == PixelPoint(512.0, 500.0)


def test_equidistant_matches_bisection_oracle():
    k = FisheyeIntrinsics(400.0, 300.0, 250.0)
    rng = np.random.default_rng(3)
    for _ in range(200):
        rho = rng.uniform(0, k.max_radius * 0.999)
        phi = rng.uniform(0, 2 * math.pi)
        p = PixelPoint(400 + rho * math.cos(phi), 300 + rho * math.sin(phi))
        q = undistort_point(p, k)
        expected = k.f * math.tan(bisect_theta(rho, k))
        assert math.hypot(q.u - 400, q.v - 300) == pytest.approx(expected, rel=1e-9)


def test_general_lens_matches_bisection_oracle(lens):
    rng = np.random.default_rng(4)
    rho = rng.uniform(1, lens.max_radius * 0.999, 200)
    pts = np.c_[lens.cx + rho, np.full_like(rho, lens.cy)]
    und = undistort_points(pts, lens)
    expected = np.array([lens.f * math.tan(bisect_theta(r, lens)) for r in rho])
    np.testing.assert_allclose(und[:, 0] - lens.cx, expected, rtol=1e-9)


def test_inversion_residual_below_tolerance(lens):
    rho = np.linspace(0, lens.max_radius, 500)
    theta = lens.solve_theta(rho)
    assert np.max(np.abs(lens.r(theta) - rho / lens.f)) < 1e-10


def test_distort_undistort_round_trip_1000_points(lens):
    rng = np.random.default_rng(5)
    rho = lens.max_radius * np.sqrt(rng.uniform(0, 0.995, 1000))
    phi = rng.uniform(0, 2 * np.pi, 1000)
    p = np.c_[lens.cx + rho * np.cos(phi), lens.cy + rho * np.sin(phi)]
    back = distort_points(undistort_points(p, lens), lens)
    assert np.max(np.abs(back - p)) < 1e-8


def test_out_of_fov_raises(lens):
    with pytest.raises(OutOfFieldOfView):
        undistort_point(PixelPoint(lens.cx + lens.max_radius + 1.0, lens.cy), lens)


def test_non_monotonic_lens_rejected():
    with pytest.raises(NonInvertibleRadius):
        FisheyeIntrinsics(0, 0, 300.0, 1.0, -0.5, 0.0)


def test_homography_identity_from_four_pairs():
    src = np.array([[0, 0], [10, 0], [10, 10], [0, 10.0]])
    fit = fit_homography(src, src)
    np.testing.assert_allclose(fit.homography.h, np.eye(3), atol=1e-10)
    assert fit.inlier_mask.all()


def test_homography_recovered_from_20_clean_pairs():
    rng = np.random.default_rng(11)
    h = random_h(rng)
    src = rng.uniform(0, 1000, (20, 2))
    fit = fit_homography(src, apply_h(h, src))
    assert np.linalg.norm(fit.homography.h - h) / np.linalg.norm(h) < 1e-8


def test_ransac_mask_excludes_constructed_outliers():
    rng = np.random.default_rng(12)
    h = random_h(rng)
    src = rng.uniform(0, 1000, (28, 2))
    dst = apply_h(h, src)
    params = RansacParams()
    bad = rng.choice(28, 8, replace=False)
    ang = rng.uniform(0, 2 * np.pi, 8)
    dst[bad] += (10 * params.inlier_threshold_m + rng.uniform(0, 20, 8))[:, None] * np.c_[np.cos(ang), np.sin(ang)]
    fit = fit_homography(src, dst, params)
    expected = np.ones(28, bool)
    expected[bad] = False
    np.testing.assert_array_equal(fit.inlier_mask, expected)


def test_ransac_deterministic_per_seed():
    rng = np.random.default_rng(13)
    h = random_h(rng)
    src = rng.uniform(0, 1000, (25, 2))
    dst = apply_h(h, src) + rng.normal(0, 0.1, (25, 2))
    dst[:6] += 30
    a = fit_homography(src, dst, RansacParams(seed=7))
    b = fit_homography(src, dst, RansacParams(seed=7))
    np.testing.assert_array_equal(a.inlier_mask, b.inlier_mask)
    np.testing.assert_array_equal(a.homography.h, b.homography.h)


def test_homography_scale_invariance():
    rng = np.random.default_rng(14)
    h = random_h(rng)
    src = rng.uniform(0, 1000, (20, 2))
    dst = apply_h(h, src)
    a = fit_homography(src, dst).homography
    b = fit_homography(src, 2 * dst, RansacParams(inlier_threshold_m=1.0)).homography
    test = rng.uniform(0, 1000, (50, 2))
    np.testing.assert_allclose(b.apply(test), 2 * a.apply(test), rtol=1e-8)


def test_collinear_samples_are_degenerate():
    src = np.c_[np.arange(6.0), np.arange(6.0)]
    with pytest.raises(DegenerateConfiguration):
        fit_homography(src, src)


def test_too_few_inliers():
    rng = np.random.default_rng(15)
    src = rng.uniform(0, 100, (8, 2))
    dst = rng.uniform(0, 100, (8, 2))
    with pytest.raises(InsufficientInliers):
        fit_homography(src, dst, RansacParams(min_inliers=8))


def _identity_calibration(origin=DEFAULT_ORIGIN):
    k = FisheyeIntrinsics(0.0, 0.0, 1.0)
    return CameraCalibration("NE", k, Homography.identity(), origin)


def test_identity_calibration_maps_origin_pixel_to_scene_origin():
    w = pixel_to_world(PixelPoint(0.0, 0.0), _identity_calibration())
    assert w.lat == pytest.approx(DEFAULT_ORIGIN.lat, abs=1e-12)
    assert w.lon == pytest.approx(DEFAULT_ORIGIN.lon, abs=1e-12)


def test_calibration_error_arithmetic_mean():
    cal = _identity_calibration()
    plane = TangentPlane(DEFAULT_ORIGIN)
    pairs = []
    for px, off in (((0.1, 0.1), (0.3, 0.0)), ((0.2, -0.1), (0.0, 0.5))):
        und = undistort_points([px], cal.intrinsics)[0]
        lat, lon = plane.to_world(und[0] + off[0], und[1] + off[1])
        pairs.append(LandmarkPair("NE", PixelPoint(*px), WorldPoint(float(lat), float(lon))))
    assert calibration_error(pairs, cal) == pytest.approx(0.4, abs=1e-9)
    exact = [LandmarkPair("NE", p.pixel, pixel_to_world(p.pixel, cal)) for p in pairs]
    assert calibration_error(exact, cal) == pytest.approx(0.0, abs=1e-9)


def test_calibration_gate_enforced():
    with pytest.raises(CalibrationGateError):
        CameraCalibration("NE", FisheyeIntrinsics(0, 0, 1.0), Homography.identity(), DEFAULT_ORIGIN, 1.5)


def test_landmark_round_trip_within_calibration_error():
    cam = default_rig()["NW"]
    lm = make_landmarks(cam, 20, noise_px=0.5, seed=2)
    cal = calibrate(lm, FisheyeIntrinsics.equidistant(512, 512, 0.49 * 1024), DEFAULT_ORIGIN)
    plane = cal.plane
    errs = [np.hypot(*(plane.point_to_plane(pixel_to_world(p.pixel, cal)) - plane.point_to_plane(p.world)))
            for p in lm]
    assert np.mean(errs) == pytest.approx(cal.mean_error_m, rel=1e-6)


def test_plane_linearity_against_direct_matrix():
    cal = default_rig()["SE"].true_calibration()
    a, b = np.array([300.0, 420.0]), np.array([700.0, 610.0])
    ua, ub = undistort_points(np.array([a, b]), cal.intrinsics)
    mid = (ua + ub) / 2
    h = cal.homography.h
    q = h @ np.r_[mid, 1.0]
    np.testing.assert_allclose(cal.homography.apply(mid)[0], q[:2] / q[2], rtol=1e-12)


def test_noisy_scene_calibration_error_below_one_metre():
    for cid, cam in default_rig().items():
        lm = make_landmarks(cam, 20, noise_px=0.5, seed=21)
        cal = calibrate(lm, FisheyeIntrinsics.equidistant(512, 512, 0.49 * 1024), DEFAULT_ORIGIN)
        assert cal.mean_error_m < 1.0


def test_roi_corner_pixels_land_in_scene_disc():
    for cid, cam in default_rig().items():
        cal = cam.true_calibration()
        se = math.copysign(1, cam.pose.east)
        sn = math.copysign(1, cam.pose.north)
        corners = np.array([[0.5 * se, 0.5 * sn], [49 * se, 0.5 * sn], [0.5 * se, 49 * sn], [34 * se, 34 * sn]])
        px = cam.project(corners)
        en = cal.pixels_to_plane(px)
        assert np.all(np.hypot(en[:, 0], en[:, 1]) < 50.0)


# intrinsics -----------------------------------------------------------------


def _clean_set(cid="NE", n=24):
    cam = default_rig()[cid]
    lm = make_landmarks(cam, n, seed=30)
    plane = TangentPlane(DEFAULT_ORIGIN)
    px = np.array([[p.pixel.u, p.pixel.v] for p in lm])
    en = np.array([plane.point_to_plane(p.world) for p in lm])
    return cam, px, en


def _rel(a: FisheyeIntrinsics, b: FisheyeIntrinsics):
    va = np.array([a.f, a.k2, a.k3, a.cx, a.cy])
    vb = np.array([b.f, b.k2, b.k3, b.cx, b.cy])
    return np.abs(va - vb) / np.abs(vb)


def test_intrinsics_fixed_point_at_truth():
    cam, px, en = _clean_set()
    truth = cam.intrinsics
    fit = estimate_intrinsics(px, en, truth, np.linalg.inv(cam.plane_to_undistorted()))
    assert fit.residual_before < 1e-9
    assert np.max(_rel(fit.intrinsics, truth)) < 1e-9


@pytest.mark.parametrize("cid", ["NE", "SW"])
def test_intrinsics_recovered_from_perturbed_init(cid):
    cam, px, en = _clean_set(cid)
    t = cam.intrinsics
    init = FisheyeIntrinsics(t.cx * 1.02, t.cy * 0.98, t.f * 1.1, 1.0, t.k2 * 0.9, t.k3 * 1.1, t.theta_max)
    fit = estimate_intrinsics(px, en, init)
    assert fit.residual_after <= fit.residual_before
    assert np.max(_rel(fit.intrinsics, t)) < 1e-4


def test_intrinsics_gauge_normalization():
    k = FisheyeIntrinsics(10, 20, 200.0, 1.25, -0.02, 0.001)
    n = k.normalized()
    t = np.linspace(0, k.theta_max, 50)
    np.testing.assert_allclose(n.f * n.r(t), k.f * k.r(t), rtol=1e-12)
    assert n.k1 == 1.0


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.05, 0.3))
def test_fit_never_worsens_residual(noise, pert):
    cam = default_rig()["SE"]
    lm = make_landmarks(cam, 15, noise_px=noise, seed=4)
    plane = TangentPlane(DEFAULT_ORIGIN)
    px = np.array([[p.pixel.u, p.pixel.v] for p in lm])
    en = np.array([plane.point_to_plane(p.world) for p in lm])
    t = cam.intrinsics
    init = FisheyeIntrinsics(t.cx, t.cy, t.f * (1 + pert), 1.0, 0.0, 0.0, t.theta_max)
    fit = estimate_intrinsics(px, en, init, max_iter=15)
    assert fit.residual_after <= fit.residual_before


# file formats ---------------------------------------------------------------


def test_landmark_csv_round_trip():
    lm = make_landmarks(default_rig()["NE"], 5, noise_px=0.3, seed=1)
    buf = io.StringIO()
    write_landmarks(lm, buf)
    assert buf.getvalue().splitlines()[0] == "camera_id,u_px,v_px,lat_deg,lon_deg"
    assert read_landmarks(io.StringIO(buf.getvalue())) == lm


def test_calibration_json_round_trip():
    cal = default_rig()["SW"].true_calibration()
    back = CameraCalibration.from_json(cal.to_json())
    assert back.camera_id == "SW"
    np.testing.assert_allclose(back.homography.h, cal.homography.h, rtol=0, atol=0)
    assert back.intrinsics == cal.intrinsics
