import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msight.calib import CameraCalibration, FisheyeIntrinsics, Homography, OutOfFieldOfView
from msight.detect import BottomBox, DetectionFrame, DetectionRecord, ObjectClass, TruthFrame, TruthObject, synth_detect
from msight.locfuse import FrameSkew, FusionStats, OutsideRoi, fuse, localize, roi_assign, roi_assign_en
from msight.sim.scene import DEFAULT_ORIGIN, make_landmarks


def test_roi_examples(roi):
    plane = roi.plane
    assert roi_assign(plane.plane_to_point([10.0, 10.0]), roi) == "NE"
    assert roi_assign(roi.center, roi) == "NE"
    with pytest.raises(OutsideRoi):
        roi_assign(plane.plane_to_point([51.0, 0.0]), roi)


def test_roi_axis_ties():
    assert roi_assign_en(0.0, -5.0) == "SE"
    assert roi_assign_en(5.0, 0.0) == "NE"
    assert roi_assign_en(-5.0, 0.0) == "NW"


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_quadrants_partition_the_disc(e, n):
    if math.hypot(e, n) > 50:
        return
    q = roi_assign_en(e, n)
    hits = [c for c, (se, sn) in {"NE": (1, 1), "NW": (-1, 1), "SE": (1, -1), "SW": (-1, -1)}.items()
            if (e * se > 0 or (e == 0 and se > 0)) and (n * sn > 0 or (n == 0 and sn > 0))]
    assert hits == [q]


def _identity_calib(cam="NE"):
    k = FisheyeIntrinsics.equidistant(0.0, 0.0, 1e6)
    return CameraCalibration(cam, k, Homography.identity(), DEFAULT_ORIGIN)


def test_square_box_under_identity_calibration_has_unit_aspect():
    # a huge focal length makes the lens a pinhole to ~1e-12 near the axis
    d = DetectionRecord("NE", 0, ObjectClass.Car, BottomBox(5.0, 3.0, 2.0, 2.0), 1.0)
    wd = localize(d, _identity_calib())
    assert wd.r == pytest.approx(1.0, abs=1e-9)
    assert wd.s == pytest.approx(4.0, rel=1e-9)
    assert (wd.east, wd.north) == pytest.approx((5.0, 3.0), abs=1e-9)


def test_box_corners_outside_roi(roi):
    d = DetectionRecord("NE", 0, ObjectClass.Car, BottomBox(49.0, 0.5, 4.0, 2.0), 1.0)
    with pytest.raises(OutOfFieldOfView):
        localize(d, _identity_calib(), roi)


def test_detection_at_landmark_pixel_maps_to_landmark(rig):
    cam = rig["NW"]
    cal = cam.true_calibration()
    for lm in make_landmarks(cam, 10, seed=3):
        d = DetectionRecord("NW", 0, ObjectClass.Car, BottomBox(lm.pixel.u, lm.pixel.v, 8.0, 8.0), 0.9)
        wd = localize(d, cal)
        np.testing.assert_allclose(cal.plane.point_to_plane(wd.position),
                                   cal.plane.point_to_plane(lm.world), atol=1e-6)


def _frames(objects, calibs, cams=("NE", "NW", "SE", "SW")):
    tf = TruthFrame(0, 8000, tuple(objects))
    return [synth_detect(tf, calibs[c]) for c in cams]


def test_object_seen_by_two_cameras_fuses_once(true_calibs, roi):
    obj = TruthObject(1, ObjectClass.Car, 14.0, 6.0, 0.2)
    frames = _frames([obj], true_calibs, ("NE", "NW"))
    assert all(len(f.detections) == 1 for f in frames)
    out = fuse(frames, true_calibs, roi)
    assert len(out) == 1 and out[0].source_camera == "NE"


ONE_PER_QUADRANT = [
    TruthObject(1, ObjectClass.Car, 18.0, 12.0, 0.3),
    TruthObject(2, ObjectClass.Car, -22.0, 9.0, 1.3),
    TruthObject(3, ObjectClass.Car, 11.0, -27.0, 2.3),
    TruthObject(4, ObjectClass.Car, -15.0, -15.0, -0.8),
]


def test_one_object_per_quadrant(true_calibs, roi):
    out = fuse(_frames(ONE_PER_QUADRANT, true_calibs), true_calibs, roi)
    assert sorted(w.source_camera for w in out) == ["NE", "NW", "SE", "SW"]
    for w in out:
        t = ONE_PER_QUADRANT[["NE", "NW", "SE", "SW"].index(w.source_camera)]
        assert (w.east, w.north) == pytest.approx((t.east, t.north), abs=1e-6)


def test_missing_camera_isolation(true_calibs, roi):
    full = fuse(_frames(ONE_PER_QUADRANT, true_calibs), true_calibs, roi)
    stats = FusionStats()
    part = fuse(_frames(ONE_PER_QUADRANT, true_calibs, ("NW", "SE", "SW")), true_calibs, roi, stats=stats)
    assert stats.missing_cameras == ("NE",)
    assert part == [w for w in full if w.source_camera != "NE"]


def test_fusion_permutation_invariant(true_calibs, roi):
    frames = _frames(ONE_PER_QUADRANT, true_calibs)
    ref = fuse(frames, true_calibs, roi)
    for perm in itertools.permutations(frames):
        assert fuse(perm, true_calibs, roi) == ref


def test_quadrant_counts_sum_to_total(true_calibs, roi):
    rng = np.random.default_rng(0)
    objs = []
    while len(objs) < 25:
        e, n = rng.uniform(-45, 45, 2)
        if math.hypot(e, n) < 44 and min(abs(e), abs(n)) > 3:
            objs.append(TruthObject(len(objs), ObjectClass.Car, e, n, rng.uniform(-3, 3)))
    out = fuse(_frames(objs, true_calibs), true_calibs, roi)
    counts = {c: sum(w.source_camera == c for w in out) for c in ("NE", "NW", "SE", "SW")}
    assert sum(counts.values()) == len(out) == len(objs)


def test_frame_skew_rejected(true_calibs, roi):
    a = DetectionFrame("NE", 1000)
    b = DetectionFrame("SW", 1200)
    with pytest.raises(FrameSkew):
        fuse([a, b], true_calibs, roi)
    assert fuse([a, DetectionFrame("SW", 1090)], true_calibs, roi) == []
