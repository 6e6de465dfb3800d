import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msight.calib import pixel_to_world
from msight.detect import (
    BottomBox,
    DetectionFrame,
    DetectionRecord,
    DetectorNoise,
    DetectorStats,
    NonMonotoneTimestamp,
    ObjectClass,
    Occlusion,
    ParseError,
    TruthFrame,
    TruthObject,
    read_detection_log,
    synth_detect,
    write_detection_log,
)

LINE = {"cam": "NE", "ts": 1666372800400, "cls": "car", "u": 512.3, "v": 201.7, "w": 44.0, "h": 20.5,
        "conf": 0.91}


def _log(*records):
    return io.StringIO("".join(json.dumps(r) + "\n" for r in records))


def test_empty_stream():
    assert read_detection_log(io.StringIO("")) == []


def test_three_lines_one_timestamp_group_into_one_frame():
    frames = read_detection_log(_log(LINE, dict(LINE, u=10.0), dict(LINE, u=20.0)))
    assert len(frames) == 1
    assert len(frames[0].detections) == 3
    assert frames[0].camera_id == "NE" and frames[0].frame_ts == LINE["ts"]


def test_confidence_out_of_range_names_field():
    with pytest.raises(ParseError) as e:
        read_detection_log(_log(LINE, dict(LINE, conf=1.2)))
    assert e.value.line == 2
    assert "conf" in str(e.value)


@pytest.mark.parametrize("bad, field", [
    ({"cls": "bicycle"}, "cls"), ({"cam": "N"}, "cam"), ({"w": 0.0}, "w"), ({"ts": -1}, "ts"),
    ({"u": "x"}, "u"),
])
def test_bad_fields(bad, field):
    with pytest.raises(ParseError, match=field):
        read_detection_log(_log(dict(LINE, **bad)))


def test_missing_field_and_bad_json():
    rec = dict(LINE)
    del rec["h"]
    with pytest.raises(ParseError, match="'h'"):
        read_detection_log(_log(rec))
    with pytest.raises(ParseError, match="line 1"):
        read_detection_log(io.StringIO("{not json\n"))


def test_non_monotone_timestamp():
    with pytest.raises(NonMonotoneTimestamp):
        read_detection_log(_log(LINE, dict(LINE, ts=LINE["ts"] - 400)))
    # other cameras keep their own clocks
    frames = read_detection_log(_log(LINE, dict(LINE, cam="SW", ts=LINE["ts"] - 400)))
    assert [f.camera_id for f in frames] == ["SW", "NE"]


records = st.builds(
    lambda cam, cls, u, v, w, h, c: (cam, cls, BottomBox(u, v, w, h), c),
    st.sampled_from(["NE", "NW", "SE", "SW"]), st.sampled_from(list(ObjectClass)),
    st.floats(0, 1024), st.floats(0, 1024), st.floats(0.5, 200), st.floats(0.5, 200), st.floats(0, 1),
)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), records), max_size=30))
def test_write_read_round_trip(items):
    groups = {}
    for frame, (cam, cls, box, conf) in items:
        ts = 1_000_000 + 400 * frame
        groups.setdefault((cam, ts), []).append(DetectionRecord(cam, ts, cls, box, conf))
    order = ["NE", "NW", "SE", "SW"]
    frames = [DetectionFrame(c, t, tuple(groups[(c, t)]))
              for c, t in sorted(groups, key=lambda k: (k[1], order.index(k[0])))]
    buf = io.StringIO()
    write_detection_log(frames, buf)
    buf.seek(0)
    assert read_detection_log(buf) == frames


def test_frame_rejects_mixed_records():
    d = DetectionRecord("NE", 0, ObjectClass.Car, BottomBox(1, 1, 1, 1), 0.5)
    with pytest.raises(ValueError):
        DetectionFrame("NW", 0, (d,))


# ---------------------------------------------------------------------------
# synthetic detector

OBJECTS = (
    TruthObject(1, ObjectClass.Car, 12.0, 9.0, 0.4),
    TruthObject(7, ObjectClass.TruckBusTrailer, 20.0, 25.0, 1.9, 9.0, 2.6),
    TruthObject(3, ObjectClass.VulnerableRoadUser, 31.0, 4.0, -2.0, 1.8, 0.7),
)


def test_zero_noise_round_trip_is_exact_under_true_calibration(true_calibs):
    cal = true_calibs["NE"]
    fr = synth_detect(TruthFrame(0, 0, OBJECTS), cal)
    assert len(fr.detections) == 3
    plane = cal.plane
    for obj, d in zip(OBJECTS, fr.detections):
        assert d.cls is obj.cls
        en = plane.point_to_plane(pixel_to_world(d.box.center, cal))
        np.testing.assert_allclose(en, [obj.east, obj.north], atol=1e-6)


def test_drop_all_gives_empty_frame(true_calibs):
    fr = synth_detect(TruthFrame(0, 0, OBJECTS), true_calibs["NE"], DetectorNoise(drop_prob=1.0))
    assert fr.detections == ()


def test_occlusion_window_hides_object_exactly_in_its_frames(true_calibs):
    noise = DetectorNoise(occlusions=(Occlusion(7, 10, 13),))
    for frame in range(6, 18):
        fr = synth_detect(TruthFrame(frame, 400 * frame, OBJECTS), true_calibs["NE"], noise, seed=2)
        present = any(d.cls is ObjectClass.TruckBusTrailer for d in fr.detections)
        assert present == (not 10 <= frame <= 13), frame


def test_same_seed_bitwise_reproducible(true_calibs):
    noise = DetectorNoise(pos_sigma_px=1.5, drop_prob=0.2, fp_rate_per_frame=1.0)
    tf = TruthFrame(4, 1600, OBJECTS)
    assert synth_detect(tf, true_calibs["NE"], noise, 9) == synth_detect(tf, true_calibs["NE"], noise, 9)
    assert synth_detect(tf, true_calibs["NE"], noise, 9) != synth_detect(tf, true_calibs["NE"], noise, 10)


def test_drop_frequency_matches_probability(true_calibs):
    noise = DetectorNoise(drop_prob=0.3)
    tf = TruthFrame(0, 0, OBJECTS[:1])
    kept = sum(len(synth_detect(tf, true_calibs["NE"], noise, seed).detections) for seed in range(10_000))
    assert abs((10_000 - kept) / 10_000 - 0.3) <= 0.02


def test_false_positives_land_in_camera_quadrant(true_calibs):
    cal = true_calibs["SW"]
    stats = DetectorStats()
    noise = DetectorNoise(fp_rate_per_frame=3.0)
    for seed in range(30):
        fr = synth_detect(TruthFrame(0, 0, ()), cal, noise, seed, stats)
        for d in fr.detections:
            assert d.cls is ObjectClass.Car
            e, n = cal.pixels_to_plane([[d.box.u, d.box.v]])[0]
            assert e <= 1e-9 and n <= 1e-9 and math.hypot(e, n) <= 50 + 1e-9
    assert 60 <= stats.false_positives <= 120


def test_unprojectable_truth_is_skipped_with_counter(true_calibs):
    stats = DetectorStats()
    # one point past the lens field of view, one behind the (tilted) image plane
    wide = TruthObject(8, ObjectClass.Car, 400.0, 400.0, 0.0)
    behind = TruthObject(9, ObjectClass.Car, 5000.0, 5000.0, 0.0)
    fr = synth_detect(TruthFrame(0, 0, (wide, behind) + OBJECTS[:1]), true_calibs["NE"], stats=stats)
    assert len(fr.detections) == 1 and stats.skipped == 2
