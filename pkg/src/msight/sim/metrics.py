"""Detection, tracking and prediction metrics against ground truth.

Scoring happens on the expected-timestamp grid: every frame at which a
truth object is inside the evaluation disc expects one detection of it.
Errors are split into lateral (across the true heading) and longitudinal
(along it).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

LAT_GATE_M = 1.5
LON_GATE_M = 3.0


class EmptyDenominator(ZeroDivisionError):
    pass


def split_error(d, heading_vec) -> tuple[float, float]:
    """(signed lateral, signed longitudinal) components of displacement ``d``."""
    hx, hy = heading_vec
    n = math.hypot(hx, hy)
    tx, ty = hx / n, hy / n
    return tx * d[1] - ty * d[0], tx * d[0] + ty * d[1]


@dataclass(frozen=True)
class TruthSample:
    object_id: int
    east: float
    north: float
    heading: float  # radians, counter-clockwise from east
    scored: bool = True  # inside the evaluation region


@dataclass(frozen=True)
class Match:
    frame: int
    object_id: int
    det: int
    lat: float
    lon: float


@dataclass
class MatchResult:
    tp: list = field(default_factory=list)  # Match
    fn: list = field(default_factory=list)  # (frame, object_id)
    fp: list = field(default_factory=list)  # (frame, det index)
    n_dets: int = 0  # scored detections
    n_gt: int = 0  # scored expected detections
    fp_owner: dict = field(default_factory=dict)  # (frame, det) -> nearest object id or None


def match_detections(truth: Mapping[int, Sequence[TruthSample]], dets: Mapping[int, Sequence],
                     det_scored: Mapping[int, Sequence[bool]] | None = None,
                     lat_gate: float = LAT_GATE_M, lon_gate: float = LON_GATE_M) -> MatchResult:
    """Label detections per frame.

    ``truth[frame]`` lists truth samples, ``dets[frame]`` lists (east, north)
    positions. A pair is admissible when |lateral| <= lat_gate and
    |longitudinal| <= lon_gate; admissible pairs are taken nearest first, each
    side at most once. Unmatched scored truth is FN, unmatched scored
    detections are FP. A detection matched to an unscored truth sample, or an
    unscored detection matched to scored truth, counts as TP only if the
    truth is scored; an unscored detection is otherwise ignored.
    """
    out = MatchResult()
    for frame in sorted(set(truth) | set(dets)):
        objs = list(truth.get(frame, ()))
        pts = np.asarray(dets.get(frame, ()), dtype=float).reshape(-1, 2)
        scored = list(det_scored[frame]) if det_scored is not None and frame in det_scored else [True] * len(pts)
        cands = []
        for i, o in enumerate(objs):
            hv = (math.cos(o.heading), math.sin(o.heading))
            for j, p in enumerate(pts):
                d = (p[0] - o.east, p[1] - o.north)
                lat, lon = split_error(d, hv)
                if abs(lat) <= lat_gate and abs(lon) <= lon_gate:
                    cands.append((math.hypot(*d), i, j, lat, lon))
        cands.sort(key=lambda c: (c[0], c[1], c[2]))
        used_o, used_d = set(), set()
        for dist, i, j, lat, lon in cands:
            if i in used_o or j in used_d:
                continue
            used_o.add(i)
            used_d.add(j)
            if objs[i].scored:
                out.tp.append(Match(frame, objs[i].object_id, j, lat, lon))
                out.n_dets += 1
        for i, o in enumerate(objs):
            if o.scored:
                out.n_gt += 1
                if i not in used_o:
                    out.fn.append((frame, o.object_id))
        for j in range(len(pts)):
            if j in used_d or not scored[j]:
                continue
            out.fp.append((frame, j))
            out.n_dets += 1
            near = min(objs, key=lambda o: math.hypot(pts[j][0] - o.east, pts[j][1] - o.north), default=None)
            out.fp_owner[(frame, j)] = None if near is None else near.object_id
    return out


@dataclass(frozen=True)
class DetectionMetrics:
    fn_rate: float  # percent
    fp_rate: float  # percent
    lat_err: float  # mean |lateral| over TPs, m
    lon_err: float
    n_fn: int
    n_fp: int
    n_tp: int
    n_gt: int
    n_dets: int


def fn_rate(n_fn: int, n_gt: int) -> float:
    if n_gt <= 0:
        raise EmptyDenominator("no expected ground-truth detections")
    return 100.0 * n_fn / n_gt


def fp_rate(n_fp: int, n_dets: int) -> float:
    if n_dets <= 0:
        raise EmptyDenominator("no detections")
    return 100.0 * n_fp / n_dets


def mota(n_fn: int, n_fp: int, n_idsw: int, n_gt: int) -> float:
    if n_gt <= 0:
        raise EmptyDenominator("no expected ground-truth detections")
    return 1.0 - (n_fn + n_fp + n_idsw) / n_gt


def detection_metrics(n_fn: int, n_fp: int, n_gt: int, n_dets: int, lats=(), lons=()) -> DetectionMetrics:
    lats, lons = np.abs(np.asarray(lats, float)), np.abs(np.asarray(lons, float))
    fpr = fp_rate(n_fp, n_dets) if n_dets else 0.0  # no detections at all: nothing was false
    return DetectionMetrics(fn_rate(n_fn, n_gt), fpr, float(lats.mean()) if lats.size else math.nan,
                            float(lons.mean()) if lons.size else math.nan, n_fn, n_fp, len(lats), n_gt, n_dets)


def detection_metrics_from(m: MatchResult) -> DetectionMetrics:
    return detection_metrics(len(m.fn), len(m.fp), m.n_gt, m.n_dets, [t.lat for t in m.tp], [t.lon for t in m.tp])


@dataclass(frozen=True)
class TrackingMetrics:
    id_switch: int
    longest_track: float  # percent of the trip's expected frames
    mota: float


def id_switches(ids: Sequence) -> int:
    """Identity changes between consecutive matched frames; None marks an unmatched frame."""
    seen = [i for i in ids if i is not None]
    return sum(1 for a, b in zip(seen, seen[1:]) if a != b)


def longest_track(ids: Sequence) -> float:
    """Longest stretch under one id (matched frames, gaps do not break it) over all expected frames, in %."""
    if not ids:
        raise EmptyDenominator("trip has no expected frames")
    best = run = 0
    cur = None
    for i in ids:
        if i is None:
            continue
        if i == cur:
            run += 1
        else:
            cur, run = i, 1
        best = max(best, run)
    return 100.0 * best / len(ids)


def tracking_metrics(ids: Sequence, n_fn: int, n_fp: int) -> TrackingMetrics:
    """One trip: ``ids`` is the track id per expected frame (None where missed)."""
    sw = id_switches(ids)
    return TrackingMetrics(sw, longest_track(ids), mota(n_fn, n_fp, sw, len(ids)))


@dataclass(frozen=True)
class PredictionMetrics:
    fde_lat: float
    fde_lon: float
    pred_fp_rate: float  # percent of predictions whose final-frame lateral error exceeds the gate
    count: int


def prediction_metrics(pred_final: Sequence, truth_final: Sequence, truth_heading: Sequence,
                       lat_gate: float = LAT_GATE_M) -> PredictionMetrics:
    """Final-frame (K) displacement split across / along the true heading at frame K."""
    if len(pred_final) == 0:
        raise EmptyDenominator("no predictions to score")
    lats, lons = [], []
    for p, g, h in zip(pred_final, truth_final, truth_heading):
        lat, lon = split_error((p[0] - g[0], p[1] - g[1]), (math.cos(h), math.sin(h)))
        lats.append(abs(lat))
        lons.append(abs(lon))
    lats = np.asarray(lats)
    return PredictionMetrics(float(lats.mean()), float(np.mean(lons)), 100.0 * float(np.mean(lats > lat_gate)),
                             len(lats))


def sign_test_p(wins: int, losses: int) -> float:
    """One-sided exact sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2). Ties are dropped beforehand."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0**n
