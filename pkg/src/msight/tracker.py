"""SORT-style tracker on the ground plane.

State per track is [x, y, s, r, vx, vy, vs, vr] in metres, m^2 and per-frame
derivatives; one frame is 0.4 s. Association is IoU on axis-aligned plane
boxes solved by the Hungarian method, optionally with the box centre taken
from the trajectory predictor instead of the Kalman prediction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .detect import ObjectClass

FRAME_S = 0.4
STATE_DIM = 8

Q_DEFAULT = (0.01, 0.01, 0.04, 1e-4, 0.25, 0.25, 0.01, 1e-6)
R_DEFAULT = (0.25, 0.25, 0.09, 1e-4)
_MIN_SR = 1e-6


class CovarianceNotSPD(ArithmeticError):
    pass


@dataclass(frozen=True)
class PlaneBox:
    east: float
    north: float
    s: float
    r: float

    def __post_init__(self):
        if not (self.s > 0 and self.r > 0):
            raise ValueError(f"box scale and aspect must be positive, got s={self.s}, r={self.r}")

    @property
    def width(self) -> float:
        return math.sqrt(self.s * self.r)

    @property
    def height(self) -> float:
        return math.sqrt(self.s / self.r)

    def as_z(self) -> np.ndarray:
        return np.array([self.east, self.north, self.s, self.r])


def iou(a: PlaneBox, b: PlaneBox) -> float:
    ax0, ax1 = a.east - a.width / 2, a.east + a.width / 2
    ay0, ay1 = a.north - a.height / 2, a.north + a.height / 2
    bx0, bx1 = b.east - b.width / 2, b.east + b.width / 2
    by0, by1 = b.north - b.height / 2, b.north + b.height / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.s + b.s - inter)


def iou_matrix(a: Sequence[PlaneBox], b: Sequence[PlaneBox]) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i, j] = iou(x, y)
    return out


# ---------------------------------------------------------------------------
# assignment


@dataclass(frozen=True)
class Assignment:
    matches: tuple
    unmatched_rows: tuple
    unmatched_cols: tuple

    def cost(self, c: np.ndarray) -> float:
        return float(sum(c[i, j] for i, j in self.matches))


def _solve_square_min(c: np.ndarray) -> np.ndarray:
    """Shortest augmenting path with dual potentials; rows <= cols.

    Returns col index per row. O(n^2 m).
    """
    n, m = c.shape
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows = np.full(n, -1)
    for j in range(1, m + 1):
        if p[j]:
            rows[p[j] - 1] = j - 1
    return rows


def hungarian(cost, allowed=None) -> Assignment:
    """Minimum-cost matching of maximum cardinality over allowed pairs.

    ``allowed`` defaults to the finite entries of ``cost``. Forbidden pairs get
    a penalty larger than any difference in allowed cost, so the solver first
    maximises the number of allowed matches and then minimises their cost;
    penalised pairs are reported as unmatched.
    """
    c = np.array(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n, m = c.shape
    ok = np.isfinite(c) if allowed is None else (np.asarray(allowed, dtype=bool) & np.isfinite(c))
    if n == 0 or m == 0 or not ok.any():
        return Assignment((), tuple(range(n)), tuple(range(m)))
    lo = c[ok].min()
    span = c[ok].max() - lo
    big = (span + 1.0) * (min(n, m) + 1)
    w = np.where(ok, c - lo, big)
    transposed = n > m
    if transposed:
        w = w.T
    cols = _solve_square_min(w)
    pairs = [(j, int(i)) if transposed else (int(i), j) for i, j in enumerate(cols)]
    pairs = sorted((a, b) for a, b in pairs if ok[a, b])
    mr = {a for a, _ in pairs}
    mc = {b for _, b in pairs}
    return Assignment(tuple(pairs), tuple(i for i in range(n) if i not in mr),
                      tuple(j for j in range(m) if j not in mc))


# ---------------------------------------------------------------------------
# Kalman filter


@dataclass(frozen=True)
class KalmanModel:
    q: tuple = Q_DEFAULT
    r: tuple = R_DEFAULT
    velocity_factor: float = 10.0
    dt: float = 1.0  # frames

    @property
    def F(self) -> np.ndarray:
        f = np.eye(STATE_DIM)
        f[:4, 4:] = self.dt * np.eye(4)
        return f

    @property
    def H(self) -> np.ndarray:
        return np.eye(4, STATE_DIM)

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.r)

    def initial_covariance(self) -> np.ndarray:
        r = np.asarray(self.r, dtype=float)
        return np.diag(np.r_[r, self.velocity_factor * r])


@dataclass(frozen=True)
class TrackState:
    id: int
    x: np.ndarray
    P: np.ndarray
    cls: ObjectClass = ObjectClass.Car
    misses: int = 0
    hits: int = 1
    streak: int = 1
    confirmed: bool = False
    history: tuple = ()

    @property
    def box(self) -> PlaneBox:
        return PlaneBox(float(self.x[0]), float(self.x[1]), max(float(self.x[2]), _MIN_SR),
                        max(float(self.x[3]), _MIN_SR))


def _check_spd(p: np.ndarray) -> None:
    if not np.allclose(p, p.T, rtol=0, atol=1e-9 * max(1.0, np.abs(p).max())):
        raise CovarianceNotSPD("covariance is not symmetric")
    try:
        np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        raise CovarianceNotSPD("covariance is not positive definite") from None


def kf_predict(t: TrackState, model: KalmanModel = KalmanModel()) -> TrackState:
    _check_spd(t.P)
    f = model.F
    x = f @ t.x
    p = f @ t.P @ f.T + model.Q
    return replace(t, x=x, P=0.5 * (p + p.T))


def kf_update(t: TrackState, z: PlaneBox, model: KalmanModel = KalmanModel()) -> TrackState:
    _check_spd(t.P)
    h = model.H
    y = z.as_z() - h @ t.x
    s = h @ t.P @ h.T + model.R
    k = np.linalg.solve(s, h @ t.P).T
    x = t.x + k @ y
    # Joseph form keeps the covariance symmetric positive definite
    a = np.eye(STATE_DIM) - k @ h
    p = a @ t.P @ a.T + k @ model.R @ k.T
    x[2] = max(x[2], _MIN_SR)
    x[3] = max(x[3], _MIN_SR)
    return replace(t, x=x, P=0.5 * (p + p.T), misses=0, hits=t.hits + 1)


def new_track(track_id: int, z: PlaneBox, cls: ObjectClass = ObjectClass.Car,
              model: KalmanModel = KalmanModel(), history_len: int = 6) -> TrackState:
    x = np.zeros(STATE_DIM)
    x[:4] = z.as_z()
    return TrackState(track_id, x, model.initial_covariance(), cls, history=((z.east, z.north),)[-history_len:])


# ---------------------------------------------------------------------------
# tracker


@dataclass(frozen=True)
class TrackerConfig:
    iou_min: float = 0.1
    max_misses: int = 3
    confirm_hits: int = 2
    history_len: int = 6
    model: KalmanModel = KalmanModel()


@dataclass(frozen=True)
class TrackOutput:
    ts: int
    id: int
    cls: ObjectClass
    east: float
    north: float
    v_e: float  # m/s
    v_n: float
    s: float
    r: float

    def to_json(self, plane=None) -> dict:
        d = {"ts": self.ts, "id": self.id, "cls": self.cls.value}
        if plane is not None:
            lat, lon = plane.to_world(self.east, self.north)
            d.update(lat=float(lat), lon=float(lon))
        else:
            d.update(east=self.east, north=self.north)
        d.update(v_e=self.v_e, v_n=self.v_n, s=self.s, r=self.r)
        return d


@dataclass(frozen=True)
class StepResult:
    outputs: tuple  # confirmed tracks updated this frame
    detection_ids: tuple  # track id per input detection
    deleted: tuple  # ids removed this frame


class Tracker:
    """Single-writer tracker state for one scene."""

    def __init__(self, config: TrackerConfig = TrackerConfig()):
        self.config = config
        self.tracks: list[TrackState] = []
        self._next_id = 1

    def _spawn(self, z: PlaneBox, cls: ObjectClass) -> TrackState:
        t = new_track(self._next_id, z, cls, self.config.model, self.config.history_len)
        self._next_id += 1
        if self.config.confirm_hits <= 1:
            t = replace(t, confirmed=True)
        return t

    def histories(self) -> dict[int, tuple]:
        return {t.id: t.history for t in self.tracks}

    def step(self, detections: Sequence, ts: int = 0,
             predicted: Mapping[int, Sequence[float]] | None = None) -> StepResult:
        """Advance one frame.

        ``detections`` are objects with east, north, s, r (and optionally cls).
        ``predicted`` maps track id -> one-frame-ahead (east, north) from the
        trajectory predictor; those tracks associate on the predicted centre.
        """
        cfg = self.config
        hl = cfg.history_len
        prior = [kf_predict(t, cfg.model) for t in self.tracks]
        boxes = []
        for t in prior:
            b = t.box
            if predicted and t.id in predicted:
                e, n = predicted[t.id]
                b = PlaneBox(float(e), float(n), b.s, b.r)
            boxes.append(b)
        zs = [PlaneBox(d.east, d.north, d.s, d.r) for d in detections]
        ious = iou_matrix(boxes, zs)
        a = hungarian(1.0 - ious, ious >= cfg.iou_min)
        det_ids: list[int | None] = [None] * len(zs)
        kept, outputs, deleted = [], [], []
        for ti, di in a.matches:
            t = kf_update(prior[ti], zs[di], cfg.model)
            streak = prior[ti].streak + 1
            t = replace(t, cls=getattr(detections[di], "cls", t.cls), streak=streak,
                        confirmed=prior[ti].confirmed or streak >= cfg.confirm_hits,
                        history=(prior[ti].history + ((float(t.x[0]), float(t.x[1])),))[-hl:])
            det_ids[di] = t.id
            kept.append(t)
        for ti in a.unmatched_rows:
            t = prior[ti]
            misses = t.misses + 1
            if misses >= cfg.max_misses:
                deleted.append(t.id)
                continue
            kept.append(replace(t, misses=misses, streak=0,
                                history=(t.history + ((float(t.x[0]), float(t.x[1])),))[-hl:]))
        for di in a.unmatched_cols:
            t = self._spawn(zs[di], getattr(detections[di], "cls", ObjectClass.Car))
            det_ids[di] = t.id
            kept.append(t)
        kept.sort(key=lambda t: t.id)
        self.tracks = kept
        for t in kept:
            if t.confirmed and t.misses == 0:
                outputs.append(TrackOutput(ts, t.id, t.cls, float(t.x[0]), float(t.x[1]),
                                           float(t.x[4]) / FRAME_S, float(t.x[5]) / FRAME_S,
                                           float(t.x[2]), float(t.x[3])))
        return StepResult(tuple(outputs), tuple(det_ids), tuple(sorted(deleted)))
