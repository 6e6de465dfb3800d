"""Phase-1 / phase-2 latency instrumentation.

Phase 1 is the wall time of the perception step for one frame. Phase 2 is
stamped on the message itself: the producer writes its wall clock into the
header just before encoding, and the receiver subtracts it from its own wall
clock once decoding finishes. Both ends must share a clock (same host here).
"""
from __future__ import annotations

import math
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..geo import TangentPlane, heading_deg
from .codec import CodecError, PerceptionMessage, VehicleEntry, decode, encode
from .forward import CallbackTransport, DelayTransport, UdpTransport


class ClockSkewDetected(RuntimeError):
    pass


def wall_ms() -> float:
    return time.time() * 1000.0


@dataclass(frozen=True)
class LatencyRecord:
    seq: int
    phase1_ms: float
    phase2_ms: float


def summarize(values: Sequence[float]) -> dict:
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return {"n": 0}
    return {"n": int(a.size), "mean": float(a.mean()), "p50": float(np.percentile(a, 50)),
            "p90": float(np.percentile(a, 90)), "p99": float(np.percentile(a, 99)), "max": float(a.max())}


def build_message(tracks: Iterable, predictions: dict, plane: TangentPlane, seq: int, frame_ts_ms: int,
                  horizon: int = 0, producer_ts_ms: int | None = None) -> PerceptionMessage:
    """Tracks (east/north, m/s velocities) plus optional id -> (K, 2) predicted path in metres."""
    vehicles = []
    for t in tracks:
        lat, lon = plane.to_world(t.east, t.north)
        path = ()
        if horizon:
            pts = predictions.get(t.id)
            if pts is None:
                # no prediction yet: hold position
                pts = np.repeat([[t.east, t.north]], horizon, axis=0)
            la, lo = plane.to_world(np.asarray(pts)[:horizon, 0], np.asarray(pts)[:horizon, 1])
            path = tuple((float(a), float(b)) for a, b in zip(la, lo))
        vehicles.append(VehicleEntry(t.id, t.cls.code, float(lat), float(lon),
                                     heading_deg(t.v_e, t.v_n), math.hypot(t.v_e, t.v_n), path))
    stamp = round(wall_ms()) if producer_ts_ms is None else producer_ts_ms
    return PerceptionMessage(seq, stamp, frame_ts_ms, tuple(vehicles), horizon)


class ObuReceiver:
    """Decodes incoming datagrams and stamps phase 2 on first receipt of each seq."""

    def __init__(self, clock: Callable[[], float] = wall_ms, skew_tolerance_ms: float = 1.0):
        self.clock = clock
        self.skew_tolerance_ms = skew_tolerance_ms
        self.phase2: dict[int, float] = {}
        self.errors = 0
        self.duplicates = 0
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)

    def handle(self, payload: bytes) -> None:
        try:
            msg = decode(payload)
        except CodecError:
            with self._lock:
                self.errors += 1
            return
        done = self.clock()
        dt = done - msg.producer_ts_ms
        if dt < -self.skew_tolerance_ms:
            raise ClockSkewDetected(f"message {msg.seq} decoded {-dt:.2f} ms before it was produced")
        with self._cv:
            if msg.seq in self.phase2:
                self.duplicates += 1
            else:
                self.phase2[msg.seq] = dt
            self._cv.notify_all()

    def wait_for(self, n: int, timeout_s: float) -> bool:
        deadline = time.monotonic() + timeout_s
        with self._cv:
            while len(self.phase2) < n:
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cv.wait(left)
        return True


class UdpListener:
    def __init__(self, receiver: ObuReceiver, host: str = "127.0.0.1", port: int = 0):
        self.receiver = receiver
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.sock.settimeout(0.05)
        self.addr = self.sock.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="obu-listener", daemon=True)
        self._thread.start()

    def _run(self):
        while not self._stop.is_set():
            try:
                data, _ = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            self.receiver.handle(data)

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)
        self.sock.close()


@dataclass
class LatencyReport:
    records: list = field(default_factory=list)
    lost: int = 0

    @property
    def phase1(self) -> dict:
        return summarize([r.phase1_ms for r in self.records])

    @property
    def phase2(self) -> dict:
        return summarize([r.phase2_ms for r in self.records])

    def to_json(self) -> dict:
        return {"phase1_ms": self.phase1, "phase2_ms": self.phase2, "lost": self.lost}


def _passthrough(frame):
    return frame


def run_latency(frames: Sequence, pipeline: Callable = _passthrough, to_message: Callable | None = None,
                transport: str = "loopback", inject_delay_ms: float = 0.0, interval_ms: float = 5.0,
                timeout_s: float = 5.0) -> LatencyReport:
    """Run frames through ``pipeline``, send each result, and time both phases.

    ``to_message(result, seq)`` builds the PerceptionMessage; the producer
    timestamp is overwritten with the wall clock immediately before encode.
    """
    receiver = ObuReceiver()
    listener = None
    if transport == "loopback":
        tx = CallbackTransport(receiver.handle)
    elif transport == "udp":
        listener = UdpListener(receiver)
        tx = UdpTransport(*listener.addr)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    if inject_delay_ms > 0:
        tx = DelayTransport(tx, inject_delay_ms)
    to_message = to_message or (lambda result, seq: PerceptionMessage(seq, 0, 0))
    phase1 = {}
    try:
        for seq, frame in enumerate(frames):
            t0 = time.perf_counter()
            result = pipeline(frame)
            phase1[seq] = (time.perf_counter() - t0) * 1000.0
            msg = to_message(result, seq)
            stamped = PerceptionMessage(msg.seq, round(wall_ms()), msg.frame_ts_ms, msg.vehicles, msg.horizon)
            tx.send(encode(stamped))
            if interval_ms > 0:
                time.sleep(interval_ms / 1000.0)
        receiver.wait_for(len(phase1), timeout_s)
    finally:
        tx.close()
        if listener is not None:
            listener.close()
    report = LatencyReport()
    for seq, p1 in phase1.items():
        if seq in receiver.phase2:
            report.records.append(LatencyRecord(seq, p1, receiver.phase2[seq]))
        else:
            report.lost += 1
    return report
