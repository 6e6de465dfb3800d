"""RSU-side periodic broadcaster and datagram transports.

The perception loop only ever swaps the latest encoded frame into a slot;
a separate worker re-broadcasts whatever is in the slot every period. A dead
or slow receiver therefore cannot stall perception.
"""
from __future__ import annotations

import heapq
import logging
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable

log = logging.getLogger(__name__)


class EndpointUnavailable(OSError):
    pass


def now_ms() -> float:
    return time.monotonic() * 1000.0


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    return host, int(port)


class UdpTransport:
    def __init__(self, host: str, port: int):
        self.addr = (host, port)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def send(self, payload: bytes) -> None:
        try:
            self.sock.sendto(payload, self.addr)
        except OSError as e:
            raise EndpointUnavailable(str(e)) from e

    def close(self):
        self.sock.close()


class CallbackTransport:
    """In-process delivery, for tests and the loopback harness."""

    def __init__(self, deliver: Callable[[bytes], None]):
        self.deliver = deliver

    def send(self, payload: bytes) -> None:
        self.deliver(payload)

    def close(self):
        pass


class DelayTransport:
    """Delivers each payload through ``inner`` after a fixed delay."""

    def __init__(self, inner, delay_ms: float):
        self.inner = inner
        self.delay_ms = float(delay_ms)
        self._heap: list = []
        self._n = 0
        self._cv = threading.Condition()
        self._closed = False
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def send(self, payload: bytes) -> None:
        with self._cv:
            self._n += 1
            heapq.heappush(self._heap, (time.perf_counter() + self.delay_ms / 1000.0, self._n, payload))
            self._cv.notify()

    def _run(self):
        while True:
            with self._cv:
                while not self._heap and not self._closed:
                    self._cv.wait()
                if self._closed and not self._heap:
                    return
                due, _, payload = self._heap[0]
                wait = due - time.perf_counter()
                if wait > 0:
                    self._cv.wait(wait)
                    continue
                heapq.heappop(self._heap)
            try:
                self.inner.send(payload)
            except OSError:
                log.warning("delayed delivery failed", exc_info=True)

    def close(self):
        with self._cv:
            self._closed = True
            self._cv.notify()
        self._worker.join(timeout=5)
        self.inner.close()


@dataclass
class ForwarderStats:
    published: int = 0
    sent: int = 0
    stale_suppressed: int = 0
    send_failures: int = 0
    skipped_backoff: int = 0


class RsuForwarder:
    """Broadcast the most recent frame every ``period_ms``.

    ``tick(now)`` performs one period's work and is what the worker thread
    calls; tests drive it directly with a synthetic clock.
    """

    def __init__(self, transport, period_ms: float = 100.0, stale_ms: float = 1000.0,
                 max_backoff_ms: float = 2000.0, clock: Callable[[], float] = now_ms):
        self.transport = transport
        self.period_ms = period_ms
        self.stale_ms = stale_ms
        self.max_backoff_ms = max_backoff_ms
        self.clock = clock
        self.stats = ForwarderStats()
        self._slot: tuple[bytes, float] | None = None
        self._lock = threading.Lock()
        self._backoff_ms = 0.0
        self._retry_at = -float("inf")
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def publish(self, payload: bytes, at_ms: float | None = None) -> None:
        """Called by the perception loop; never blocks on the network."""
        at = self.clock() if at_ms is None else at_ms
        with self._lock:
            self._slot = (payload, at)
            self.stats.published += 1

    def tick(self, now: float | None = None) -> bool:
        now = self.clock() if now is None else now
        with self._lock:
            slot = self._slot
        if slot is None:
            return False
        payload, at = slot
        if now - at > self.stale_ms:
            self.stats.stale_suppressed += 1
            return False
        if now < self._retry_at:
            self.stats.skipped_backoff += 1
            return False
        try:
            self.transport.send(payload)
        except OSError:
            self.stats.send_failures += 1
            self._backoff_ms = min(max(self._backoff_ms * 2, self.period_ms), self.max_backoff_ms)
            self._retry_at = now + self._backoff_ms
            return False
        self._backoff_ms = 0.0
        self._retry_at = -float("inf")
        self.stats.sent += 1
        return True

    def _run(self):
        next_at = self.clock()
        while not self._stop.is_set():
            self.tick()
            next_at += self.period_ms
            delay = next_at - self.clock()
            if delay < 0:  # fell behind; skip missed periods rather than bursting
                next_at = self.clock()
                delay = 0
            self._stop.wait(delay / 1000.0)

    def start(self) -> "RsuForwarder":
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="rsu-forwarder", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
