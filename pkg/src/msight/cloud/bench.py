"""Ingest-latency A/B run: all subscribers healthy vs one subscriber dead.

A dead subscriber is one whose consumer has stopped draining; its queue
fills and then only drops. Phases alternate so slow drift in machine load
hits both sides equally. The victim's consumer thread keeps its wake-up
schedule in both phases and only stops draining when dead, so the two sides
differ in queue state alone and not in how many threads share the core.
"""
from __future__ import annotations

import statistics
import threading
import time

import numpy as np

from .gateway import Gateway, IngestClient
from .pubsub import Dispatcher, Subscription
from .storage import StorageSink

_TOKEN = "bench"


class _Consumer:
    """Drains its subscription in batches every ``poll_s``, like a microservice pulling work."""

    def __init__(self, sub: Subscription, poll_s: float = 0.005):
        self.sub = sub
        self.seen = 0
        self.poll_s = poll_s
        self.draining = True
        self._stop = threading.Event()
        self._t = threading.Thread(target=self._run, daemon=True)
        self._t.start()

    def _run(self):
        while not self._stop.wait(self.poll_s):
            if self.draining:
                self.seen += len(self.sub.drain())

    def kill(self):
        self._stop.set()
        self._t.join(timeout=5)


def _latencies(c: IngestClient, n: int, body: bytes, topic: str) -> np.ndarray:
    lat = np.empty(n)
    for i in range(n):
        t0 = time.perf_counter()
        status, _ = c.post(topic, body)
        lat[i] = (time.perf_counter() - t0) * 1000.0
        if status != 200:
            raise RuntimeError(f"ingest returned {status}")
    return lat


def decoupling_ab(root, blocks: int = 320, n: int = 300, body_size: int = 256, capacity: int = 64,
                  topic: str = "perception.tracks") -> dict:
    """Ingest p99 (ms) with every consumer alive vs with one consumer dead.

    Short blocks alternate in ABBA order; each block yields its own p99 and
    each side reports the median over its blocks, which keeps a burst of host
    noise inside one block from deciding the comparison. With 160 blocks per
    side an A/A run (both sides healthy) agrees to about 2 % on one core.
    """
    body = b"x" * body_size
    d = Dispatcher()
    sink = StorageSink(root)
    healthy = d.subscribe("perception.", 1 << 16)  # never full: only the victim may drop
    victim = d.subscribe(topic, capacity)
    keep = _Consumer(healthy)
    cons = _Consumer(victim)
    alive_p99, dead_p99 = [], []
    dropped_while_dead = 0
    with Gateway(d, sink, _TOKEN) as gw:
        c = IngestClient(gw.url, _TOKEN)
        _latencies(c, n, body, topic)  # warm up
        for b in range(blocks):
            cons.draining = b % 4 in (0, 3)
            if cons.draining:
                alive_p99.append(np.percentile(_latencies(c, n, body, topic), 99))
            else:
                before = victim.dropped
                dead_p99.append(np.percentile(_latencies(c, n, body, topic), 99))
                dropped_while_dead += victim.dropped - before
            victim.drain()
        c.close()
    cons.kill()
    keep.kill()
    sink.close()
    return {"baseline_p99_ms": float(statistics.median(alive_p99)), "killed_p99_ms": float(statistics.median(dead_p99)),
            "victim_dropped": dropped_while_dead, "healthy_dropped": healthy.dropped, "blocks": blocks,
            "requests": (blocks + 1) * n}
