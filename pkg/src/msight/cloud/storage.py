"""Append-only storage sink, one directory per topic, one file per UTC hour.

Record framing::

    u32 length | payload (length bytes) | u32 CRC-32 of payload

and the payload of each record is::

    u64 received_ts_ms | u16 source length | source (utf-8) | envelope bytes

All integers little-endian. A record is only ever appended whole and flushed
to the OS before the append returns, so an acknowledged record survives a
process restart. Every ``fsync_every`` records per file a background flusher
fsyncs a duplicate of the file descriptor, so disk latency stays off the
ingest path.
"""
from __future__ import annotations

import datetime as dt
import errno
import logging
import os
import queue
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .pubsub import CloudEnvelope, check_topic

log = logging.getLogger(__name__)

_LEN = struct.Struct("<I")
_META = struct.Struct("<QH")


class StorageUnavailable(OSError):
    pass


class DiskFull(StorageUnavailable):
    pass


def hour_key(ts_ms: int) -> str:
    return dt.datetime.fromtimestamp(ts_ms / 1000.0, dt.timezone.utc).strftime("%Y%m%d%H")


def pack_record(env: CloudEnvelope) -> bytes:
    src = env.source.encode()
    payload = _META.pack(env.received_ts_ms, len(src)) + src + env.payload
    return _LEN.pack(len(payload)) + payload + _LEN.pack(zlib.crc32(payload))


def _unpack_payload(topic: str, payload: bytes) -> CloudEnvelope:
    ts, n = _META.unpack_from(payload)
    src = payload[_META.size:_META.size + n].decode()
    return CloudEnvelope(topic, ts, payload[_META.size + n:], src)


class _File:
    def __init__(self, path: Path):
        self.path = path
        self.fh = open(path, "ab")
        self.pending = 0


class StorageSink:
    def __init__(self, root, fsync_every: int = 64, quota_bytes: int | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync_every = max(1, fsync_every)
        self.quota_bytes = quota_bytes  # simulated disk size; None means unlimited
        self.bytes_written = 0
        self.records = 0
        self.fsyncs = 0
        self._files: dict[str, _File] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self._sync_q: queue.SimpleQueue = queue.SimpleQueue()
        self._flusher = threading.Thread(target=self._flush_loop, name="storage-fsync", daemon=True)
        self._flusher.start()

    def _flush_loop(self):
        while True:
            fd = self._sync_q.get()
            if fd is None:
                return
            try:
                os.fsync(fd)
                self.fsyncs += 1
            except OSError:
                log.warning("background fsync failed", exc_info=True)
            finally:
                os.close(fd)

    def _lock(self, topic):
        with self._guard:
            return self._locks.setdefault(topic, threading.Lock())

    def _file(self, topic: str, hour: str) -> _File:
        f = self._files.get(topic)
        if f is not None and f.path.stem == hour:
            return f
        if f is not None:
            self._close(f)
        d = self.root / topic
        d.mkdir(parents=True, exist_ok=True)
        f = self._files[topic] = _File(d / f"{hour}.log")
        return f

    @staticmethod
    def _close(f: _File):
        f.fh.flush()
        os.fsync(f.fh.fileno())
        f.fh.close()

    def append(self, env: CloudEnvelope) -> Path:
        """Write one envelope; returns the file it went to. Raises DiskFull or StorageUnavailable."""
        rec = pack_record(env)
        with self._lock(env.topic):
            with self._guard:
                if self.quota_bytes is not None and self.bytes_written + len(rec) > self.quota_bytes:
                    raise DiskFull("storage quota exhausted")
            try:
                f = self._file(env.topic, hour_key(env.received_ts_ms))
                f.fh.write(rec)
                f.fh.flush()
                f.pending += 1
                if f.pending >= self.fsync_every:
                    self._sync_q.put(os.dup(f.fh.fileno()))
                    f.pending = 0
            except OSError as e:
                if e.errno == errno.ENOSPC:
                    raise DiskFull(str(e)) from e
                raise StorageUnavailable(str(e)) from e
            with self._guard:
                self.bytes_written += len(rec)
                self.records += 1
            return f.path

    def close(self) -> None:
        with self._guard:
            files, self._files = list(self._files.values()), {}
        for f in files:
            self._close(f)
        self._sync_q.put(None)
        self._flusher.join(timeout=10)


@dataclass
class ReplayResult:
    envelopes: list = field(default_factory=list)
    truncated_tail: int = 0  # 1 if the file ends inside a record
    corrupt: int = 0  # complete records whose CRC failed (skipped)


def replay_file(path, topic: str | None = None) -> ReplayResult:
    path = Path(path)
    topic = check_topic(topic or path.parent.name)
    data = path.read_bytes()
    out = ReplayResult()
    off = 0
    while off < len(data):
        if off + _LEN.size > len(data):
            out.truncated_tail = 1
            break
        (n,) = _LEN.unpack_from(data, off)
        end = off + _LEN.size + n + _LEN.size
        if end > len(data):
            out.truncated_tail = 1
            break
        payload = data[off + _LEN.size:off + _LEN.size + n]
        (crc,) = _LEN.unpack_from(data, end - _LEN.size)
        if zlib.crc32(payload) != crc or n < _META.size:
            out.corrupt += 1
        else:
            out.envelopes.append(_unpack_payload(topic, payload))
        off = end
    return out


def replay_topic(root, topic: str) -> ReplayResult:
    """All hourly files of a topic, oldest first."""
    out = ReplayResult()
    d = Path(root) / check_topic(topic)
    for p in sorted(d.glob("*.log")):
        r = replay_file(p, topic)
        out.envelopes += r.envelopes
        out.truncated_tail += r.truncated_tail
        out.corrupt += r.corrupt
    return out
