"""Append-only metadata journal with CRC-checked, length-prefixed records.

All durable service state is committed through one journal and rebuilt by
replaying it at startup. Record framing: 4-byte big-endian payload length,
the payload (canonical JSON), then a 4-byte big-endian CRC32 of the payload.
A torn tail (short frame or CRC mismatch) is discarded on open; anything
before it is the committed prefix.
"""

import json
import logging
import os
import struct
import threading
import zlib
from pathlib import Path
from typing import Any, Callable, Iterator

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
_CRC = struct.Struct(">I")


def encode_record(record: dict[str, Any]) -> bytes:
    payload = json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(payload)) + payload + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)


class SimulatedCrash(Exception):
    """Raised by test hooks to model the process dying between commits."""


class Journal:
    """Single-writer append log; appends are atomic commit points."""

    def __init__(self, path: Path | str, sync: bool = False):
        self.path = Path(path)
        self.sync = sync
        self._lock = threading.Lock()
        self._fh = None
        self._commits = 0
        # Called after a record is durably appended; tests use it to crash
        # the stack at exact cut points.
        self.commit_hook: Callable[[int, dict], None] | None = None

    @property
    def commits(self) -> int:
        return self._commits

    def load(self) -> list[dict]:
        """Read the committed prefix, truncate any torn tail, open for append."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        records: list[dict] = []
        valid_end = 0
        if self.path.exists():
            data = self.path.read_bytes()
            offset = 0
            while True:
                rec, nxt = _decode_at(data, offset)
                if rec is None:
                    break
                records.append(rec)
                offset = nxt
            valid_end = offset
            if valid_end != len(data):
                log.warning(
                    "journal %s: dropping %d bytes of torn tail",
                    self.path, len(data) - valid_end,
                )
        self._fh = open(self.path, "ab")
        if valid_end != self._fh.tell():
            self._fh.truncate(valid_end)
            self._fh.seek(0, os.SEEK_END)
        self._commits = len(records)
        return records

    def append(self, record: dict[str, Any]) -> int:
        """Commit one record; returns its 1-based sequence number."""
        if self._fh is None:
            raise RuntimeError("journal not loaded")
        frame = encode_record(record)
        with self._lock:
            self._fh.write(frame)
            self._fh.flush()
            if self.sync:
                os.fsync(self._fh.fileno())
            self._commits += 1
            seq = self._commits
        if self.commit_hook is not None:
            self.commit_hook(seq, record)
        return seq

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    @staticmethod
    def read_records(path: Path | str) -> Iterator[dict]:
        """Passive reader for inspection and tests; tolerates a torn tail."""
        data = Path(path).read_bytes()
        offset = 0
        while True:
            rec, offset = _decode_at(data, offset)
            if rec is None:
                return
            yield rec


def _decode_at(data: bytes, offset: int) -> tuple[dict | None, int]:
    if offset + _LEN.size > len(data):
        return None, offset
    (length,) = _LEN.unpack_from(data, offset)
    end = offset + _LEN.size + length + _CRC.size
    if end > len(data):
        return None, offset
    payload = data[offset + _LEN.size : offset + _LEN.size + length]
    (crc,) = _CRC.unpack_from(data, offset + _LEN.size + length)
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        return None, offset
    try:
        record = json.loads(payload.decode("utf-8"))
    except ValueError:
        return None, offset
    return record, end
