"""Block target gateway: exports images as network block endpoints.

The gateway is a pure pass-through to the image store plus three concerns
of its own: per-tenant/initiator authorization, single-writer enforcement,
and cumulative traffic accounting. Counters record granted request payload
lengths exactly; denied requests change nothing.

Transport is an in-process loopback carrying the binary wire format below,
so the simulator's "network" boundary is bit-exact without real block
protocol framing.

Wire format, all integers big-endian:
  request:  u32 record length | u8 op (0=read, 1=write) | u16 name length |
            name bytes | u64 offset | u32 read length (reads) or payload
            bytes to end of record (writes)
  response: u32 record length | u8 status (0=ok) | payload (read data, or
            an error code string)
"""

import struct
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

from .errors import (
    AccessDenied,
    AlreadyExported,
    MetalforgeError,
    NotFound,
    OutOfBounds,
    ReadOnlyTarget,
    TargetGone,
    error_by_code,
)
from .image_store import ImageStore
from .isolation import IsolationService
from .journal import Journal
from .sync import RWLock

OP_READ = 0
OP_WRITE = 1
STATUS_OK = 0

_STATUS_OF_CODE = {
    "TargetGone": 1,
    "AccessDenied": 2,
    "OutOfBounds": 3,
    "ReadOnlyTarget": 4,
    "NotFound": 5,
    "InternalError": 255,
}
_CODE_OF_STATUS = {v: k for k, v in _STATUS_OF_CODE.items()}

_LEN = struct.Struct(">I")
_REQ_HEAD = struct.Struct(">BH")
_OFFSET = struct.Struct(">Q")
_READ_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class GatewayConfig:
    """Naming and addressing for exported targets."""

    authority: str = "org.metalforge"
    naming_date: str = "2025-01"
    address: str = "192.0.2.10"


class TargetMode(Enum):
    READ_WRITE = "read_write"
    READ_ONLY = "read_only"


@dataclass
class TrafficCounters:
    bytes_read: int = 0
    bytes_written: int = 0
    read_ops: int = 0
    write_ops: int = 0

    def to_public(self) -> dict:
        return dict(vars(self))

    def copy(self) -> "TrafficCounters":
        return TrafficCounters(**vars(self))


@dataclass
class TargetRecord:
    name: str
    image: str
    tenant: str
    mode: TargetMode
    allowed_initiators: set
    created_at: float
    counters: TrafficCounters = field(default_factory=TrafficCounters)

    def to_public(self) -> dict:
        return {
            "name": self.name,
            "image": self.image,
            "tenant": self.tenant,
            "mode": self.mode.value,
            "allowed_initiators": sorted(self.allowed_initiators),
            "counters": self.counters.to_public(),
        }


def parse_target_name(name: str) -> tuple[str, str]:
    """Split an exported target name back into (tenant, image id)."""
    head, _, tail = name.partition(":")
    if not head.startswith("iqn.") or not tail:
        raise ValueError(f"malformed target name {name!r}")
    parts = tail.split(":")
    if len(parts) < 2:
        raise ValueError(f"malformed target name {name!r}")
    return parts[0], parts[1]


class TargetGateway:
    """Exports images as authorized, accounted block endpoints."""

    def __init__(self, store: ImageStore, isolation: IsolationService,
                 journal: Journal, config: GatewayConfig | None = None):
        self.store = store
        self.isolation = isolation
        self.journal = journal
        self.config = config or GatewayConfig()
        self._targets: dict[str, TargetRecord] = {}
        self._io_locks: dict[str, RWLock] = {}
        self._counter_locks: dict[str, threading.Lock] = {}
        self._meta = threading.RLock()

    # -- journal replay ----------------------------------------------------

    def apply(self, record: dict) -> None:
        op = record["type"]
        if op == "target.create":
            rec = TargetRecord(
                name=record["name"],
                image=record["image"],
                tenant=record["tenant"],
                mode=TargetMode(record["mode"]),
                allowed_initiators=set(record["allowed_initiators"]),
                created_at=record["created_at"],
            )
            self._targets[rec.name] = rec
            self.store.acquire_use(rec.image, rec.name)
        elif op == "target.delete":
            rec = self._targets.pop(record["name"])
            self.store.release_use(rec.image, rec.name)
            self._io_locks.pop(rec.name, None)
            self._counter_locks.pop(rec.name, None)
        elif op == "target.rebind":
            rec = self._targets[record["name"]]
            self.store.release_use(rec.image, rec.name)
            rec.image = record["image"]
            self.store.acquire_use(rec.image, rec.name)
        else:
            raise ValueError(f"unknown target record type {op}")

    def _commit(self, record: dict) -> None:
        self.journal.append(record)
        self.apply(record)

    # -- target lifecycle ----------------------------------------------------

    def create_target(self, tenant: str, image_id: str, mode: TargetMode = TargetMode.READ_WRITE,
                      allowed_initiators=()) -> str:
        """Export an image. One read-write target per image; any number of
        read-only ones."""
        self.store.check_readable(tenant, image_id)
        with self._meta:
            if mode is TargetMode.READ_WRITE:
                for rec in self._targets.values():
                    if rec.image == image_id and rec.mode is TargetMode.READ_WRITE:
                        raise AlreadyExported(
                            f"image {image_id} already exported read-write as {rec.name}")
            name = self._pick_name(tenant, image_id, mode)
            self._commit({
                "type": "target.create",
                "name": name,
                "image": image_id,
                "tenant": tenant,
                "mode": mode.value,
                "allowed_initiators": sorted(allowed_initiators),
                "created_at": time.time(),
            })
            return name

    def delete_target(self, tenant: str, name: str) -> None:
        with self._meta:
            rec = self._targets.get(name)
            if rec is None:
                raise NotFound(f"target {name} does not exist")
            if rec.tenant != tenant:
                raise AccessDenied(f"target {name} is not owned by {tenant}")
            self._commit({"type": "target.delete", "name": name})

    def rebind_target(self, tenant: str, name: str, image_id: str) -> None:
        """Swap the backing image under a live target, preserving its name
        and counters. Used by snapshot, which must keep the endpoint stable
        while the node moves onto a fresh clone."""
        self.store.check_readable(tenant, image_id)
        with self._meta:
            rec = self._targets.get(name)
            if rec is None:
                raise NotFound(f"target {name} does not exist")
            if rec.tenant != tenant:
                raise AccessDenied(f"target {name} is not owned by {tenant}")
            self._commit({"type": "target.rebind", "name": name, "image": image_id})

    def exists(self, name: str) -> bool:
        with self._meta:
            return name in self._targets

    def get(self, name: str) -> TargetRecord:
        with self._meta:
            rec = self._targets.get(name)
            if rec is None:
                raise NotFound(f"target {name} does not exist")
            return rec

    def targets(self) -> list[TargetRecord]:
        with self._meta:
            return sorted(self._targets.values(), key=lambda r: r.name)

    def get_traffic(self, name: str) -> TrafficCounters:
        rec = self.get(name)
        with self._counter_lock(name):
            return rec.counters.copy()

    @contextmanager
    def fence(self, name: str):
        """Hold off all I/O on one target; used around backing-image swaps."""
        lock = self._io_lock(name)
        with lock.write_locked():
            yield

    # -- data path -----------------------------------------------------------

    def target_read(self, initiator: str, name: str, offset: int, length: int) -> bytes:
        rec = self._live(name)
        self._authorize(initiator, rec)
        with self._io_lock(name).read_locked():
            rec = self._live(name)
            data = self.store.read_range(rec.image, offset, length)
        with self._counter_lock(name):
            rec.counters.bytes_read += length
            rec.counters.read_ops += 1
        return data

    def target_write(self, initiator: str, name: str, offset: int, data: bytes) -> None:
        rec = self._live(name)
        self._authorize(initiator, rec)
        if rec.mode is not TargetMode.READ_WRITE:
            raise ReadOnlyTarget(f"target {name} is read-only")
        with self._io_lock(name).write_locked():
            rec = self._live(name)
            self.store.write_range(rec.image, offset, data)
        with self._counter_lock(name):
            rec.counters.bytes_written += len(data)
            rec.counters.write_ops += 1

    def session(self, initiator: str) -> "GatewaySession":
        return GatewaySession(self, initiator)

    # -- internals -------------------------------------------------------------

    def _live(self, name: str) -> TargetRecord:
        with self._meta:
            rec = self._targets.get(name)
            if rec is None:
                raise TargetGone(f"target {name} is gone")
            return rec

    def _authorize(self, initiator: str, rec: TargetRecord) -> None:
        if initiator not in rec.allowed_initiators:
            raise AccessDenied(f"initiator {initiator} is not allowed on {rec.name}")
        if self.isolation.network_of(initiator) != rec.tenant:
            raise AccessDenied(
                f"initiator {initiator} is not attached to {rec.tenant}'s network")

    def _pick_name(self, tenant: str, image_id: str, mode: TargetMode) -> str:
        base = f"iqn.{self.config.naming_date}.{self.config.authority}:{tenant}:{image_id}"
        if mode is TargetMode.READ_WRITE:
            name = base
            if name in self._targets:
                raise AlreadyExported(f"target name {name} is live")
            return name
        serial = 1
        while f"{base}:ro{serial}" in self._targets:
            serial += 1
        return f"{base}:ro{serial}"

    def _io_lock(self, name: str) -> RWLock:
        with self._meta:
            lock = self._io_locks.get(name)
            if lock is None:
                lock = self._io_locks[name] = RWLock()
            return lock

    def _counter_lock(self, name: str) -> threading.Lock:
        with self._meta:
            lock = self._counter_locks.get(name)
            if lock is None:
                lock = self._counter_locks[name] = threading.Lock()
            return lock


# -- wire codec -----------------------------------------------------------


def encode_read_request(name: str, offset: int, length: int) -> bytes:
    raw = name.encode("utf-8")
    body = _REQ_HEAD.pack(OP_READ, len(raw)) + raw + _OFFSET.pack(offset) + _READ_LEN.pack(length)
    return _LEN.pack(len(body)) + body


def encode_write_request(name: str, offset: int, payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    body = _REQ_HEAD.pack(OP_WRITE, len(raw)) + raw + _OFFSET.pack(offset) + payload
    return _LEN.pack(len(body)) + body


def decode_request(frame: bytes) -> dict:
    if len(frame) < _LEN.size:
        raise ValueError("short frame")
    (length,) = _LEN.unpack_from(frame, 0)
    body = frame[_LEN.size : _LEN.size + length]
    if len(body) != length:
        raise ValueError("truncated frame")
    op, name_len = _REQ_HEAD.unpack_from(body, 0)
    cursor = _REQ_HEAD.size
    name = body[cursor : cursor + name_len].decode("utf-8")
    cursor += name_len
    (offset,) = _OFFSET.unpack_from(body, cursor)
    cursor += _OFFSET.size
    if op == OP_READ:
        (read_len,) = _READ_LEN.unpack_from(body, cursor)
        return {"op": op, "target": name, "offset": offset, "length": read_len}
    if op == OP_WRITE:
        return {"op": op, "target": name, "offset": offset, "payload": body[cursor:]}
    raise ValueError(f"unknown op {op}")


def encode_response(status: int, payload: bytes = b"") -> bytes:
    return _LEN.pack(1 + len(payload)) + bytes([status]) + payload


def decode_response(frame: bytes) -> tuple[int, bytes]:
    (length,) = _LEN.unpack_from(frame, 0)
    body = frame[_LEN.size : _LEN.size + length]
    if len(body) != length or not body:
        raise ValueError("truncated frame")
    return body[0], body[1:]


class GatewaySession:
    """Loopback transport endpoint bound to one initiator identity.

    The identity plays the role a transport login would; authorization is
    still re-checked on every request so revocation is immediate.
    """

    def __init__(self, gateway: TargetGateway, initiator: str):
        self.gateway = gateway
        self.initiator = initiator

    def submit(self, frame: bytes) -> bytes:
        """Serve one encoded request record and encode the response."""
        try:
            req = decode_request(frame)
            if req["op"] == OP_READ:
                data = self.gateway.target_read(
                    self.initiator, req["target"], req["offset"], req["length"])
                return encode_response(STATUS_OK, data)
            self.gateway.target_write(
                self.initiator, req["target"], req["offset"], req["payload"])
            return encode_response(STATUS_OK)
        except MetalforgeError as exc:
            status = _STATUS_OF_CODE.get(exc.code, _STATUS_OF_CODE["InternalError"])
            return encode_response(status, exc.code.encode("utf-8"))

    def read(self, name: str, offset: int, length: int) -> bytes:
        status, payload = decode_response(self.submit(encode_read_request(name, offset, length)))
        if status != STATUS_OK:
            raise error_by_code(_CODE_OF_STATUS.get(status, "InternalError"))(
                f"read {name}@{offset}+{length} failed")
        return payload

    def write(self, name: str, offset: int, payload: bytes) -> None:
        status, detail = decode_response(self.submit(encode_write_request(name, offset, payload)))
        if status != STATUS_OK:
            raise error_by_code(_CODE_OF_STATUS.get(status, "InternalError"))(
                f"write {name}@{offset}+{len(payload)} failed")
