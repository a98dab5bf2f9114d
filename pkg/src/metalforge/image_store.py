"""Tenant-aware copy-on-write block image repository.

Images form parent chains: a linked clone materializes only the blocks
written to it and defers everything else to its ancestors; a block absent
from the whole chain reads as zeros. Metadata mutations are committed
through the shared append-only journal; block payloads live in one sparse
container file per image layer under ``<root>/blocks/``.

Writability rule: an image accepts writes while it is a golden or clone
with no children. Growing a child freezes the parent, which is what keeps
clone read-through stable.
"""

import io
import logging
import os
import struct
import threading
import time
import zlib
from contextlib import ExitStack
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import BinaryIO

from .errors import (
    AccessDenied,
    ChainTooDeep,
    DuplicateName,
    HasChildren,
    ImageInUse,
    ImmutableImage,
    InvalidSize,
    NotAClone,
    NotFound,
    OutOfBounds,
    StorageFailure,
)
from .journal import Journal
from .sync import RWLock

log = logging.getLogger(__name__)

MIN_BLOCK_SIZE = 4096
DEFAULT_BLOCK_SIZE = 4 * 1024 * 1024


@dataclass(frozen=True)
class StoreConfig:
    """Static store parameters; validated on construction."""

    block_size: int = DEFAULT_BLOCK_SIZE
    max_chain_depth: int = 8

    def __post_init__(self):
        if self.block_size < MIN_BLOCK_SIZE or self.block_size & (self.block_size - 1):
            raise ValueError(f"block_size must be a power of two >= {MIN_BLOCK_SIZE}")
        if self.max_chain_depth < 2:
            raise ValueError("max_chain_depth must be >= 2")


class ImageKind(Enum):
    GOLDEN = "golden"
    CLONE = "clone"
    SNAPSHOT = "snapshot"


@dataclass
class ImageRecord:
    id: str
    name: str
    tenant: str
    kind: ImageKind
    parent: str | None
    virtual_size: int
    block_size: int
    created_at: float
    child_count: int = 0
    shared_with: set = field(default_factory=set)

    def to_public(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "tenant": self.tenant,
            "kind": self.kind.value,
            "parent": self.parent,
            "virtual_size": self.virtual_size,
            "block_size": self.block_size,
            "child_count": self.child_count,
            "shared_with": sorted(self.shared_with),
        }


@dataclass
class CopyStats:
    """Point-in-time snapshot of data-movement instrumentation.

    ``blocks_copied`` counts whole blocks duplicated by flatten/deep-copy;
    clone creation must never move any.
    """

    blocks_copied: int = 0
    blocks_ingested: int = 0
    blocks_materialized: int = 0
    clone_ops: int = 0
    flatten_ops: int = 0
    deep_copy_ops: int = 0


_BLOCK_HEADER = struct.Struct(">QI")  # block index, crc32 of payload


class BlockFile:
    """Sparse single-layer block container.

    Record layout: 8-byte big-endian block index, 4-byte CRC32 of the
    payload, then exactly ``block_size`` payload bytes. Rewrites append a
    fresh record and the latest valid record for an index wins, so a torn
    final record never corrupts previously committed blocks; the scan on
    open drops it. No compaction; rewrite-heavy layers grow until deleted.

    I/O goes through a raw descriptor: appends are single O_APPEND writes
    and reads are positionless preads, so concurrent readers never race on
    a shared file offset and nothing sits in userspace buffers.
    """

    def __init__(self, path: Path, block_size: int):
        self.path = path
        self.block_size = block_size
        self._index: dict[int, int] = {}  # block index -> payload file offset
        self._fd: int | None = None
        self._end = 0

    def open(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)
        self._scan()

    def _scan(self) -> None:
        record = _BLOCK_HEADER.size + self.block_size
        offset = 0
        with open(self.path, "rb") as fh:
            while True:
                header = fh.read(_BLOCK_HEADER.size)
                if len(header) < _BLOCK_HEADER.size:
                    break
                index, crc = _BLOCK_HEADER.unpack(header)
                payload = fh.read(self.block_size)
                if len(payload) < self.block_size or zlib.crc32(payload) & 0xFFFFFFFF != crc:
                    break
                self._index[index] = offset + _BLOCK_HEADER.size
                offset += record
            fh.seek(0, io.SEEK_END)
            end = fh.tell()
        if end != offset:
            log.warning("block file %s: dropping %d torn bytes", self.path, end - offset)
            os.truncate(self._fd, offset)
        self._end = offset

    @property
    def indices(self):
        return self._index.keys()

    def read_block(self, index: int) -> bytes | None:
        pos = self._index.get(index)
        if pos is None:
            return None
        assert self._fd is not None
        return os.pread(self._fd, self.block_size, pos)

    def write_block(self, index: int, payload: bytes) -> None:
        if len(payload) != self.block_size:
            raise ValueError("payload must be exactly one block")
        assert self._fd is not None
        frame = _BLOCK_HEADER.pack(index, zlib.crc32(payload) & 0xFFFFFFFF) + payload
        view = memoryview(frame)
        while view:  # short writes are legal, if rare, on regular files
            view = view[os.write(self._fd, view):]
        self._index[index] = self._end + _BLOCK_HEADER.size
        self._end += _BLOCK_HEADER.size + self.block_size

    def flush(self) -> None:
        pass  # appends hit the kernel directly

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def unlink(self) -> None:
        self.close()
        self.path.unlink(missing_ok=True)


class ImageStore:
    """Copy-on-write image repository backed by a shared journal.

    Thread safety: metadata mutations serialize through the journal commit
    path under ``_meta``; block I/O takes per-image reader/writer locks so
    reads run concurrently and operations on distinct images in parallel.
    Image locks are always acquired descendant-first, and never while
    holding ``_meta``.
    """

    def __init__(self, root: Path | str, journal: Journal, config: StoreConfig | None = None):
        self.root = Path(root)
        self.config = config or StoreConfig()
        self.journal = journal
        self._images: dict[str, ImageRecord] = {}
        self._layers: dict[str, BlockFile] = {}
        self._locks: dict[str, RWLock] = {}
        self._uses: dict[str, set[str]] = {}
        self._meta = threading.RLock()
        self._stats_lock = threading.Lock()
        self._stats = CopyStats()
        self._seq = 0

    @classmethod
    def open(cls, root: Path | str, config: StoreConfig | None = None) -> "ImageStore":
        """Stand-alone store over its own journal at ``<root>/journal.log``."""
        root = Path(root)
        journal = Journal(root / "journal.log")
        store = cls(root, journal, config)
        for record in journal.load():
            if record["type"].startswith("image."):
                store.apply(record)
        store.cleanup_orphan_layers()
        return store

    def close(self) -> None:
        with self._meta:
            for layer in self._layers.values():
                layer.close()
            self._layers.clear()

    # -- journal replay -------------------------------------------------

    def apply(self, record: dict) -> None:
        """Apply one journal record to in-memory state (replay or commit)."""
        op = record["type"]
        if op == "image.create":
            rec = ImageRecord(
                id=record["id"],
                name=record["name"],
                tenant=record["tenant"],
                kind=ImageKind(record["kind"]),
                parent=record.get("parent"),
                virtual_size=record["virtual_size"],
                block_size=record["block_size"],
                created_at=record["created_at"],
            )
            self._images[rec.id] = rec
            if rec.parent is not None:
                self._images[rec.parent].child_count += 1
            num = _id_number(rec.id)
            if num is not None:
                self._seq = max(self._seq, num)
        elif op == "image.delete":
            rec = self._images.pop(record["id"])
            if rec.parent is not None:
                self._images[rec.parent].child_count -= 1
            layer = self._layers.pop(rec.id, None)
            if layer is not None:
                layer.unlink()
            else:
                self._layer_path(rec.id).unlink(missing_ok=True)
            self._locks.pop(rec.id, None)
            self._uses.pop(rec.id, None)
        elif op == "image.flatten":
            rec = self._images[record["id"]]
            if rec.parent is not None:
                self._images[rec.parent].child_count -= 1
            rec.parent = None
            rec.kind = ImageKind.SNAPSHOT
        elif op == "image.rename":
            self._images[record["id"]].name = record["name"]
        elif op == "image.share":
            self._images[record["id"]].shared_with.add(record["grantee"])
        else:
            raise ValueError(f"unknown image record type {op}")

    def _commit(self, record: dict) -> None:
        self.journal.append(record)
        self.apply(record)

    # -- lookup helpers --------------------------------------------------

    def get(self, image_id: str) -> ImageRecord:
        with self._meta:
            rec = self._images.get(image_id)
            if rec is None:
                raise NotFound(f"image {image_id} does not exist")
            return rec

    def exists(self, image_id: str) -> bool:
        with self._meta:
            return image_id in self._images

    def records(self) -> list[ImageRecord]:
        with self._meta:
            return sorted(self._images.values(), key=lambda r: r.id)

    def check_readable(self, tenant: str, image_id: str) -> ImageRecord:
        rec = self.get(image_id)
        if rec.tenant != tenant and tenant not in rec.shared_with:
            raise AccessDenied(f"image {image_id} is not readable by {tenant}")
        return rec

    def _check_owned(self, tenant: str, image_id: str) -> ImageRecord:
        rec = self.get(image_id)
        if rec.tenant != tenant:
            raise AccessDenied(f"image {image_id} is not owned by {tenant}")
        return rec

    def find_by_name(self, tenant: str, name: str) -> ImageRecord | None:
        with self._meta:
            for rec in self._images.values():
                if rec.tenant == tenant and rec.name == name:
                    return rec
            return None

    def chain_of(self, image_id: str) -> list[ImageRecord]:
        """Resolution chain, the image itself first, root ancestor last."""
        with self._meta:
            chain = []
            cursor: str | None = image_id
            while cursor is not None:
                rec = self._images.get(cursor)
                if rec is None:
                    raise NotFound(f"image {cursor} does not exist")
                chain.append(rec)
                cursor = rec.parent
            return chain

    def stats(self) -> CopyStats:
        with self._stats_lock:
            return CopyStats(**vars(self._stats))

    def _bump(self, **deltas: int) -> None:
        with self._stats_lock:
            for key, delta in deltas.items():
                setattr(self._stats, key, getattr(self._stats, key) + delta)

    # -- in-use marks (held by block targets) ----------------------------

    def acquire_use(self, image_id: str, holder: str) -> None:
        with self._meta:
            if image_id not in self._images:
                raise NotFound(f"image {image_id} does not exist")
            self._uses.setdefault(image_id, set()).add(holder)

    def release_use(self, image_id: str, holder: str) -> None:
        with self._meta:
            holders = self._uses.get(image_id)
            if holders is not None:
                holders.discard(holder)
                if not holders:
                    del self._uses[image_id]

    def users_of(self, image_id: str) -> set:
        with self._meta:
            return set(self._uses.get(image_id, ()))

    # -- image lifecycle --------------------------------------------------

    def create_image(self, tenant: str, name: str, virtual_size: int) -> str:
        """Register an empty (all-zeros) golden image."""
        if virtual_size <= 0:
            raise InvalidSize(f"virtual_size must be positive, got {virtual_size}")
        with self._meta:
            self._require_name_free(tenant, name)
            image_id = self._next_id()
            self._commit(self._create_record(image_id, tenant, name, ImageKind.GOLDEN,
                                             None, virtual_size))
            return image_id

    def import_image(self, tenant: str, name: str, stream: BinaryIO | bytes) -> str:
        """Ingest a byte stream as a golden image, zero-padded to the block
        boundary. Zero blocks are not stored."""
        if isinstance(stream, (bytes, bytearray)):
            stream = io.BytesIO(stream)
        with self._meta:
            self._require_name_free(tenant, name)
            image_id = self._next_id()
        block_size = self.config.block_size
        layer = self._layer(image_id)
        total = 0
        ingested = 0
        index = 0
        try:
            while True:
                chunk = stream.read(block_size)
                if not chunk:
                    break
                total += len(chunk)
                if len(chunk) < block_size:
                    chunk = chunk + bytes(block_size - len(chunk))
                if chunk.count(0) != block_size:
                    layer.write_block(index, chunk)
                    ingested += 1
                index += 1
            layer.flush()
        except OSError as exc:
            raise StorageFailure(f"import failed: {exc}") from exc
        if total == 0:
            self._discard_layer(image_id)
            raise InvalidSize("cannot import an empty stream")
        virtual_size = index * block_size
        try:
            with self._meta:
                self._require_name_free(tenant, name)
                self._commit(self._create_record(image_id, tenant, name, ImageKind.GOLDEN,
                                                 None, virtual_size))
        except DuplicateName:
            self._discard_layer(image_id)
            raise
        self._bump(blocks_ingested=ingested)
        return image_id

    def linked_clone(self, tenant: str, parent_id: str, name: str) -> str:
        """Create a writable child layer; transfers zero data blocks."""
        self.check_readable(tenant, parent_id)
        parent_lock = self._lock_for(parent_id)
        with parent_lock.write_locked():
            with self._meta:
                parent = self._images.get(parent_id)
                if parent is None:
                    raise NotFound(f"image {parent_id} does not exist")
                depth = len(self.chain_of(parent_id)) + 1
                if depth > self.config.max_chain_depth:
                    raise ChainTooDeep(
                        f"chain depth {depth} exceeds limit {self.config.max_chain_depth}")
                self._require_name_free(tenant, name)
                image_id = self._next_id()
                record = self._create_record(image_id, tenant, name, ImageKind.CLONE,
                                             parent_id, parent.virtual_size)
                record["block_size"] = parent.block_size  # chains must align
                self._commit(record)
        self._bump(clone_ops=1)
        return image_id

    def delete_image(self, tenant: str, image_id: str) -> None:
        rec = self._check_owned(tenant, image_id)
        lock = self._lock_for(image_id)
        with lock.write_locked():
            with self._meta:
                rec = self._images.get(image_id)
                if rec is None:
                    raise NotFound(f"image {image_id} does not exist")
                if rec.child_count > 0:
                    raise HasChildren(f"image {image_id} has {rec.child_count} children")
                if self._uses.get(image_id):
                    holders = ", ".join(sorted(self._uses[image_id]))
                    raise ImageInUse(f"image {image_id} is exported by {holders}")
                self._commit({"type": "image.delete", "id": image_id})

    def rename_image(self, tenant: str, image_id: str, new_name: str) -> None:
        with self._meta:
            rec = self._check_owned(tenant, image_id)
            if rec.name == new_name:
                return
            self._require_name_free(tenant, new_name)
            self._commit({"type": "image.rename", "id": image_id, "name": new_name})

    def share_image(self, tenant: str, image_id: str, grantee: str) -> None:
        """Grant another tenant read and clone access."""
        with self._meta:
            self._check_owned(tenant, image_id)
            self._commit({"type": "image.share", "id": image_id, "grantee": grantee})

    def list_images(self, tenant: str) -> list[ImageRecord]:
        with self._meta:
            return sorted(
                (r for r in self._images.values()
                 if r.tenant == tenant or tenant in r.shared_with),
                key=lambda r: r.id,
            )

    # -- block I/O ---------------------------------------------------------

    def read_range(self, image_id: str, offset: int, length: int) -> bytes:
        """Layered read: this layer's block if present, else the nearest
        ancestor's, else zeros. No side effects."""
        chain = self.chain_of(image_id)
        self._check_bounds(chain[0], offset, length)
        if length == 0:
            return b""
        with ExitStack() as stack:
            for rec in chain:
                stack.enter_context(self._lock_for(rec.id).read_locked())
            if not self.exists(image_id):
                raise NotFound(f"image {image_id} does not exist")
            return self._read_resolved(chain, offset, length)

    def write_range(self, image_id: str, offset: int, data: bytes) -> None:
        """Copy-on-write write: affected blocks are materialized in this
        layer via read-modify-write from the parent chain."""
        rec = self.get(image_id)
        self._check_bounds(rec, offset, len(data))
        if not data:
            return
        lock = self._lock_for(image_id)
        with lock.write_locked():
            with self._meta:
                rec = self._images.get(image_id)
                if rec is None:
                    raise NotFound(f"image {image_id} does not exist")
                if rec.kind is ImageKind.SNAPSHOT or rec.child_count > 0:
                    raise ImmutableImage(f"image {image_id} is not writable")
                chain = self.chain_of(image_id)
            with ExitStack() as stack:
                for ancestor in chain[1:]:
                    stack.enter_context(self._lock_for(ancestor.id).read_locked())
                self._write_blocks(chain, offset, data)

    def flatten(self, image_id: str) -> int:
        """Materialize every ancestor-resolvable block locally, sever the
        parent link and become a snapshot. Returns blocks copied."""
        rec = self.get(image_id)
        if rec.kind is not ImageKind.CLONE:
            raise NotAClone(f"image {image_id} is kind={rec.kind.value}")
        lock = self._lock_for(image_id)
        with lock.write_locked():
            with self._meta:
                rec = self._images.get(image_id)
                if rec is None:
                    raise NotFound(f"image {image_id} does not exist")
                if rec.kind is not ImageKind.CLONE:
                    raise NotAClone(f"image {image_id} is kind={rec.kind.value}")
                chain = self.chain_of(image_id)
            copied = 0
            with ExitStack() as stack:
                for ancestor in chain[1:]:
                    stack.enter_context(self._lock_for(ancestor.id).read_locked())
                layer = self._layer(image_id)
                wanted = set()
                for ancestor in chain[1:]:
                    ancestor_layer = self._layer_if_exists(ancestor.id)
                    if ancestor_layer is not None:
                        wanted.update(ancestor_layer.indices)
                wanted.difference_update(layer.indices)
                for index in sorted(wanted):
                    payload = self._resolve_block(chain[1:], index)
                    if payload is None:
                        continue
                    layer.write_block(index, payload)
                    copied += 1
                layer.flush()
            with self._meta:
                self._commit({"type": "image.flatten", "id": image_id})
        self._bump(blocks_copied=copied, flatten_ops=1)
        return copied

    def deep_copy(self, tenant: str, source_id: str, name: str) -> str:
        """Fully independent golden duplicate of the source's resolved view."""
        self.check_readable(tenant, source_id)
        with self._meta:
            self._require_name_free(tenant, name)
            image_id = self._next_id()
        chain = self.chain_of(source_id)
        copied = 0
        with ExitStack() as stack:
            for rec in chain:
                stack.enter_context(self._lock_for(rec.id).read_locked())
            if not self.exists(source_id):
                raise NotFound(f"image {source_id} does not exist")
            layer = self._layer(image_id)
            wanted = set()
            for rec in chain:
                source_layer = self._layer_if_exists(rec.id)
                if source_layer is not None:
                    wanted.update(source_layer.indices)
            try:
                for index in sorted(wanted):
                    payload = self._resolve_block(chain, index)
                    if payload is None or payload.count(0) == len(payload):
                        continue
                    layer.write_block(index, payload)
                    copied += 1
                layer.flush()
            except OSError as exc:
                raise StorageFailure(f"deep copy failed: {exc}") from exc
        try:
            with self._meta:
                self._require_name_free(tenant, name)
                self._commit(self._create_record(image_id, tenant, name, ImageKind.GOLDEN,
                                                 None, chain[0].virtual_size))
        except DuplicateName:
            self._discard_layer(image_id)
            raise
        self._bump(blocks_copied=copied, deep_copy_ops=1)
        return image_id

    def export_image(self, tenant: str, image_id: str) -> bytes:
        """Resolved view of the whole image."""
        rec = self.check_readable(tenant, image_id)
        return self.read_range(image_id, 0, rec.virtual_size)

    # -- integrity ----------------------------------------------------------

    def check_integrity(self) -> list[str]:
        """Recompute derived state and report violations (empty == healthy)."""
        problems: list[str] = []
        with self._meta:
            counts: dict[str, int] = {image_id: 0 for image_id in self._images}
            names = set()
            for rec in self._images.values():
                key = (rec.tenant, rec.name)
                if key in names:
                    problems.append(f"duplicate live name {key}")
                names.add(key)
                if rec.parent is not None:
                    if rec.parent not in self._images:
                        problems.append(f"{rec.id} has dangling parent {rec.parent}")
                        continue
                    counts[rec.parent] += 1
                    if rec.kind is not ImageKind.CLONE:
                        problems.append(f"{rec.id} has a parent but kind={rec.kind.value}")
                    parent = self._images[rec.parent]
                    if rec.virtual_size != parent.virtual_size:
                        problems.append(f"{rec.id} size differs from parent")
                elif rec.kind is ImageKind.CLONE:
                    problems.append(f"{rec.id} is a clone without a parent")
            for image_id, expected in counts.items():
                actual = self._images[image_id].child_count
                if actual != expected:
                    problems.append(
                        f"{image_id} child_count={actual}, live children={expected}")
            for rec in self._images.values():
                try:
                    if len(self.chain_of(rec.id)) > self.config.max_chain_depth:
                        problems.append(f"{rec.id} chain exceeds max depth")
                except NotFound:
                    pass
        return problems

    def orphan_layer_files(self) -> list[Path]:
        blocks_dir = self.root / "blocks"
        if not blocks_dir.is_dir():
            return []
        with self._meta:
            live = set(self._images)
        return sorted(p for p in blocks_dir.glob("*.sparse") if p.stem not in live)

    def cleanup_orphan_layers(self) -> int:
        """Remove block files left behind by imports or copies that never
        reached their journal commit."""
        orphans = self.orphan_layer_files()
        for path in orphans:
            log.info("removing orphan layer file %s", path)
            path.unlink(missing_ok=True)
        return len(orphans)

    # -- internals ----------------------------------------------------------

    def _create_record(self, image_id: str, tenant: str, name: str, kind: ImageKind,
                       parent: str | None, virtual_size: int) -> dict:
        return {
            "type": "image.create",
            "id": image_id,
            "tenant": tenant,
            "name": name,
            "kind": kind.value,
            "parent": parent,
            "virtual_size": virtual_size,
            "block_size": self.config.block_size,
            "created_at": time.time(),
        }

    def _require_name_free(self, tenant: str, name: str) -> None:
        if not name:
            raise DuplicateName("image name must be non-empty")
        if self.find_by_name(tenant, name) is not None:
            raise DuplicateName(f"tenant {tenant} already has an image named {name!r}")

    def _next_id(self) -> str:
        self._seq += 1
        return f"img-{self._seq:06d}"

    def _layer_path(self, image_id: str) -> Path:
        return self.root / "blocks" / f"{image_id}.sparse"

    def _discard_layer(self, image_id: str) -> None:
        with self._meta:
            layer = self._layers.pop(image_id, None)
        if layer is not None:
            layer.unlink()
        else:
            self._layer_path(image_id).unlink(missing_ok=True)

    def _layer(self, image_id: str) -> BlockFile:
        with self._meta:
            layer = self._layers.get(image_id)
            if layer is None:
                block_size = self.config.block_size
                rec = self._images.get(image_id)
                if rec is not None:
                    block_size = rec.block_size
                layer = BlockFile(self._layer_path(image_id), block_size)
                layer.open()
                self._layers[image_id] = layer
            return layer

    def _layer_if_exists(self, image_id: str) -> BlockFile | None:
        """Open handle for a layer that has data on disk; None otherwise."""
        with self._meta:
            layer = self._layers.get(image_id)
            if layer is None and self._layer_path(image_id).exists():
                layer = self._layer(image_id)
            return layer

    def _lock_for(self, image_id: str) -> RWLock:
        with self._meta:
            lock = self._locks.get(image_id)
            if lock is None:
                lock = self._locks[image_id] = RWLock()
            return lock

    def _check_bounds(self, rec: ImageRecord, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > rec.virtual_size:
            raise OutOfBounds(
                f"range [{offset}, {offset + length}) outside image of "
                f"{rec.virtual_size} bytes")

    def _resolve_block(self, chain: list[ImageRecord], index: int) -> bytes | None:
        for rec in chain:
            layer = self._layer_if_exists(rec.id)
            if layer is None:
                continue
            payload = layer.read_block(index)
            if payload is not None:
                return payload
        return None

    def _read_resolved(self, chain: list[ImageRecord], offset: int, length: int) -> bytes:
        block_size = chain[0].block_size
        out = bytearray(length)
        cursor = offset
        end = offset + length
        while cursor < end:
            index = cursor // block_size
            block_lo = index * block_size
            lo = cursor - block_lo
            hi = min(end - block_lo, block_size)
            payload = self._resolve_block(chain, index)
            if payload is not None:
                out[cursor - offset : cursor - offset + (hi - lo)] = payload[lo:hi]
            cursor = block_lo + hi
        return bytes(out)

    def _write_blocks(self, chain: list[ImageRecord], offset: int, data: bytes) -> None:
        rec = chain[0]
        block_size = rec.block_size
        layer = self._layer(rec.id)
        materialized = 0
        cursor = offset
        end = offset + len(data)
        try:
            while cursor < end:
                index = cursor // block_size
                block_lo = index * block_size
                lo = cursor - block_lo
                hi = min(end - block_lo, block_size)
                piece = data[cursor - offset : cursor - offset + (hi - lo)]
                local = layer.read_block(index)
                if lo == 0 and hi == block_size:
                    payload = piece
                elif local is not None:
                    payload = local[:lo] + piece + local[hi:]
                else:
                    base = self._resolve_block(chain[1:], index)
                    if base is None:
                        base = bytes(block_size)
                    payload = base[:lo] + piece + base[hi:]
                if local is None:
                    materialized += 1
                layer.write_block(index, payload)
                cursor = block_lo + hi
            layer.flush()
        except OSError as exc:
            raise StorageFailure(f"write failed: {exc}") from exc
        if materialized:
            self._bump(blocks_materialized=materialized)


def _id_number(image_id: str) -> int | None:
    if image_id.startswith("img-"):
        try:
            return int(image_id[4:])
        except ValueError:
            return None
    return None
