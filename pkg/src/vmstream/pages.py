"""Content-addressed page storage and the on-disk live-image format.

Pages are 4 KiB byte strings identified by their SHA-256 digest.  The
all-zero page is never stored; it is represented by the ``ZERO`` sentinel
digest (32 zero bytes) and materializes on demand.

Image file layout::

    b"VMSIMG01"
    <u64 manifest_len> manifest fields in declaration order
    repeated pack records: <32-byte digest><u32 length == 4096><content>

Integers are little-endian.  Maps are written sparse: only non-ZERO entries
appear, sorted by page number, and absent pages read back as ZERO.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from types import MappingProxyType
from typing import Iterator, Mapping

from .errors import CorruptImage, InvalidPage, MissingPage, StoreError

PAGE_SIZE = 4096
DIGEST_SIZE = 32
ZERO = bytes(DIGEST_SIZE)
ZERO_PAGE = bytes(PAGE_SIZE)
IMAGE_MAGIC = b"VMSIMG01"

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")


@lru_cache(maxsize=4096)
def _digest(content: bytes) -> bytes:
    # keyed on the bytes object itself; repeated hashing of a page that is
    # being moved between stores costs one dict lookup
    if content == ZERO_PAGE:
        return ZERO
    return hashlib.sha256(content).digest()


def hash_page(content: bytes) -> bytes:
    """Return the content digest of a page, ``ZERO`` for the all-zero page."""
    if not isinstance(content, bytes):
        content = bytes(content)
    if len(content) != PAGE_SIZE:
        raise InvalidPage(f"page must be {PAGE_SIZE} bytes, got {len(content)}")
    return _digest(content)


@dataclass(frozen=True)
class DedupStats:
    logical_pages: int
    unique_pages: int
    dedup_ratio: float


class PageStore:
    """Reference-counted map from digest to page content.

    Every ``put_page`` is a logical reference; identical content is stored
    once.  Mutations are serialized by an internal lock, so a store can be
    shared by reader threads (the live page server does this).
    """

    def __init__(self, name: str = "store") -> None:
        self.name = name
        self._content: dict[bytes, bytes] = {}
        self._refs: dict[bytes, int] = {}
        self._zero_refs = 0
        self._logical = 0
        self._lock = threading.Lock()

    def put_page(self, content: bytes) -> bytes:
        digest = hash_page(content)
        with self._lock:
            self._logical += 1
            if digest == ZERO:
                self._zero_refs += 1
                return ZERO
            n = self._refs.get(digest)
            if n is None:
                self._content[digest] = bytes(content)
                self._refs[digest] = 1
            else:
                self._refs[digest] = n + 1
        return digest

    def incref(self, digest: bytes) -> None:
        """Add a reference to content that is already stored."""
        with self._lock:
            if digest == ZERO:
                self._zero_refs += 1
                self._logical += 1
                return
            n = self._refs.get(digest)
            if n is None:
                raise MissingPage(digest.hex())
            self._refs[digest] = n + 1
            self._logical += 1

    def get_page(self, digest: bytes) -> bytes:
        if digest == ZERO:
            return ZERO_PAGE
        try:
            return self._content[digest]
        except KeyError:
            raise MissingPage(digest.hex()) from None

    def release_page(self, digest: bytes) -> None:
        with self._lock:
            if digest == ZERO:
                if self._zero_refs:
                    self._zero_refs -= 1
                    self._logical -= 1
                return
            n = self._refs.get(digest)
            if n is None:
                raise MissingPage(digest.hex())
            self._logical -= 1
            if n == 1:
                del self._refs[digest]
                del self._content[digest]
            else:
                self._refs[digest] = n - 1

    def __contains__(self, digest: object) -> bool:
        return digest == ZERO or digest in self._refs

    def __len__(self) -> int:
        return len(self._refs)

    def refcount(self, digest: bytes) -> int:
        if digest == ZERO:
            return self._zero_refs
        return self._refs.get(digest, 0)

    def digests(self) -> Iterator[bytes]:
        return iter(list(self._refs))

    @property
    def unique_pages(self) -> int:
        return len(self._refs)

    @property
    def logical_pages(self) -> int:
        return self._logical

    @property
    def stored_bytes(self) -> int:
        return len(self._refs) * PAGE_SIZE

    def total_refs(self) -> int:
        return sum(self._refs.values())


def put_page(store: PageStore, content: bytes) -> bytes:
    return store.put_page(content)


def get_page(store: PageStore, digest: bytes) -> bytes:
    return store.get_page(digest)


def release_page(store: PageStore, digest: bytes) -> None:
    store.release_page(digest)


def dedup_stats(store: PageStore) -> DedupStats:
    logical, unique = store.logical_pages, store.unique_pages
    ratio = 0.0 if logical == 0 else logical / max(unique, 1)
    return DedupStats(logical, unique, ratio)


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class IdentityRecord:
    hostname: str
    net_id: str


def _freeze(m: Mapping[int, bytes] | None) -> Mapping[int, bytes]:
    m = {} if m is None else m
    return MappingProxyType({int(p): bytes(h) for p, h in sorted(m.items()) if h != ZERO})


@dataclass(frozen=True)
class LiveImageManifest:
    """Immutable description of a live image.

    ``memory_map`` and ``disk_map`` hold only non-ZERO pages; any page below
    the corresponding page count that is absent reads as the zero page.
    """

    image_id: str
    vcpu_state: bytes
    memory_map: Mapping[int, bytes]
    disk_map: Mapping[int, bytes]
    identity: IdentityRecord
    memory_page_count: int
    disk_page_count: int
    created_at: int = 0

    def memory_hash(self, page: int) -> bytes:
        return self.memory_map.get(page, ZERO)

    def referenced(self) -> Iterator[bytes]:
        """Yield one digest per non-ZERO map entry (a store reference each)."""
        yield from self.memory_map.values()
        yield from self.disk_map.values()

    def unique_digests(self) -> set[bytes]:
        return set(self.memory_map.values()) | set(self.disk_map.values())


def make_manifest(
    *,
    vcpu_state: bytes,
    memory_map: Mapping[int, bytes],
    disk_map: Mapping[int, bytes] | None,
    identity: IdentityRecord,
    memory_page_count: int,
    disk_page_count: int = 0,
    created_at: int = 0,
    image_id: str | None = None,
) -> LiveImageManifest:
    """Build a manifest; the id defaults to a digest of its serialized body."""
    mm, dm = _freeze(memory_map), _freeze(disk_map)
    for p in mm:
        if not 0 <= p < memory_page_count:
            raise StoreError(f"memory page {p} outside [0, {memory_page_count})")
    for p in dm:
        if not 0 <= p < disk_page_count:
            raise StoreError(f"disk page {p} outside [0, {disk_page_count})")
    m = LiveImageManifest("", bytes(vcpu_state), mm, dm, identity,
                          memory_page_count, disk_page_count, created_at)
    if image_id is None:
        image_id = "img-" + hashlib.sha256(_manifest_body(m)).hexdigest()[:16]
    return LiveImageManifest(image_id, m.vcpu_state, mm, dm, identity,
                             memory_page_count, disk_page_count, created_at)


def retain_manifest(manifest: LiveImageManifest, store: PageStore) -> None:
    """Take one store reference per non-ZERO map entry."""
    for d in manifest.referenced():
        store.incref(d)


def release_manifest(manifest: LiveImageManifest, store: PageStore) -> None:
    for d in manifest.referenced():
        store.release_page(d)


# -- image files ---------------------------------------------------------------


def _put_str(out: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    out.write(_U64.pack(len(raw)))
    out.write(raw)


def _put_blob(out: io.BytesIO, b: bytes) -> None:
    out.write(_U64.pack(len(b)))
    out.write(b)


def _put_map(out: io.BytesIO, m: Mapping[int, bytes]) -> None:
    out.write(_U64.pack(len(m)))
    for page in sorted(m):
        out.write(_U64.pack(page))
        out.write(m[page])


def _manifest_body(m: LiveImageManifest) -> bytes:
    out = io.BytesIO()
    _put_str(out, m.image_id)
    _put_blob(out, m.vcpu_state)
    _put_map(out, m.memory_map)
    _put_map(out, m.disk_map)
    _put_str(out, m.identity.hostname)
    _put_str(out, m.identity.net_id)
    out.write(_U64.pack(m.memory_page_count))
    out.write(_U64.pack(m.disk_page_count))
    out.write(_U64.pack(m.created_at))
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if n < 0 or end > len(self.buf):
            raise CorruptImage("truncated image")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def str(self) -> str:
        try:
            return self.take(self.u64()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptImage(f"bad string: {exc}") from None

    def map(self) -> dict[int, bytes]:
        n = self.u64()
        if n * (8 + DIGEST_SIZE) > len(self.buf) - self.pos:
            raise CorruptImage("truncated map")
        out: dict[int, bytes] = {}
        last = -1
        for _ in range(n):
            page = self.u64()
            if page <= last:
                raise CorruptImage("map not sorted by page number")
            last = page
            out[page] = self.take(DIGEST_SIZE)
        return out

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def _parse_manifest(body: bytes) -> LiveImageManifest:
    r = _Reader(body)
    image_id = r.str()
    vcpu = r.take(r.u64())
    mm = r.map()
    dm = r.map()
    identity = IdentityRecord(r.str(), r.str())
    mcount, dcount, created = r.u64(), r.u64(), r.u64()
    if not r.done:
        raise CorruptImage("trailing bytes in manifest section")
    if any(p >= mcount for p in mm) or any(p >= dcount for p in dm):
        raise CorruptImage("map entry beyond page count")
    if ZERO in mm.values() or ZERO in dm.values():
        raise CorruptImage("explicit ZERO map entry")
    return LiveImageManifest(image_id, vcpu, MappingProxyType(mm), MappingProxyType(dm),
                             identity, mcount, dcount, created)


def encode_image(store: PageStore, manifest: LiveImageManifest) -> bytes:
    body = _manifest_body(manifest)
    out = io.BytesIO()
    out.write(IMAGE_MAGIC)
    out.write(_U64.pack(len(body)))
    out.write(body)
    for digest in sorted(manifest.unique_digests()):
        content = store.get_page(digest)  # MissingPage propagates
        out.write(digest)
        out.write(_U32.pack(PAGE_SIZE))
        out.write(content)
    return out.getvalue()


def write_image(store: PageStore, manifest: LiveImageManifest, path: str | os.PathLike) -> int:
    """Write ``manifest`` and its pages to ``path`` atomically; return the size."""
    data = encode_image(store, manifest)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def _split_image(data: bytes) -> tuple[LiveImageManifest, _Reader]:
    if len(data) < len(IMAGE_MAGIC) or data[: len(IMAGE_MAGIC)] != IMAGE_MAGIC:
        raise CorruptImage("bad magic")
    r = _Reader(data)
    r.take(len(IMAGE_MAGIC))
    body = r.take(r.u64())
    return _parse_manifest(body), r


def decode_image(data: bytes, store: PageStore) -> LiveImageManifest:
    manifest, r = _split_image(data)
    pack: dict[bytes, bytes] = {}
    last = b""
    while not r.done:
        digest = r.take(DIGEST_SIZE)
        length = r.u32()
        if length != PAGE_SIZE:
            raise CorruptImage(f"pack record length {length}")
        content = r.take(length)
        if digest <= last:
            raise CorruptImage("pack not sorted/unique by digest")
        last = digest
        if hash_page(content) != digest:
            raise CorruptImage(f"content does not match digest {digest.hex()[:16]}")
        pack[digest] = content
    missing = manifest.unique_digests() - pack.keys()
    if missing:
        raise CorruptImage(f"{len(missing)} referenced pages absent from pack")
    for digest in manifest.referenced():
        store.put_page(pack[digest])
    return manifest


def read_image(path: str | os.PathLike, store: PageStore) -> LiveImageManifest:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptImage(f"cannot read image {path}: {exc.strerror}") from None
    return decode_image(data, store)


def read_manifest(path: str | os.PathLike) -> LiveImageManifest:
    """Parse only the manifest section (no pack validation)."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(len(IMAGE_MAGIC) + 8)
            if len(head) < len(IMAGE_MAGIC) + 8 or head[: len(IMAGE_MAGIC)] != IMAGE_MAGIC:
                raise CorruptImage("bad magic")
            (n,) = _U64.unpack(head[len(IMAGE_MAGIC):])
            body = fh.read(n)
    except OSError as exc:
        raise CorruptImage(f"cannot read image {path}: {exc.strerror}") from None
    if len(body) != n:
        raise CorruptImage("truncated image")
    return _parse_manifest(body)


def pack_record_count(data: bytes) -> int:
    """Number of pack records in an encoded image."""
    manifest, r = _split_image(data)
    remaining = len(data) - r.pos
    per = DIGEST_SIZE + 4 + PAGE_SIZE
    if remaining % per:
        raise CorruptImage("partial pack record")
    return remaining // per


__all__ = [
    "PAGE_SIZE", "ZERO", "ZERO_PAGE", "IMAGE_MAGIC", "DedupStats", "PageStore",
    "IdentityRecord", "LiveImageManifest", "make_manifest", "hash_page", "put_page",
    "get_page", "release_page", "dedup_stats", "write_image", "read_image",
    "read_manifest", "encode_image", "decode_image", "pack_record_count",
    "retain_manifest", "release_manifest",
]
