"""Length-prefixed binary framing for page-streaming messages.

Frame layout::

    <u32 length><u8 type><body>

``length`` counts the type byte plus the body, not the prefix itself.
Body integers are u64 little-endian; strings and blobs carry a u64 length.
Page ranges are half-open ``[start, end)``.

``frame_size`` computes the encoded size arithmetically so the simulator can
account bytes for messages it never materializes; ``encode`` is the ground
truth and the two are checked against each other in the test suite.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence, Union

import numpy as np

from .errors import ProtocolError
from .pages import DIGEST_SIZE, PAGE_SIZE, hash_page

PAGE_REQUEST = 1
PAGE_REPLY = 2
VCPU_TRANSFER = 3
DIRTY_BITMAP = 4
MIGRATE_COMMIT = 5

PREFIX = 4
HEADER = PREFIX + 1
ENTRY_HEADER = 8 + DIGEST_SIZE + 4
MAX_FRAME = 2**32 - 1

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")
_ENTRY = struct.Struct("<Q32sI")


@dataclass(frozen=True)
class PageRequest:
    image_id: str
    ranges: tuple[tuple[int, int], ...]

    def pages(self) -> list[int]:
        out: list[int] = []
        for start, end in self.ranges:
            if end < start:
                raise ProtocolError(f"malformed range [{start}, {end})")
            out.extend(range(start, end))
        return out


@dataclass(frozen=True)
class PageReply:
    image_id: str
    # (page, digest, content or None when the receiver already holds digest)
    entries: tuple[tuple[int, bytes, bytes | None], ...]

    @property
    def content_pages(self) -> int:
        return sum(1 for e in self.entries if e[2] is not None)


@dataclass(frozen=True)
class VcpuTransfer:
    vm_id: str
    vcpu_state: bytes


@dataclass(frozen=True)
class DirtyBitmap:
    vm_id: str
    nbits: int
    bits: bytes  # little bit order, ceil(nbits / 8) bytes

    @classmethod
    def from_pages(cls, vm_id: str, nbits: int, pages: Sequence[int] | np.ndarray) -> "DirtyBitmap":
        mask = np.zeros(nbits, dtype=bool)
        mask[np.asarray(pages, dtype=np.int64)] = True
        return cls(vm_id, nbits, np.packbits(mask, bitorder="little").tobytes())

    def pages(self) -> np.ndarray:
        mask = np.unpackbits(np.frombuffer(self.bits, dtype=np.uint8), bitorder="little")
        return np.flatnonzero(mask[: self.nbits])


@dataclass(frozen=True)
class MigrateCommit:
    vm_id: str


WireMessage = Union[PageRequest, PageReply, VcpuTransfer, DirtyBitmap, MigrateCommit]


def coalesce_ranges(pages: Sequence[int]) -> tuple[tuple[int, int], ...]:
    """Collapse sorted page numbers into half-open ranges."""
    ranges: list[tuple[int, int]] = []
    for p in pages:
        if ranges and ranges[-1][1] == p:
            ranges[-1] = (ranges[-1][0], p + 1)
        else:
            ranges.append((p, p + 1))
    return tuple(ranges)


def _str_size(s: str) -> int:
    return 8 + len(s.encode("utf-8"))


def reply_size(image_id: str, content_entries: int, hash_entries: int) -> int:
    """Frame size of a PageReply with the given entry mix."""
    return (HEADER + _str_size(image_id) + 8
            + content_entries * (ENTRY_HEADER + PAGE_SIZE) + hash_entries * ENTRY_HEADER)


def request_size(image_id: str, nranges: int) -> int:
    return HEADER + _str_size(image_id) + 8 + 16 * nranges


def frame_size(msg: WireMessage) -> int:
    if isinstance(msg, PageRequest):
        return request_size(msg.image_id, len(msg.ranges))
    if isinstance(msg, PageReply):
        n_content = msg.content_pages
        return reply_size(msg.image_id, n_content, len(msg.entries) - n_content)
    if isinstance(msg, VcpuTransfer):
        return HEADER + _str_size(msg.vm_id) + 8 + len(msg.vcpu_state)
    if isinstance(msg, DirtyBitmap):
        return HEADER + _str_size(msg.vm_id) + 8 + (msg.nbits + 7) // 8
    if isinstance(msg, MigrateCommit):
        return HEADER + _str_size(msg.vm_id)
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def _w_str(out: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    out.write(_U64.pack(len(raw)))
    out.write(raw)


def encode(msg: WireMessage) -> bytes:
    out = io.BytesIO()
    if isinstance(msg, PageRequest):
        kind = PAGE_REQUEST
        _w_str(out, msg.image_id)
        out.write(_U64.pack(len(msg.ranges)))
        for start, end in msg.ranges:
            if end < start or start < 0:
                raise ProtocolError(f"malformed range [{start}, {end})")
            out.write(_U64.pack(start))
            out.write(_U64.pack(end))
    elif isinstance(msg, PageReply):
        kind = PAGE_REPLY
        _w_str(out, msg.image_id)
        out.write(_U64.pack(len(msg.entries)))
        for page, digest, content in msg.entries:
            if content is None:
                out.write(_ENTRY.pack(page, digest, 0))
            else:
                out.write(_ENTRY.pack(page, digest, len(content)))
                out.write(content)
    elif isinstance(msg, VcpuTransfer):
        kind = VCPU_TRANSFER
        _w_str(out, msg.vm_id)
        out.write(_U64.pack(len(msg.vcpu_state)))
        out.write(msg.vcpu_state)
    elif isinstance(msg, DirtyBitmap):
        kind = DIRTY_BITMAP
        _w_str(out, msg.vm_id)
        out.write(_U64.pack(msg.nbits))
        out.write(msg.bits)
    elif isinstance(msg, MigrateCommit):
        kind = MIGRATE_COMMIT
        _w_str(out, msg.vm_id)
    else:
        raise TypeError(f"not a wire message: {type(msg).__name__}")
    body = out.getvalue()
    if len(body) + 1 > MAX_FRAME:
        raise ProtocolError("frame too large")
    return _U32.pack(len(body) + 1) + bytes([kind]) + body


class _Body:
    def __init__(self, buf: bytes) -> None:
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise ProtocolError("truncated frame body")
        b = self.buf[self.pos:end]
        self.pos = end
        return b

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def str(self) -> str:
        return self.take(self.u64()).decode("utf-8")


def decode_body(kind: int, body: bytes) -> WireMessage:
    r = _Body(body)
    msg: WireMessage
    if kind == PAGE_REQUEST:
        image_id = r.str()
        n = r.u64()
        ranges = []
        for _ in range(n):
            start, end = r.u64(), r.u64()
            if end < start:
                raise ProtocolError(f"malformed range [{start}, {end})")
            ranges.append((start, end))
        msg = PageRequest(image_id, tuple(ranges))
    elif kind == PAGE_REPLY:
        image_id = r.str()
        n = r.u64()
        entries = []
        for _ in range(n):
            page, digest, clen = _ENTRY.unpack(r.take(_ENTRY.size))
            content = None
            if clen:
                if clen != PAGE_SIZE:
                    raise ProtocolError(f"bad content length {clen}")
                content = r.take(clen)
            entries.append((page, digest, content))
        msg = PageReply(image_id, tuple(entries))
    elif kind == VCPU_TRANSFER:
        vm_id = r.str()
        msg = VcpuTransfer(vm_id, r.take(r.u64()))
    elif kind == DIRTY_BITMAP:
        vm_id = r.str()
        nbits = r.u64()
        msg = DirtyBitmap(vm_id, nbits, r.take((nbits + 7) // 8))
    elif kind == MIGRATE_COMMIT:
        msg = MigrateCommit(r.str())
    else:
        raise ProtocolError(f"unknown message type {kind}")
    if r.pos != len(body):
        raise ProtocolError("trailing bytes in frame")
    return msg


def decode(frame: bytes) -> WireMessage:
    if len(frame) < HEADER:
        raise ProtocolError("frame shorter than header")
    (length,) = _U32.unpack(frame[:PREFIX])
    if length != len(frame) - PREFIX or length < 1:
        raise ProtocolError(f"frame length {length} does not match {len(frame) - PREFIX}")
    return decode_body(frame[PREFIX], frame[HEADER:])


def read_frame(stream: BinaryIO) -> WireMessage | None:
    """Read one frame from a blocking stream; None on clean EOF."""
    prefix = _read_exact(stream, PREFIX, allow_eof=True)
    if prefix is None:
        return None
    (length,) = _U32.unpack(prefix)
    if length < 1:
        raise ProtocolError("empty frame")
    rest = _read_exact(stream, length)
    return decode_body(rest[0], rest[1:])


def _read_exact(stream: BinaryIO, n: int, allow_eof: bool = False) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def verify_reply_content(reply: PageReply) -> None:
    """Reject replies whose content does not hash to the stated digest."""
    for page, digest, content in reply.entries:
        if content is not None and hash_page(content) != digest:
            raise ProtocolError(f"page {page}: content does not match digest")
