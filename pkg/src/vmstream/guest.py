"""Synthetic guests: address spaces, workload programs and access traces.

A guest is an address space plus a deterministic memory-access program.
Page states live in a ``uint8`` array so that 1 GiB spaces (262144 pages)
stay cheap; shared digests and private contents sit in per-space dicts.

State transitions driven by guest operations::

    Zero   -> Private           (write)
    Remote -> Shared | Zero     (fault installs image content)
    Remote -> Private           (fetch, then write)
    Shared -> Private           (write, copy-on-write)

Eviction (footprint management) is the only path back into Remote.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from typing import Callable, Iterator, NamedTuple, Union

import numpy as np

from .errors import InvalidConfig, InvalidPage, StreamUnavailable
from .pages import PAGE_SIZE, ZERO, ZERO_PAGE, IdentityRecord, PageStore

DEFAULT_PAGE_COUNT = 262144  # 1 GiB
DEFAULT_VCPU_BYTES = 16384
TRACE_BLOCK = 4096


class Kind(IntEnum):
    ZERO = 0
    REMOTE = 1
    SHARED = 2
    PRIVATE = 3


# plain ints for hot paths (enum attribute lookup is slow)
K_ZERO, K_REMOTE, K_SHARED, K_PRIVATE = 0, 1, 2, 3


@dataclass(frozen=True)
class Zero:
    pass


@dataclass(frozen=True)
class Remote:
    pass


@dataclass(frozen=True)
class Shared:
    hash: bytes


@dataclass(frozen=True)
class Private:
    content: bytes


PageState = Union[Zero, Remote, Shared, Private]


class PageFault(Exception):
    """Access to a Remote page; the caller must stream it in first."""

    def __init__(self, page: int) -> None:
        super().__init__(page)
        self.page = page


class AddressSpace:
    """Per-VM page table.

    ``source`` is whatever can serve this space's Remote pages (an image, or
    a migration source).  Shared digests hold one reference each in
    ``store``, the host-local page store.
    """

    def __init__(self, page_count: int, store: PageStore | None = None, source=None) -> None:
        if page_count <= 0:
            raise InvalidConfig(f"page_count must be positive, got {page_count}")
        self.page_count = int(page_count)
        self.kind = np.zeros(self.page_count, dtype=np.uint8)
        self.shared: dict[int, bytes] = {}
        self.private: dict[int, bytes] = {}
        self.store = store if store is not None else PageStore("local")
        self.source = source
        self.n_remote = 0
        # post-copy: pages still owed by the migration source
        self.pull: np.ndarray | None = None
        self.pull_source = None
        self.dirty: set[int] | None = None

    # -- inspection ---------------------------------------------------------

    def state(self, page: int) -> PageState:
        k = self.kind[page]
        if k == K_ZERO:
            return Zero()
        if k == K_REMOTE:
            return Remote()
        if k == K_SHARED:
            return Shared(self.shared[page])
        return Private(self.private[page])

    def states(self) -> dict[int, PageState]:
        return {p: self.state(p) for p in range(self.page_count)}

    def source_for(self, page: int):
        if self.pull is not None and self.pull[page]:
            return self.pull_source
        return self.source

    @property
    def private_pages(self) -> int:
        return len(self.private)

    @property
    def shared_pages(self) -> int:
        return len(self.shared)

    @property
    def logical_bytes(self) -> int:
        return self.page_count * PAGE_SIZE

    def resident_pages(self) -> np.ndarray:
        return np.flatnonzero(self.kind >= K_SHARED)

    def remote_pages(self) -> np.ndarray:
        return np.flatnonzero(self.kind == K_REMOTE)

    def read(self, page: int) -> bytes:
        k = self.kind[page]
        if k == K_ZERO:
            return ZERO_PAGE
        if k == K_SHARED:
            return self.store.get_page(self.shared[page])
        if k == K_PRIVATE:
            return self.private[page]
        raise PageFault(page)

    def digest(self, page: int) -> bytes | None:
        """Digest of a resident or zero page without hashing; None if Private/Remote."""
        k = self.kind[page]
        if k == K_ZERO:
            return ZERO
        if k == K_SHARED:
            return self.shared[page]
        return None

    def materialize(self, resolve: Callable[[int], bytes] | None = None) -> bytes:
        """Flat memory image; Remote pages go through ``resolve``."""
        out = bytearray(self.page_count * PAGE_SIZE)
        for p in np.flatnonzero(self.kind != K_ZERO).tolist():
            k = self.kind[p]
            if k == K_REMOTE:
                if resolve is None:
                    raise PageFault(p)
                data = resolve(p)
            else:
                data = self.read(p)
            out[p * PAGE_SIZE:(p + 1) * PAGE_SIZE] = data
        return bytes(out)

    # -- transitions ----------------------------------------------------------

    def write(self, page: int, content: bytes) -> None:
        if len(content) != PAGE_SIZE:
            raise InvalidPage(f"write of {len(content)} bytes")
        k = self.kind[page]
        if k == K_REMOTE:
            raise PageFault(page)
        if k == K_SHARED:
            self.store.release_page(self.shared.pop(page))
        self.kind[page] = K_PRIVATE
        self.private[page] = content
        if self.dirty is not None:
            self.dirty.add(page)

    def install(self, page: int, digest: bytes) -> None:
        """Resolve a Remote page to Shared(digest), or Zero for ZERO."""
        if self.kind[page] != K_REMOTE:
            return
        if digest == ZERO:
            self.kind[page] = K_ZERO
        else:
            self.store.incref(digest)
            self.kind[page] = K_SHARED
            self.shared[page] = digest
        self.n_remote -= 1
        if self.pull is not None:
            self.pull[page] = False

    def install_private(self, page: int, content: bytes) -> None:
        self._drop(page)
        self.kind[page] = K_PRIVATE
        self.private[page] = content

    def install_shared(self, page: int, digest: bytes) -> None:
        """Set any page to Shared(digest) (digest already in ``store``)."""
        self._drop(page)
        if digest == ZERO:
            return
        self.store.incref(digest)
        self.kind[page] = K_SHARED
        self.shared[page] = digest

    def evict(self, page: int) -> bytes:
        """Shared -> Remote; returns the released digest."""
        if self.kind[page] != K_SHARED or self.source is None:
            raise ValueError(f"page {page} is not evictable")
        digest = self.shared.pop(page)
        self.store.release_page(digest)
        self.kind[page] = K_REMOTE
        self.n_remote += 1
        return digest

    def make_remote(self, pages: np.ndarray) -> None:
        """Mark pages Remote (clone start, post-copy resume)."""
        pages = np.asarray(pages, dtype=np.int64)
        for p in pages[self.kind[pages] >= K_SHARED].tolist():
            self._drop(p)
        fresh = self.kind[pages] != K_REMOTE
        self.kind[pages] = K_REMOTE
        self.n_remote += int(np.count_nonzero(fresh))

    def _drop(self, page: int) -> None:
        k = self.kind[page]
        if k == K_SHARED:
            self.store.release_page(self.shared.pop(page))
        elif k == K_PRIVATE:
            del self.private[page]
        elif k == K_REMOTE:
            self.n_remote -= 1
            if self.pull is not None:
                self.pull[page] = False
        self.kind[page] = K_ZERO

    def release_all(self) -> None:
        """Drop every store reference (VM teardown)."""
        for d in self.shared.values():
            self.store.release_page(d)
        self.shared.clear()
        self.private.clear()
        self.kind[:] = K_ZERO
        self.n_remote = 0


# -- workloads ---------------------------------------------------------------

_KINDS = ("sequential", "uniform", "hotspot", "phased")


@dataclass(frozen=True)
class WorkloadSpec:
    """Deterministic access program.

    ``phases`` entries are ``(start_page, end_page, duration_s)`` with a
    half-open page range; phases repeat cyclically.  ``content_pool`` bounds
    the number of distinct written page contents (0 means every write is
    distinct), which keeps multi-GiB resident guests cheap to model.
    """

    kind: str = "uniform"
    write_fraction: float = 0.0
    ops_per_second: float = 10_000.0
    seed: int = 0
    zipf_s: float = 1.0
    phases: tuple[tuple[int, int, float], ...] = ()
    content_pool: int = 0

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise InvalidConfig(f"unknown workload kind {self.kind!r}")
        if not 0.0 <= self.write_fraction <= 1.0:
            raise InvalidConfig("write_fraction must be in [0, 1]")
        if not self.ops_per_second > 0:
            raise InvalidConfig("ops_per_second must be positive")
        if self.kind == "hotspot" and not self.zipf_s > 0:
            raise InvalidConfig("zipf_s must be positive")
        if self.kind == "phased":
            if not self.phases:
                raise InvalidConfig("phased workload needs at least one phase")
            for start, end, dur in self.phases:
                if not (0 <= start < end) or not dur > 0:
                    raise InvalidConfig(f"bad phase {(start, end, dur)}")
        if self.content_pool < 0:
            raise InvalidConfig("content_pool must be >= 0")

    def validate_for(self, page_count: int) -> None:
        for start, end, _ in self.phases:
            if end > page_count:
                raise InvalidConfig(f"phase range [{start}, {end}) outside {page_count} pages")

    def with_seed(self, seed: int) -> "WorkloadSpec":
        return WorkloadSpec(self.kind, self.write_fraction, self.ops_per_second, seed,
                            self.zipf_s, self.phases, self.content_pool)


@lru_cache(maxsize=8192)
def page_content(seed: int, key: int) -> bytes:
    """Deterministic non-zero page content for a written value."""
    d = hashlib.blake2b(
        (seed % 2**64).to_bytes(8, "little") + key.to_bytes(8, "little"),
        digest_size=32, person=b"vmstream-write",
    ).digest()
    return d * (PAGE_SIZE // 32)


@lru_cache(maxsize=16)
def _zipf_cdf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    cdf = np.cumsum(w)
    return cdf / cdf[-1]


class OpStream:
    """Infinite, randomly addressable op sequence for one workload.

    Ops are generated in fixed blocks seeded by ``(seed, block)``, so any
    window of the stream is reproducible on its own and chunked generation
    matches one-shot generation exactly.
    """

    def __init__(self, spec: WorkloadSpec, page_count: int) -> None:
        spec.validate_for(page_count)
        self.spec = spec
        self.page_count = page_count
        self.period_us = 1_000_000.0 / spec.ops_per_second
        self._cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        if spec.kind == "phased":
            durs = np.array([d for _, _, d in spec.phases], dtype=np.float64)
            self._phase_ends = np.cumsum(durs)
            self._phase_start = np.array([s for s, _, _ in spec.phases], dtype=np.int64)
            self._phase_width = np.array([e - s for s, e, _ in spec.phases], dtype=np.int64)

    def time_us(self, k: int) -> int:
        return int(k * self.period_us + 0.5)

    def count_until(self, t_us: float) -> int:
        """Number of ops whose time is strictly below ``t_us``."""
        if t_us <= 0:
            return 0
        n = int(t_us / self.period_us) + 2
        while n > 0 and self.time_us(n - 1) >= t_us:
            n -= 1
        return n

    def block(self, b: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        got = self._cache.get(b)
        if got is not None:
            return got
        spec, n, B = self.spec, self.page_count, TRACE_BLOCK
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed % 2**64, b])))
        k = np.arange(b * B, (b + 1) * B, dtype=np.int64)
        if spec.kind == "sequential":
            pages = k % n
        elif spec.kind == "uniform":
            pages = rng.integers(0, n, B, dtype=np.int64)
        elif spec.kind == "hotspot":
            pages = np.searchsorted(_zipf_cdf(n, spec.zipf_s), rng.random(B), side="right")
            pages = np.minimum(pages, n - 1).astype(np.int64)
        else:
            t_s = (k * self.period_us + 0.5).astype(np.int64) / 1e6
            cycle = self._phase_ends[-1]
            idx = np.searchsorted(self._phase_ends, np.mod(t_s, cycle), side="right")
            idx = np.minimum(idx, len(self._phase_ends) - 1)
            u = rng.random(B)
            pages = self._phase_start[idx] + (u * self._phase_width[idx]).astype(np.int64)
        if spec.write_fraction <= 0.0:
            writes = np.zeros(B, dtype=bool)
        elif spec.write_fraction >= 1.0:
            writes = np.ones(B, dtype=bool)
        else:
            writes = rng.random(B) < spec.write_fraction
        if spec.content_pool:
            keys = rng.integers(0, spec.content_pool, B, dtype=np.int64)
        else:
            keys = k
        if len(self._cache) >= 4:
            self._cache.pop(next(iter(self._cache)))
        self._cache[b] = (pages, writes, keys)
        return pages, writes, keys

    def op(self, k: int) -> tuple[int, bool, int]:
        pages, writes, keys = self.block(k // TRACE_BLOCK)
        i = k % TRACE_BLOCK
        return int(pages[i]), bool(writes[i]), int(keys[i])

    def content(self, key: int) -> bytes:
        return page_content(self.spec.seed, key)

    def window(self, start: int, stop: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pages, write flags and content keys for ops ``[start, stop)``."""
        if stop <= start:
            e = np.zeros(0, dtype=np.int64)
            return e, np.zeros(0, dtype=bool), e
        parts = []
        for b in range(start // TRACE_BLOCK, (stop - 1) // TRACE_BLOCK + 1):
            pages, writes, keys = self.block(b)
            lo = max(start - b * TRACE_BLOCK, 0)
            hi = min(stop - b * TRACE_BLOCK, TRACE_BLOCK)
            parts.append((pages[lo:hi], writes[lo:hi], keys[lo:hi]))
        return tuple(np.concatenate(x) for x in zip(*parts))  # type: ignore[return-value]


class TraceOp(NamedTuple):
    t: int
    page: int
    op: str  # "R" or "W"
    written: bytes | None


@dataclass
class AccessTrace:
    """Columnar access trace; iterate for ``TraceOp`` records."""

    t_us: np.ndarray
    pages: np.ndarray
    writes: np.ndarray
    keys: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.pages)

    def __getitem__(self, i: int) -> TraceOp:
        w = bool(self.writes[i])
        return TraceOp(int(self.t_us[i]), int(self.pages[i]), "W" if w else "R",
                       page_content(self.seed, int(self.keys[i])) if w else None)

    def __iter__(self) -> Iterator[TraceOp]:
        for i in range(len(self)):
            yield self[i]

    @property
    def write_count(self) -> int:
        return int(np.count_nonzero(self.writes))


def workload_trace(spec: WorkloadSpec, page_count: int, start_op: int, count: int) -> AccessTrace:
    stream = OpStream(spec, page_count)
    pages, writes, keys = stream.window(start_op, start_op + count)
    t = (np.arange(start_op, start_op + count, dtype=np.int64) * stream.period_us + 0.5).astype(np.int64)
    return AccessTrace(t, pages, writes, keys, spec.seed)


# -- guests ------------------------------------------------------------------


def vcpu_blob(vm_id: str, size: int = DEFAULT_VCPU_BYTES) -> bytes:
    return hashlib.shake_256(b"vcpu:" + vm_id.encode("utf-8")).digest(size)


@dataclass
class GuestVm:
    vm_id: str
    vcpu_state: bytes
    space: AddressSpace
    workload: WorkloadSpec
    identity: IdentityRecord
    booted_at: int = 0
    disk: dict[int, bytes] = field(default_factory=dict)
    disk_page_count: int = 0
    image_id: str | None = None  # set for clones
    touch_estimate: float = 1.0
    ops_done: int = 0
    host_id: str | None = None
    live_at: int = 0  # virtual time the vCPU starts executing
    runtime: object = field(default=None, repr=False, compare=False)  # owning Cloud

    @property
    def is_clone(self) -> bool:
        return self.image_id is not None


def create_vm(
    page_count: int = DEFAULT_PAGE_COUNT,
    workload: WorkloadSpec | None = None,
    identity: IdentityRecord | None = None,
    *,
    vm_id: str | None = None,
    vcpu_bytes: int = DEFAULT_VCPU_BYTES,
    store: PageStore | None = None,
    disk_page_count: int = 0,
    disk: dict[int, bytes] | None = None,
    booted_at: int = 0,
) -> GuestVm:
    """Fresh VM: every page Zero, vCPU blob derived from the VM id."""
    if page_count <= 0:
        raise InvalidConfig(f"page_count must be positive, got {page_count}")
    workload = workload or WorkloadSpec()
    workload.validate_for(page_count)
    if identity is None:
        name = vm_id or "vm0"
        identity = IdentityRecord(name, f"net-{name}")
    if not identity.hostname:
        raise InvalidConfig("hostname must be non-empty")
    vm_id = vm_id or identity.hostname
    return GuestVm(
        vm_id=vm_id,
        vcpu_state=vcpu_blob(vm_id, vcpu_bytes),
        space=AddressSpace(page_count, store),
        workload=workload,
        identity=identity,
        booted_at=booted_at,
        disk=dict(disk or {}),
        disk_page_count=disk_page_count,
    )


def synthetic_disk(seed: int, used_pages: int) -> dict[int, bytes]:
    """Sparse disk contents: the first ``used_pages`` pages hold data."""
    return {p: page_content(seed ^ 0x5EED_D15C, p) for p in range(used_pages)}


def generate_trace(vm: GuestVm, duration: float) -> AccessTrace:
    if duration < 0:
        raise InvalidConfig("duration must be >= 0")
    n = int(round(duration * vm.workload.ops_per_second))
    return workload_trace(vm.workload, vm.space.page_count, 0, n)


@dataclass(frozen=True)
class ApplyReport:
    reads: int
    writes: int
    faults: int


FaultHandler = Callable[[AddressSpace, int], None]


def _fault(space: AddressSpace, page: int, handler: FaultHandler | None) -> None:
    if handler is None:
        raise StreamUnavailable(f"page {page} is Remote and no fault handler is set")
    try:
        handler(space, page)
    except StreamUnavailable:
        raise
    except Exception as exc:
        raise StreamUnavailable(f"fault handler failed on page {page}: {exc}") from exc
    if space.kind[page] == K_REMOTE:
        raise StreamUnavailable(f"fault handler left page {page} Remote")


def apply_trace(space: AddressSpace, trace: AccessTrace, fault_handler: FaultHandler | None = None) -> ApplyReport:
    """Replay a trace against a space, faulting Remote pages through the handler."""
    reads = writes = faults = 0
    kind = space.kind
    seed = trace.seed
    for page, w, key in zip(trace.pages.tolist(), trace.writes.tolist(), trace.keys.tolist()):
        if kind[page] == K_REMOTE:
            faults += 1
            _fault(space, page, fault_handler)
        if w:
            space.write(page, page_content(seed, key))
            writes += 1
        else:
            space.read(page)
            reads += 1
    return ApplyReport(reads, writes, faults)


__all__ = [
    "Kind", "K_ZERO", "K_REMOTE", "K_SHARED", "K_PRIVATE", "Zero", "Remote", "Shared", "Private", "PageState", "PageFault", "AddressSpace",
    "WorkloadSpec", "OpStream", "AccessTrace", "TraceOp", "GuestVm", "ApplyReport",
    "create_vm", "generate_trace", "apply_trace", "workload_trace", "page_content",
    "vcpu_blob", "synthetic_disk", "DEFAULT_PAGE_COUNT", "DEFAULT_VCPU_BYTES",
]
