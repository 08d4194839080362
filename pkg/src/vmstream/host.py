"""Compute hosts: a local page store, a shared read cache and resident VMs."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator

from .errors import InvalidConfig, MissingPage, ProtocolError
from .pages import PAGE_SIZE, ZERO, PageStore, hash_page

if TYPE_CHECKING:
    from .guest import AddressSpace, GuestVm

GIB = 1 << 30


@dataclass(frozen=True)
class HostSpec:
    host_id: str
    ram_capacity_bytes: int = 16 * GIB
    nic_bandwidth_bits_per_s: float = 10e9
    cache_fraction: float = 0.10
    cores: int = 8  # carried for fidelity; CPU is not modeled

    def __post_init__(self) -> None:
        if not self.host_id:
            raise InvalidConfig("host_id must be non-empty")
        if self.ram_capacity_bytes <= 0 or self.nic_bandwidth_bits_per_s <= 0:
            raise InvalidConfig(f"{self.host_id}: capacities must be positive")
        if not 0.0 <= self.cache_fraction <= 1.0:
            raise InvalidConfig(f"{self.host_id}: cache_fraction must be in [0, 1]")
        if self.cores <= 0:
            raise InvalidConfig(f"{self.host_id}: cores must be positive")


class HostCache:
    """LRU set of page digests pinned in the host's page store.

    Each entry holds one reference in ``store``, so cached content survives
    after every VM that used it has let go.
    """

    def __init__(self, store: PageStore, capacity_bytes: int) -> None:
        if capacity_bytes < 0:
            raise InvalidConfig("cache capacity must be >= 0")
        self.store = store
        self.capacity_bytes = int(capacity_bytes)
        self._lru: OrderedDict[bytes, None] = OrderedDict()

    def __contains__(self, digest: object) -> bool:
        return digest in self._lru

    def __len__(self) -> int:
        return len(self._lru)

    def __iter__(self) -> Iterator[bytes]:
        """Digests, least recently used first."""
        return iter(list(self._lru))

    @property
    def bytes(self) -> int:
        return len(self._lru) * PAGE_SIZE

    def admit(self, digest: bytes, content: bytes | None = None) -> bool:
        """Cache ``digest``; ``content`` is needed only if the store lacks it."""
        if digest == ZERO or self.capacity_bytes < PAGE_SIZE:
            return False
        if digest in self._lru:
            self._lru.move_to_end(digest)
            return True
        if digest in self.store:
            self.store.incref(digest)
        elif content is None:
            raise MissingPage(digest.hex())
        elif self.store.put_page(content) != digest:
            self.store.release_page(hash_page(content))
            raise ProtocolError("cached content does not match its digest")
        self._lru[digest] = None
        while len(self._lru) * PAGE_SIZE > self.capacity_bytes:
            old, _ = self._lru.popitem(last=False)
            self.store.release_page(old)
        return True

    def touch(self, digest: bytes) -> None:
        if digest in self._lru:
            self._lru.move_to_end(digest)

    def discard(self, digest: bytes) -> bool:
        if digest not in self._lru:
            return False
        del self._lru[digest]
        self.store.release_page(digest)
        return True

    def verify(self) -> bool:
        return all(hash_page(self.store.get_page(d)) == d for d in self._lru)


class Host:
    def __init__(self, spec: HostSpec) -> None:
        self.spec = spec
        self.host_id = spec.host_id
        self.node = spec.host_id
        self.store = PageStore(spec.host_id)
        self.cache = HostCache(self.store, int(spec.ram_capacity_bytes * spec.cache_fraction))
        self.vms: dict[str, GuestVm] = {}
        # address spaces held by migrations in progress (either end)
        self.transit: dict[str, AddressSpace] = {}
        # (source key, page) -> pending fetch, for coalescing
        self.inflight: dict[tuple[str, int], object] = {}
        self.last_use: dict[bytes, int] = {}
        self.refused = False
        self.cloud = None

    @property
    def capacity_bytes(self) -> int:
        return self.spec.ram_capacity_bytes

    def spaces(self) -> Iterator[tuple[str, "AddressSpace"]]:
        for vm_id, vm in self.vms.items():
            yield vm_id, vm.space
        for vm_id, space in self.transit.items():
            yield vm_id, space

    def private_bytes(self) -> int:
        return sum(len(s.private) for _, s in self.spaces()) * PAGE_SIZE

    def physical_bytes(self) -> int:
        return self.private_bytes() + self.store.unique_pages * PAGE_SIZE

    def __repr__(self) -> str:
        return f"Host({self.host_id!r}, vms={len(self.vms)})"
