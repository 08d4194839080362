"""Host memory accounting, watermark eviction and admission control.

Physical charge on a host is private pages plus one copy of every digest in
the host's page store (shared by any number of VMs, or pinned by the cache).
Eviction only ever drops content that can be streamed back, so it never
changes what a guest observes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import InvalidConfig, OvercommitFailure
from .host import Host
from .pages import PAGE_SIZE


@dataclass(frozen=True)
class VmFootprint:
    logical_bytes: int
    private_bytes: int
    shared_bytes: int

    @property
    def resident_bytes(self) -> int:
        return self.private_bytes + self.shared_bytes


@dataclass(frozen=True)
class FootprintReport:
    host_id: str
    per_vm: dict[str, VmFootprint]
    host_physical_bytes: int
    private_bytes: int
    unique_shared_bytes: int
    cache_bytes: int  # content pinned only by the host cache
    savings_bytes: int
    oversubscription_ratio: float
    capacity_bytes: int


@dataclass(frozen=True)
class EvictionPolicy:
    high_watermark: float = 0.90
    low_watermark: float = 0.80
    expected_touch_fraction: float = 0.25
    enforce_interval_s: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.low_watermark < self.high_watermark <= 1.0:
            raise InvalidConfig("need 0 < low_watermark < high_watermark <= 1")
        if not 0.0 <= self.expected_touch_fraction <= 1.0:
            raise InvalidConfig("expected_touch_fraction must be in [0, 1]")
        if self.enforce_interval_s < 0:
            raise InvalidConfig("enforce_interval_s must be >= 0")


@dataclass(frozen=True)
class EvictionReport:
    evicted_pages: int
    freed_bytes: int


class Admission(Enum):
    ADMIT = "admit"
    REJECT = "reject"


def account(host: Host) -> FootprintReport:
    per_vm: dict[str, VmFootprint] = {}
    shared: set[bytes] = set()
    private = logical = resident = 0
    for vm_id, space in host.spaces():
        fp = VmFootprint(space.logical_bytes, len(space.private) * PAGE_SIZE, len(space.shared) * PAGE_SIZE)
        per_vm[vm_id] = fp
        shared.update(space.shared.values())
        private += fp.private_bytes
        logical += fp.logical_bytes
        resident += fp.resident_bytes
    cache_only = sum(1 for d in host.cache if d not in shared)
    unique_shared = len(shared) * PAGE_SIZE
    return FootprintReport(
        host_id=host.host_id,
        per_vm=per_vm,
        host_physical_bytes=private + unique_shared + cache_only * PAGE_SIZE,
        private_bytes=private,
        unique_shared_bytes=unique_shared,
        cache_bytes=cache_only * PAGE_SIZE,
        savings_bytes=resident - private - unique_shared,
        oversubscription_ratio=logical / host.capacity_bytes,
        capacity_bytes=host.capacity_bytes,
    )


def enforce(host: Host, policy: EvictionPolicy | None = None) -> EvictionReport:
    """Evict clean, refetchable content in LRU order when above the high watermark."""
    policy = policy or EvictionPolicy()
    cap = host.capacity_bytes
    private = host.private_bytes()
    if private > cap:
        host.refused = True
        raise OvercommitFailure(
            f"{host.host_id}: private bytes {private} exceed capacity {cap}")
    physical = private + host.store.unique_pages * PAGE_SIZE
    if physical <= policy.high_watermark * cap:
        return EvictionReport(0, 0)

    refs: dict[bytes, list] = {}
    pinned: set[bytes] = set()
    for _, space in host.spaces():
        refetchable = space.source is not None and space.pull is None
        for p, d in space.shared.items():
            refs.setdefault(d, []).append((space, p))
            if not refetchable:
                pinned.add(d)
    last_use = host.last_use
    candidates = [d for d in host.store.digests() if d not in pinned]
    candidates.sort(key=lambda d: (last_use.get(d, 0), d))

    target = policy.low_watermark * cap
    evicted = freed = 0
    for d in candidates:
        if physical <= target:
            break
        for space, p in refs.get(d, ()):
            space.evict(p)
            evicted += 1
        if host.cache.discard(d):
            evicted += 1
        if d not in host.store:
            physical -= PAGE_SIZE
            freed += PAGE_SIZE
            last_use.pop(d, None)
    return EvictionReport(evicted, freed)


def vm_estimate(logical_bytes: int, touch_fraction: float) -> int:
    return int(logical_bytes * touch_fraction)


def projected_bytes(host: Host) -> int:
    """Committed private footprint: per VM, max(estimate, actual private)."""
    total = 0
    for vm in host.vms.values():
        est = vm_estimate(vm.space.logical_bytes, vm.touch_estimate)
        total += max(est, len(vm.space.private) * PAGE_SIZE)
    for space in host.transit.values():
        total += len(space.private) * PAGE_SIZE
    return total


def admit(host: Host, vm_logical_bytes: int, policy: EvictionPolicy | None = None,
          touch_fraction: float | None = None) -> Admission:
    """Admit iff committed private bytes plus the new VM's estimate fit in RAM.

    ``touch_fraction`` defaults to the policy's expected-touch fraction (the
    right choice for clones); booted VMs pass 1.0.
    """
    policy = policy or EvictionPolicy()
    if touch_fraction is None:
        touch_fraction = policy.expected_touch_fraction
    if host.refused:
        return Admission.REJECT
    projected = projected_bytes(host) + vm_estimate(vm_logical_bytes, touch_fraction)
    return Admission.ADMIT if projected <= host.capacity_bytes else Admission.REJECT


__all__ = [
    "VmFootprint", "FootprintReport", "EvictionPolicy", "EvictionReport", "Admission",
    "account", "enforce", "admit", "projected_bytes", "vm_estimate",
]
