"""Live-image creation: capture a running guest without stopping it for long.

The parent pauses only long enough to copy its vCPU blob and mark every
page copy-on-write.  Each resident page becomes ``Shared`` in the parent,
so a later parent write privatizes the parent's copy and leaves the image
untouched.  Writing the pack to shared storage is background work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingPage, StoreError
from .guest import GuestVm, K_PRIVATE, K_SHARED, K_ZERO
from .pages import PAGE_SIZE, ZERO, LiveImageManifest, PageStore, make_manifest

PAUSE_FIXED_US = 1000
PAUSE_PER_PAGE_US = 0.01
STORE_BANDWIDTH_BPS = 10e9


@dataclass(frozen=True)
class SuspensionReport:
    paused_virtual_us: int
    pages_marked: int
    serialize_background_us: int


@dataclass(eq=False)
class ImageSource:
    """Serves a manifest's pages out of the store that holds them."""

    manifest: LiveImageManifest
    store: PageStore
    node: str = "store"

    @property
    def key(self) -> str:
        return self.manifest.image_id

    def hash_of(self, page: int) -> bytes:
        return self.manifest.memory_hash(page)

    @property
    def page_count(self) -> int:
        return self.manifest.memory_page_count

    def content(self, digest: bytes) -> bytes:
        return self.store.get_page(digest)

    def lookup(self, page: int) -> tuple[bytes, bytes | None]:
        d = self.manifest.memory_hash(page)
        return d, (None if d == ZERO else self.store.get_page(d))


def pause_cost_us(page_count: int, fixed_us: int = PAUSE_FIXED_US,
                  per_page_us: float = PAUSE_PER_PAGE_US) -> int:
    return int(fixed_us + round(per_page_us * page_count))


def live_image_create(
    vm: GuestVm,
    store: PageStore,
    *,
    now_us: int = 0,
    pause_fixed_us: int = PAUSE_FIXED_US,
    pause_per_page_us: float = PAUSE_PER_PAGE_US,
    bandwidth_bps: float = STORE_BANDWIDTH_BPS,
    source_node: str = "store",
) -> tuple[LiveImageManifest, SuspensionReport]:
    """Capture ``vm`` into ``store`` and switch the parent to copy-on-write.

    After the call the parent's resident pages are Shared and its ``source``
    is the new image, so evicted parent pages can be streamed back.
    """
    space = vm.space
    if space.pull is not None and space.pull.any():
        raise StoreError(f"{vm.vm_id}: post-copy pull still in flight")
    memory_map: dict[int, bytes] = {}
    nonzero = np.flatnonzero(space.kind != K_ZERO).tolist()
    try:
        for p in nonzero:
            k = space.kind[p]
            if k == K_PRIVATE:
                content = space.private.pop(p)
                digest = space.store.put_page(content)
                if digest == ZERO:
                    space.store.release_page(ZERO)
                    space.kind[p] = K_ZERO
                    continue
                space.kind[p] = K_SHARED
                space.shared[p] = digest
                store.put_page(content)
            elif k == K_SHARED:
                digest = space.shared[p]
                if digest in store:
                    store.incref(digest)
                else:
                    store.put_page(space.store.get_page(digest))
            else:  # Remote: the page still lives in the parent's own image
                src = space.source_for(p)
                digest = src.hash_of(p)
                if digest == ZERO:
                    continue
                if digest in store:
                    store.incref(digest)
                else:
                    store.put_page(src.content(digest))
            memory_map[p] = digest
        disk_map: dict[int, bytes] = {}
        for p, content in sorted(vm.disk.items()):
            d = store.put_page(content)
            if d != ZERO:
                disk_map[p] = d
    except MissingPage as exc:
        raise StoreError(f"snapshot of {vm.vm_id} failed: {exc}") from exc

    manifest = make_manifest(
        vcpu_state=vm.vcpu_state,
        memory_map=memory_map,
        disk_map=disk_map,
        identity=vm.identity,
        memory_page_count=space.page_count,
        disk_page_count=vm.disk_page_count,
        created_at=now_us,
    )
    space.source = ImageSource(manifest, store, source_node)
    pack_bytes = len(manifest.unique_digests()) * (PAGE_SIZE + 36)
    report = SuspensionReport(
        paused_virtual_us=pause_cost_us(space.page_count, pause_fixed_us, pause_per_page_us),
        pages_marked=space.page_count,
        serialize_background_us=int(round(pack_bytes * 8 / bandwidth_bps * 1e6)),
    )
    return manifest, report


def materialize_image(manifest: LiveImageManifest, store: PageStore) -> bytes:
    """Flat memory contents of an image, page-number order."""
    out = bytearray(manifest.memory_page_count * PAGE_SIZE)
    for p, digest in manifest.memory_map.items():
        out[p * PAGE_SIZE:(p + 1) * PAGE_SIZE] = store.get_page(digest)
    return bytes(out)


__all__ = [
    "SuspensionReport", "ImageSource", "live_image_create", "materialize_image",
    "pause_cost_us", "PAUSE_FIXED_US", "PAUSE_PER_PAGE_US",
]
