"""Clone launch and demand-paged memory streaming.

A clone starts thin: every mapped page is Remote and only the vCPU blob
crosses the wire.  A fault on a Remote page sends one ``PageRequest`` for the
page plus a short sequential prefetch window.  The serving side omits the
content of any page whose digest the requesting host already holds
(hash-first), so clones of one image on one host pull each distinct page
over the wire once.

Fetches are event-driven: a request reserves the link, the server answers at
the request's arrival time using the host's store as it is at that moment,
and the reply is installed when it lands.  Concurrent faults on the same
``(source, page)`` on one host share a single in-flight fetch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Mapping

import numpy as np

from .errors import (CorruptImage, InvalidConfig, InvalidPage, ProtocolError,
                     StreamUnavailable, UnknownHost)
from .guest import GuestVm, K_REMOTE, WorkloadSpec
from .host import Host
from .pages import PAGE_SIZE, ZERO, IdentityRecord, LiveImageManifest, PageStore, hash_page
from .snapshot import ImageSource
from .wire import PageReply, PageRequest, VcpuTransfer, coalesce_ranges

if TYPE_CHECKING:
    from .cloud import Cloud

PREFETCH_WINDOW = 8
CLONE_SETUP_US = 50_000
FETCH_RETRIES = 3
RETRY_BACKOFF_US = 10_000
BACKGROUND_BATCH = 32
BACKGROUND_MAX_OUTSTANDING = 4

CloneVm = GuestVm


class ImageServer:
    """Shared-storage side: holds registered images and answers page requests."""

    def __init__(self, store: PageStore | None = None, node: str = "store") -> None:
        self.store = store if store is not None else PageStore("images")
        self.node = node
        self.images: dict[str, LiveImageManifest] = {}
        self._sources: dict[str, ImageSource] = {}

    def register(self, manifest: LiveImageManifest) -> ImageSource:
        if manifest.image_id in self._sources:
            return self._sources[manifest.image_id]
        for d in manifest.unique_digests():
            if d not in self.store:
                raise CorruptImage(f"{manifest.image_id}: page {d.hex()[:12]} missing from store")
        src = ImageSource(manifest, self.store, self.node)
        self.images[manifest.image_id] = manifest
        self._sources[manifest.image_id] = src
        return src

    def source(self, image_id: str) -> ImageSource:
        try:
            return self._sources[image_id]
        except KeyError:
            raise CorruptImage(f"unknown image {image_id}") from None


def serve_from(source, request: PageRequest, cache_view) -> PageReply:
    """Answer ``request`` from any page source, omitting content the requester holds."""
    pages = request.pages()
    n = source.page_count
    entries = []
    for p in pages:
        if not 0 <= p < n:
            raise ProtocolError(f"page {p} outside {request.image_id} ({n} pages)")
        d, content = source.lookup(p)
        if d == ZERO or d in cache_view:
            content = None
        entries.append((p, d, content))
    return PageReply(request.image_id, tuple(entries))


def serve_page_request(server: ImageServer, request: PageRequest, requester_cache_view) -> PageReply:
    return serve_from(server.source(request.image_id), request, requester_cache_view)


@dataclass(frozen=True)
class FetchPlan:
    demand: int
    prefetch: tuple[int, ...]

    @property
    def pages(self) -> tuple[int, ...]:
        return (self.demand,) + self.prefetch


def plan_fetch(space, page: int, window: int = PREFETCH_WINDOW, busy=None) -> FetchPlan:
    """Demand page plus the Remote pages among the next ``window - 1``.

    Prefetch only follows pages served by the same source as the demand page
    and skips pages already being fetched (``busy`` holds ``(key, page)``).
    """
    if window < 0:
        raise InvalidConfig("prefetch window must be >= 0")
    src = space.source_for(page)
    hi = min(page + max(window, 1), space.page_count)
    cand = np.flatnonzero(space.kind[page + 1:hi] == K_REMOTE) + page + 1
    out = []
    for q in cand.tolist():
        if space.source_for(q) is not src:
            continue
        if busy is not None and (src.key, q) in busy:
            continue
        out.append(q)
    return FetchPlan(page, tuple(out))


class Pending:
    """One in-flight PageRequest and everyone waiting on it."""

    __slots__ = ("source", "request", "purpose", "vm_id", "waiters", "callbacks",
                 "done", "error", "issued_at", "attempt")

    def __init__(self, source, pages: list[int], purpose: str, vm_id: str | None) -> None:
        self.source = source
        self.request = PageRequest(source.key, coalesce_ranges(pages))
        self.purpose = purpose
        self.vm_id = vm_id
        self.waiters: dict[int, list] = {}
        self.callbacks: list[Callable[["Pending"], None]] = []
        self.done = False
        self.error: Exception | None = None
        self.issued_at = 0
        self.attempt = 0


class Fetcher:
    """Issues, retries and installs page fetches for all hosts of a cloud."""

    def __init__(self, cloud: "Cloud") -> None:
        self.cloud = cloud

    def fetch(self, host: Host, space, pages: list[int], purpose: str, vm_id: str | None,
              callback: Callable[[Pending], None] | None = None) -> Pending:
        source = space.source_for(pages[0])
        if source is None:
            raise StreamUnavailable(f"page {pages[0]} is Remote with no source")
        pending = Pending(source, pages, purpose, vm_id)
        pending.issued_at = self.cloud.loop.now
        for p in pages:
            pending.waiters[p] = [space]
            host.inflight[(source.key, p)] = pending
        if callback is not None:
            pending.callbacks.append(callback)
        self._attempt(host, pending)
        return pending

    def join(self, host: Host, space, page: int,
             callback: Callable[[Pending], None] | None = None) -> Pending | None:
        """Attach to an in-flight fetch of ``page`` if there is one."""
        source = space.source_for(page)
        pending = host.inflight.get((source.key, page)) if source is not None else None
        if pending is None:
            return None
        # ride along for every page of that reply this space also lacks
        for q, spaces in pending.waiters.items():
            if space not in spaces and space.kind[q] == K_REMOTE and space.source_for(q) is source:
                spaces.append(space)
        if callback is not None:
            pending.callbacks.append(callback)
        return pending

    def _attempt(self, host: Host, pending: Pending) -> None:
        net = self.cloud.net
        try:
            arrival = net.send(host.node, pending.source.node, pending.request,
                               pending.purpose, pending.vm_id)
        except StreamUnavailable as exc:
            self._retry(host, pending, exc)
            return
        self.cloud.loop.schedule(arrival, self._serve, host, pending)

    def _serve(self, host: Host, pending: Pending) -> None:
        net = self.cloud.net
        try:
            if pending.source.node in net.down:
                raise StreamUnavailable(f"{pending.source.node} is down")
            hook = self.cloud.serve_hook
            if hook is not None and isinstance(pending.source, ImageSource):
                reply = hook(pending.source, pending.request, host.store)
            else:
                reply = serve_from(pending.source, pending.request, host.store)
            arrival = net.send(pending.source.node, host.node, reply, pending.purpose, pending.vm_id)
        except StreamUnavailable as exc:
            self._retry(host, pending, exc)
            return
        self.cloud.loop.schedule(arrival, self._install, host, pending, reply)

    def _retry(self, host: Host, pending: Pending, exc: Exception) -> None:
        if pending.attempt >= FETCH_RETRIES:
            self._finish(host, pending, StreamUnavailable(
                f"{pending.request.image_id}: gave up after {FETCH_RETRIES} retries: {exc}"))
            return
        pending.attempt += 1
        self.cloud.loop.schedule(self.cloud.loop.now + RETRY_BACKOFF_US, self._attempt, host, pending)

    def _install(self, host: Host, pending: Pending, reply: PageReply) -> None:
        now = self.cloud.loop.now
        store = host.store
        source = pending.source
        shareable = getattr(source, "shareable", None)
        for p, d, content in reply.entries:
            if content is not None and hash_page(content) != d:
                self._finish(host, pending, ProtocolError(f"page {p}: content does not match digest"))
                return
            temp = False
            if d != ZERO and d not in store:
                if content is None:
                    continue  # evicted since the server looked; the guest will fault again
                store.put_page(content)
                temp = True
            private = shareable is not None and not shareable(p)
            for space in pending.waiters.get(p, ()):
                if space.kind[p] != K_REMOTE or space.source_for(p) is not source:
                    continue
                if private:
                    space.install_private(p, store.get_page(d))
                    if space.pull is not None:
                        space.pull[p] = False
                else:
                    space.install(p, d)
            if d != ZERO:
                host.last_use[d] = now
                if not private:
                    host.cache.admit(d, content)
            if temp:
                store.release_page(d)
        self._finish(host, pending, None)

    def _finish(self, host: Host, pending: Pending, error: Exception | None) -> None:
        key = pending.source.key
        for p in pending.waiters:
            if host.inflight.get((key, p)) is pending:
                del host.inflight[(key, p)]
        pending.done = True
        pending.error = error
        for cb in pending.callbacks:
            cb(pending)


def demand_fault(cloud: "Cloud", host: Host, vm: GuestVm, page: int,
                 callback: Callable[[Pending], None] | None = None,
                 window: int | None = None) -> tuple[FetchPlan | None, Pending]:
    """Start (or join) the fetch that resolves ``page``; returns immediately."""
    space = vm.space
    joined = cloud.fetcher.join(host, space, page, callback)
    if joined is not None:
        return None, joined
    if window is None:
        window = cloud.config.prefetch_window
    plan = plan_fetch(space, page, window, host.inflight)
    pending = cloud.fetcher.fetch(host, space, list(plan.pages), "demand", vm.vm_id, callback)
    return plan, pending


def _resolve_host(host) -> tuple["Cloud", Host]:
    cloud = getattr(host, "cloud", None)
    if cloud is None or cloud.hosts.get(host.host_id) is not host:
        raise UnknownHost(getattr(host, "host_id", str(host)))
    return cloud, host


def handle_fault(clone: GuestVm, page: int, window: int | None = None) -> FetchPlan:
    """Synchronously stream in ``page`` (plus prefetch) for ``clone``."""
    from .cloud import cloud_of  # local: cloud imports this module

    cloud = cloud_of(clone)
    host = cloud.host(clone.host_id)
    if not 0 <= page < clone.space.page_count:
        raise InvalidPage(f"page {page} out of range")
    if clone.space.kind[page] != K_REMOTE:
        raise InvalidPage(f"page {page} is not Remote")
    plan, pending = demand_fault(cloud, host, clone, page, window=window)
    cloud.loop.run_until(lambda: pending.done)
    if pending.error is not None:
        raise pending.error
    return plan if plan is not None else FetchPlan(page, ())


def live_image_start(manifest: LiveImageManifest, host: Host,
                     identity_overrides: Mapping[str, str] | None = None, *,
                     vm_id: str | None = None, workload: WorkloadSpec | None = None,
                     touch_estimate: float | None = None) -> GuestVm:
    """Launch a thin clone of ``manifest`` on ``host``.

    The clone is runnable as soon as its vCPU blob arrives plus a fixed setup
    cost; see ``GuestVm.live_at``.  No page content moves until it faults.
    """
    cloud, host = _resolve_host(host)
    source = cloud.server.source(manifest.image_id)
    overrides = dict(identity_overrides or {})
    unknown = set(overrides) - {"hostname", "net_id"}
    if unknown:
        raise InvalidConfig(f"unknown identity fields {sorted(unknown)}")
    identity = IdentityRecord(overrides.get("hostname", manifest.identity.hostname),
                              overrides.get("net_id", manifest.identity.net_id))
    if not identity.hostname:
        raise InvalidConfig("hostname must be non-empty")
    vm_id = vm_id or cloud.next_vm_id(identity.hostname)
    if touch_estimate is None:
        touch_estimate = cloud.config.policy.expected_touch_fraction
    cloud.check_admission(host, manifest.memory_page_count * PAGE_SIZE, touch_estimate)

    from .guest import AddressSpace

    space = AddressSpace(manifest.memory_page_count, host.store, source)
    if manifest.memory_map:
        space.make_remote(np.fromiter(manifest.memory_map.keys(), dtype=np.int64,
                                      count=len(manifest.memory_map)))
    vm = GuestVm(
        vm_id=vm_id,
        vcpu_state=manifest.vcpu_state,
        space=space,
        workload=workload or WorkloadSpec(),
        identity=identity,
        booted_at=cloud.loop.now,
        disk_page_count=manifest.disk_page_count,
        image_id=manifest.image_id,
        touch_estimate=touch_estimate,
    )
    vm.workload.validate_for(space.page_count)
    cloud.attach(vm, host)
    arrival = cloud.net.send(cloud.server.node, host.node, VcpuTransfer(vm_id, vm.vcpu_state),
                             "vcpu", vm_id)
    vm.live_at = arrival + cloud.config.clone_setup_us
    cloud.record("clone_start", vm_id, manifest.image_id)
    return vm


class BackgroundStream:
    """Paced lowest-page-first fetching of a VM's outstanding Remote pages.

    ``budget_bps`` is in bytes of page content per second; batches are spaced
    so that content arrives no faster than the budget.  With ``pull_only``
    set it drains only pages owed by a migration source.
    """

    def __init__(self, cloud: "Cloud", vm: GuestVm, budget_bps: float, *,
                 pull_only: bool = False, batch: int = BACKGROUND_BATCH,
                 purpose: str = "background",
                 on_complete: Callable[["BackgroundStream"], None] | None = None,
                 on_error: Callable[["BackgroundStream", Exception], None] | None = None) -> None:
        if budget_bps < 0:
            raise InvalidConfig("budget must be >= 0")
        self.cloud = cloud
        self.vm = vm
        self.host_id = vm.host_id
        self.budget_bps = float(budget_bps)
        self.pull_only = pull_only
        self.batch = batch
        self.purpose = purpose
        self.on_complete = on_complete
        self.on_error = on_error
        self.events: list[tuple[int, int]] = []  # (time_us, pages fetched so far)
        self.fetched = 0
        self.cursor = 0
        self.outstanding = 0
        self.done = False
        self.stopped = False
        self.error: Exception | None = None
        self.completed_at: int | None = None
        self._next_allowed = 0
        self._tick_ev = None

    def start(self) -> "BackgroundStream":
        if self.budget_bps > 0:
            self._schedule(self.cloud.loop.now)
        return self

    def stop(self) -> None:
        self.stopped = True
        if self._tick_ev is not None:
            self._tick_ev.cancel()
            self._tick_ev = None

    def _schedule(self, at: int) -> None:
        if self._tick_ev is None and not self.stopped and not self.done:
            self._tick_ev = self.cloud.loop.schedule(max(at, self.cloud.loop.now), self._tick)

    def _mask(self, lo: int, hi: int) -> np.ndarray:
        space = self.vm.space
        m = space.kind[lo:hi] == K_REMOTE
        if space.pull is not None:
            m &= space.pull[lo:hi] if self.pull_only else ~space.pull[lo:hi]
        elif self.pull_only:
            m[:] = False
        return m

    def remaining(self) -> int:
        return int(np.count_nonzero(self._mask(0, self.vm.space.page_count)))

    def _next_batch(self) -> list[int]:
        space = self.vm.space
        host = self.cloud.hosts[self.host_id]
        n = space.page_count
        out: list[int] = []
        for wrapped in (False, True):
            if wrapped:
                self.cursor = 0
            while self.cursor < n and len(out) < self.batch:
                hi = min(self.cursor + 4096, n)
                for p in (np.flatnonzero(self._mask(self.cursor, hi)) + self.cursor).tolist():
                    src = space.source_for(p)
                    if (src.key, p) in host.inflight:
                        continue
                    if out and space.source_for(out[0]) is not src:
                        break
                    out.append(p)
                    if len(out) == self.batch:
                        break
                self.cursor = out[-1] + 1 if len(out) == self.batch else hi
            if out:
                break
        return out

    def _tick(self) -> None:
        self._tick_ev = None
        if self.stopped or self.done:
            return
        vm = self.vm
        if vm.host_id != self.host_id:
            self.stop()
            return
        loop = self.cloud.loop
        if self.outstanding >= BACKGROUND_MAX_OUTSTANDING:
            return  # resumed by the next reply
        pages = self._next_batch()
        if not pages:
            if self.remaining() == 0:
                self._complete()
            # otherwise everything left is in flight elsewhere; replies re-tick
            return
        host = self.cloud.hosts[self.host_id]
        self.outstanding += 1
        try:
            self.cloud.fetcher.fetch(host, vm.space, pages, self.purpose, vm.vm_id, self._on_reply)
        except StreamUnavailable as exc:
            self._fail(exc)
            return
        gap = int(-(-len(pages) * PAGE_SIZE * 1_000_000 // self.budget_bps))
        self._next_allowed = loop.now + gap
        self._schedule(self._next_allowed)

    def _on_reply(self, pending: Pending) -> None:
        self.outstanding -= 1
        if pending.error is not None:
            self._fail(pending.error)
            return
        self.fetched += len(pending.waiters)
        self.events.append((self.cloud.loop.now, self.fetched))
        self._schedule(max(self._next_allowed, self.cloud.loop.now))

    def _fail(self, exc: Exception) -> None:
        if self.done or self.stopped:
            return
        self.error = exc
        self.stop()
        if self.on_error is not None:
            self.on_error(self, exc)

    def _complete(self) -> None:
        self.done = True
        self.completed_at = self.cloud.loop.now
        self.events.append((self.completed_at, self.fetched))
        space = self.vm.space
        if not self.pull_only and space.n_remote == 0 and space.pull is None:
            space.source = None  # detached: nothing left to stream
        if self.on_complete is not None:
            self.on_complete(self)


def background_stream(clone: GuestVm, budget_bytes_per_second: float) -> BackgroundStream:
    """Start background streaming for ``clone``; progress lands in ``.events``."""
    from .cloud import cloud_of

    cloud = cloud_of(clone)
    return BackgroundStream(cloud, clone, budget_bytes_per_second).start()


__all__ = [
    "ImageServer", "FetchPlan", "Pending", "Fetcher", "BackgroundStream", "CloneVm",
    "serve_page_request", "serve_from", "plan_fetch", "demand_fault", "handle_fault",
    "live_image_start", "background_stream", "PREFETCH_WINDOW", "CLONE_SETUP_US",
    "FETCH_RETRIES", "RETRY_BACKOFF_US",
]
