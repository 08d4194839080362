"""Live migration: iterative pre-copy, post-copy and naive stop-and-copy.

All three run as event-driven state machines on the cloud's clock so the
guest keeps executing (and dirtying pages) whenever it is not paused.

Pre-copy sends every resident page while the guest runs, then re-sends the
pages written during the previous round until the dirty set is small or the
round budget is spent; only that residue and the vCPU move while paused.

Post-copy pauses, moves the vCPU, and resumes on the destination at once.
Every page there starts Remote toward the source host; a bitmap of resident
source pages follows, and a background drain at link rate pulls the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cloud import Cloud, cloud_of
from .errors import InvalidConfig, MigrationAborted, PlacementError, StreamUnavailable
from .footprint import Admission, admit
from .guest import AddressSpace, GuestVm, K_PRIVATE, K_REMOTE, K_SHARED, K_ZERO
from .host import Host
from .pages import PAGE_SIZE, ZERO, hash_page
from .stream import BackgroundStream
from .wire import DirtyBitmap, MigrateCommit, PageReply, VcpuTransfer

MODES = ("precopy", "postcopy", "stopcopy")


@dataclass(frozen=True)
class MigrationParams:
    mode: str = "precopy"
    max_rounds: int = 8
    stop_threshold_pages: float = 64
    batch_pages: int = 256
    drain_budget_bps: float | None = None  # bytes/s for the post-copy drain; None = link rate

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise InvalidConfig(f"unknown migration mode {self.mode!r}")
        if self.max_rounds < 1:
            raise InvalidConfig("max_rounds must be >= 1")
        if self.stop_threshold_pages < 0:
            raise InvalidConfig("stop_threshold_pages must be >= 0")
        if self.batch_pages < 1:
            raise InvalidConfig("batch_pages must be >= 1")


@dataclass(frozen=True)
class MigrationReport:
    vm_id: str
    mode: str
    rounds: int
    bytes_transferred: int
    pages_sent: int
    downtime_us: int
    total_us: int
    started_at: int
    paused_at: int
    resumed_at: int


class MigrationSource:
    """Serves a paused source address space to the destination (post-copy)."""

    purpose = "migration"

    def __init__(self, vm_id: str, space: AddressSpace, node: str) -> None:
        self.key = f"mig:{vm_id}"
        self.space = space
        self.node = node
        self.fallback = space.source

    @property
    def page_count(self) -> int:
        return self.space.page_count

    def lookup(self, page: int) -> tuple[bytes, bytes | None]:
        space = self.space
        k = space.kind[page]
        if k == K_ZERO:
            return ZERO, None
        if k == K_SHARED:
            d = space.shared[page]
            return d, space.store.get_page(d)
        if k == K_PRIVATE:
            c = space.private[page]
            return hash_page(c), c
        if self.fallback is None:
            raise StreamUnavailable(f"{self.key}: page {page} has no backing source")
        return self.fallback.lookup(page)

    def shareable(self, page: int) -> bool:
        return self.space.kind[page] != K_PRIVATE


class Migration:
    """One in-progress migration; ``report`` is set when ``done``."""

    def __init__(self, cloud: Cloud, vm: GuestVm, dst: Host, params: MigrationParams,
                 on_done: Callable[["Migration"], None] | None = None,
                 on_pause: Callable[[GuestVm], None] | None = None,
                 on_resume: Callable[[GuestVm], None] | None = None) -> None:
        self.cloud = cloud
        self.vm = vm
        self.src = cloud.hosts[vm.host_id]
        self.dst = dst
        self.params = params
        self.on_done = on_done
        self.on_pause = on_pause
        self.on_resume = on_resume
        self.runner = cloud.runners.get(vm.vm_id)
        self.rounds = 0
        self.pages_sent = 0
        self.done = False
        self.error: Exception | None = None
        self.report: MigrationReport | None = None
        self.t0 = cloud.loop.now
        self.t_pause = self.t_resume = 0
        self._bytes0 = cloud.meter.by_vm[vm.vm_id]
        self._src_space = vm.space
        self._dst_space: AddressSpace | None = None
        self._to_send: list[int] = []
        self._drain: BackgroundStream | None = None
        self._switched = False

    # -- shared pieces -------------------------------------------------------

    def start(self) -> "Migration":
        if self.params.mode == "postcopy":
            self._post_start()
        else:
            self._pre_start()
        return self

    def _send(self, msg) -> int:
        return self.cloud.net.send(self.src.node, self.dst.node, msg, "migration", self.vm.vm_id)

    def _pause(self) -> None:
        self.t_pause = self.cloud.loop.now
        if self.runner is not None:
            self.runner.pause()
        if self.on_pause is not None:
            self.on_pause(self.vm)

    def _switch(self, dst_space: AddressSpace) -> None:
        """Make the destination copy the VM's live address space."""
        vm, src, dst = self.vm, self.src, self.dst
        dst.transit.pop(f"{vm.vm_id}:in", None)
        src.vms.pop(vm.vm_id, None)
        src.transit[f"{vm.vm_id}:out"] = self._src_space
        self._src_space.dirty = None
        vm.space = dst_space
        vm.host_id = dst.host_id
        dst.vms[vm.vm_id] = vm
        self._switched = True
        self.t_resume = self.cloud.loop.now
        if self.runner is not None:
            self.runner.resume(self.t_resume)
        if self.on_resume is not None:
            self.on_resume(self.vm)

    def _commit(self) -> None:
        try:
            arrival = self.cloud.net.send(self.dst.node, self.src.node, MigrateCommit(self.vm.vm_id),
                                          "migration", self.vm.vm_id)
        except StreamUnavailable:
            arrival = self.cloud.loop.now  # source unreachable: retire locally
        self.cloud.loop.schedule(arrival, self._retire)

    def _retire(self) -> None:
        self.src.transit.pop(f"{self.vm.vm_id}:out", None)
        self._src_space.release_all()
        now = self.cloud.loop.now
        mode = self.params.mode
        self.report = MigrationReport(
            vm_id=self.vm.vm_id,
            mode=mode,
            rounds=0 if mode == "stopcopy" else self.rounds,
            bytes_transferred=self.cloud.meter.by_vm[self.vm.vm_id] - self._bytes0,
            pages_sent=self.pages_sent,
            downtime_us=self.t_resume - self.t_pause,
            total_us=now - self.t0,
            started_at=self.t0,
            paused_at=self.t_pause,
            resumed_at=self.t_resume,
        )
        self._finish(None)

    def _finish(self, error: Exception | None) -> None:
        self.done = True
        self.error = error
        self.cloud.migrating.discard(self.vm.vm_id)
        if self.on_done is not None:
            self.on_done(self)

    def _abort(self, exc: Exception) -> None:
        if self.done:
            return
        vm = self.vm
        if self._drain is not None:
            self._drain.stop()
        if self._switched:
            # the guest already runs on dst but part of its memory died with src
            if self.runner is not None:
                self.runner.fail(exc)
            self.cloud.record("migration_aborted", vm.vm_id, str(exc))
            self._finish(MigrationAborted(f"{vm.vm_id}: source lost mid-drain: {exc}"))
            return
        space = self.dst.transit.pop(f"{vm.vm_id}:in", None)
        if space is not None:
            space.release_all()
        self._src_space.dirty = None
        if self.runner is not None and self.runner.state == "paused":
            self.runner.resume(self.cloud.loop.now)
        self.cloud.record("migration_failed", vm.vm_id, str(exc))
        self._finish(exc)

    # -- pre-copy / stop-and-copy -------------------------------------------

    def _pre_start(self) -> None:
        src_space = self._src_space
        dst_space = AddressSpace(src_space.page_count, self.dst.store, src_space.source)
        remote = src_space.remote_pages()
        if len(remote):
            dst_space.make_remote(remote)
        self.dst.transit[f"{self.vm.vm_id}:in"] = dst_space
        self._dst_space = dst_space
        self._to_send = src_space.resident_pages().tolist()
        threshold = math.inf if self.params.mode == "stopcopy" else self.params.stop_threshold_pages
        self._threshold = threshold
        self._next_round()

    def _next_round(self) -> None:
        if self.done:
            return
        if len(self._to_send) <= self._threshold or self.rounds >= self.params.max_rounds:
            self._stop_and_copy()
            return
        self.rounds += 1
        self._src_space.dirty = set()
        try:
            arrival = self._send_pages(self._to_send)
        except StreamUnavailable as exc:
            self._abort(exc)
            return
        self.cloud.loop.schedule(arrival, self._round_done)

    def _round_done(self) -> None:
        if self.done:
            return
        self._to_send = sorted(self._src_space.dirty)
        self._next_round()

    def _send_pages(self, pages: list[int]) -> int:
        """Ship current contents of ``pages``; returns the last arrival time."""
        src_space, dst_store = self._src_space, self.dst.store
        kind, shared, private = src_space.kind, src_space.shared, src_space.private
        last = self.cloud.loop.now
        B = self.params.batch_pages
        for i in range(0, len(pages), B):
            entries, flags = [], []
            for p in pages[i:i + B]:
                k = kind[p]
                if k == K_PRIVATE:
                    c = private[p]
                    entries.append((p, hash_page(c), c))
                    flags.append(True)
                elif k == K_SHARED:
                    d = shared[p]
                    entries.append((p, d, None if d in dst_store else src_space.store.get_page(d)))
                    flags.append(False)
                elif k == K_ZERO:
                    entries.append((p, ZERO, None))
                    flags.append(False)
                # Remote (evicted at src since it was queued): dst keeps its copy or Remote
            if not entries:
                continue
            reply = PageReply(f"mig:{self.vm.vm_id}", tuple(entries))
            last = self._send(reply)
            self.pages_sent += len(entries)
            self.cloud.loop.schedule(last, self._land, reply, flags)
        return last

    def _land(self, reply: PageReply, flags: list[bool]) -> None:
        if self.done:
            return
        space = self._dst_space
        store = self.dst.store
        for (p, d, c), private in zip(reply.entries, flags):
            if private:
                space.install_private(p, c)
            elif d == ZERO:
                space.install_shared(p, ZERO)
            elif c is not None:
                store.put_page(c)
                space.install_shared(p, d)
                store.release_page(d)
                self.dst.cache.admit(d)
            elif d in store:
                space.install_shared(p, d)
            else:
                space._drop(p)
                space.make_remote(np.array([p]))

    def _stop_and_copy(self) -> None:
        self._pause()
        try:
            self._send_pages(self._to_send)
            arrival = self._send(VcpuTransfer(self.vm.vm_id, self.vm.vcpu_state))
        except StreamUnavailable as exc:
            self._abort(exc)
            return
        self.cloud.loop.schedule(arrival, self._pre_switch)

    def _pre_switch(self) -> None:
        if self.done:
            return
        self._switch(self._dst_space)
        self._commit()

    # -- post-copy -----------------------------------------------------------

    def _post_start(self) -> None:
        self._pause()
        vm = self.vm
        resident = self._src_space.resident_pages()
        try:
            t1 = self._send(VcpuTransfer(vm.vm_id, vm.vcpu_state))
            t2 = self._send(DirtyBitmap.from_pages(vm.vm_id, self._src_space.page_count, resident))
        except StreamUnavailable as exc:
            self._abort(exc)
            return
        self.cloud.loop.schedule(t1, self._post_resume)
        self.cloud.loop.schedule(t2, self._post_bitmap, resident)

    def _post_resume(self) -> None:
        if self.done:
            return
        src_space = self._src_space
        n = src_space.page_count
        space = AddressSpace(n, self.dst.store, src_space.source)
        space.pull = np.ones(n, dtype=bool)
        space.pull_source = MigrationSource(self.vm.vm_id, src_space, self.src.node)
        space.make_remote(np.arange(n, dtype=np.int64))
        self._dst_space = space
        self._switch(space)
        link = self.cloud.net.link(self.src.node, self.dst.node)
        budget = self.params.drain_budget_bps or link.bandwidth_bps / 8
        self._drain = BackgroundStream(
            self.cloud, self.vm, budget, pull_only=True, batch=self.params.batch_pages,
            purpose="migration", on_complete=self._post_drained,
            on_error=lambda _s, exc: self._abort(exc)).start()

    def _post_bitmap(self, resident: np.ndarray) -> None:
        if self.done:
            return
        space = self._dst_space
        mask = np.ones(space.page_count, dtype=bool)
        mask[resident] = False
        mask &= space.pull & (space.kind == K_REMOTE)
        if space.source is not None:
            space.pull[mask] = False  # stays Remote, now toward the image
        else:
            space.kind[mask] = K_ZERO
            space.n_remote -= int(np.count_nonzero(mask))
            space.pull[mask] = False
        if self._drain is not None and not self._drain.done:
            self._drain._schedule(self.cloud.loop.now)

    def _post_drained(self, _stream: BackgroundStream) -> None:
        space = self._dst_space
        space.pull = None
        space.pull_source = None
        self.pages_sent = _stream.fetched
        self._commit()


def start_migration(cloud: Cloud, vm: GuestVm, dst: Host | str, params: MigrationParams,
                    on_done: Callable[[Migration], None] | None = None,
                    on_pause: Callable[[GuestVm], None] | None = None,
                    on_resume: Callable[[GuestVm], None] | None = None) -> Migration:
    dst_host = cloud.host(dst) if isinstance(dst, str) else dst
    if cloud.hosts.get(dst_host.host_id) is not dst_host:
        raise PlacementError(f"{dst_host.host_id} is not part of this cloud")
    if vm.vm_id in cloud.migrating:
        raise PlacementError(f"{vm.vm_id} is already migrating")
    if vm.host_id == dst_host.host_id:
        raise PlacementError(f"{vm.vm_id} already runs on {dst_host.host_id}")
    if admit(dst_host, vm.space.logical_bytes, cloud.config.policy, vm.touch_estimate) is Admission.REJECT:
        raise PlacementError(f"{dst_host.host_id} cannot admit {vm.vm_id}")
    cloud.migrating.add(vm.vm_id)
    return Migration(cloud, vm, dst_host, params, on_done, on_pause, on_resume).start()


def _migrate(vm: GuestVm, src_host, dst_host, params: MigrationParams,
             on_pause: Callable[[GuestVm], None] | None = None,
             on_resume: Callable[[GuestVm], None] | None = None) -> MigrationReport:
    cloud = cloud_of(vm)
    src_id = src_host if isinstance(src_host, str) else src_host.host_id
    cloud.host(src_id)
    if vm.host_id != src_id:
        raise PlacementError(f"{vm.vm_id} is not on {src_id}")
    m = start_migration(cloud, vm, dst_host, params, on_pause=on_pause, on_resume=on_resume)
    cloud.run_until(lambda: m.done)
    if m.error is not None:
        raise m.error
    if m.report is None:
        raise MigrationAborted(f"{vm.vm_id}: migration stalled")
    return m.report


def migrate_precopy(vm: GuestVm, src_host, dst_host, params: MigrationParams | None = None,
                    on_pause: Callable[[GuestVm], None] | None = None,
                    on_resume: Callable[[GuestVm], None] | None = None) -> MigrationReport:
    params = params or MigrationParams()
    return _migrate(vm, src_host, dst_host, _with_mode(params, "precopy"), on_pause, on_resume)


def migrate_postcopy(vm: GuestVm, src_host, dst_host, params: MigrationParams | None = None,
                     on_pause: Callable[[GuestVm], None] | None = None,
                     on_resume: Callable[[GuestVm], None] | None = None) -> MigrationReport:
    params = params or MigrationParams(mode="postcopy")
    return _migrate(vm, src_host, dst_host, _with_mode(params, "postcopy"), on_pause, on_resume)


def migrate_stopcopy(vm: GuestVm, src_host, dst_host, params: MigrationParams | None = None,
                     on_pause: Callable[[GuestVm], None] | None = None,
                     on_resume: Callable[[GuestVm], None] | None = None) -> MigrationReport:
    """Naive baseline: pause, copy every resident page, resume."""
    params = params or MigrationParams(mode="stopcopy")
    return _migrate(vm, src_host, dst_host, _with_mode(params, "stopcopy"), on_pause, on_resume)


def _with_mode(p: MigrationParams, mode: str) -> MigrationParams:
    return MigrationParams(mode, p.max_rounds, p.stop_threshold_pages, p.batch_pages, p.drain_budget_bps)


__all__ = [
    "MigrationParams", "MigrationReport", "MigrationSource", "Migration", "start_migration",
    "migrate_precopy", "migrate_postcopy", "migrate_stopcopy", "MODES",
]
