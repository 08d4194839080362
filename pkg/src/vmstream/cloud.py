"""The simulated cloud: hosts, the image server, the network and running guests.

Everything is driven by one ``EventLoop``.  Guest workloads run inside
``VmRunner`` objects that execute ops in batches up to the next pending
event, so a guest never runs ahead of anything that could affect it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .engine import EventLoop
from .errors import OvercommitFailure, PlacementError, StreamUnavailable, UnknownHost, UnknownVm, InvalidConfig
from .footprint import Admission, EvictionPolicy, account, admit, enforce
from .guest import TRACE_BLOCK, GuestVm, K_REMOTE, K_SHARED, OpStream, WorkloadSpec, create_vm
from .host import Host, HostSpec
from .net import Network, WireMeter
from .pages import PAGE_SIZE, IdentityRecord, LiveImageManifest
from .snapshot import STORE_BANDWIDTH_BPS, live_image_create
from .stream import CLONE_SETUP_US, PREFETCH_WINDOW, BackgroundStream, Fetcher, ImageServer, demand_fault

INF = math.inf
MAX_OPS_PER_WAKE = 65536
DEFAULT_BOOT_DURATION_S = 96.9
DEFAULT_READY_OPS = 100


@dataclass(frozen=True)
class CloudConfig:
    link_latency_us: int = 500
    store_bandwidth_bps: float = STORE_BANDWIDTH_BPS
    prefetch_window: int = PREFETCH_WINDOW
    clone_setup_us: int = CLONE_SETUP_US
    ready_ops: int = DEFAULT_READY_OPS
    boot_duration_s: float = DEFAULT_BOOT_DURATION_S
    background_budget_bps: float = 0.0  # bytes/s of content per clone; 0 disables
    policy: EvictionPolicy = field(default_factory=EvictionPolicy)
    verify_wire: bool = False

    def __post_init__(self) -> None:
        if self.link_latency_us < 0 or self.clone_setup_us < 0:
            raise InvalidConfig("latencies must be >= 0")
        if self.prefetch_window < 0:
            raise InvalidConfig("prefetch_window must be >= 0")
        if self.ready_ops < 0:
            raise InvalidConfig("ready_ops must be >= 0")
        if self.boot_duration_s < 0:
            raise InvalidConfig("boot_duration_s must be >= 0")


def cloud_of(vm: GuestVm) -> "Cloud":
    cloud = vm.runtime
    if cloud is None:
        raise UnknownVm(f"{vm.vm_id} is not placed on any host")
    return cloud


class VmRunner:
    """Executes one guest's workload against the event clock.

    ``origin`` maps op index to virtual time: op ``k`` is due at
    ``origin + stream.time_us(k)``.  Stalls and pauses push ``origin`` later,
    so the guest resumes where it stopped instead of catching up.
    """

    def __init__(self, cloud: "Cloud", vm: GuestVm, start_us: int, *, op_limit: int | None = None,
                 on_ready: Callable[["VmRunner"], None] | None = None,
                 on_done: Callable[["VmRunner"], None] | None = None) -> None:
        self.cloud = cloud
        self.vm = vm
        self.stream = OpStream(vm.workload, vm.space.page_count)
        self.origin = start_us - self.stream.time_us(vm.ops_done)
        self.start_us = start_us
        self.limit = INF if op_limit is None else vm.ops_done + op_limit
        self.ready_ops = cloud.config.ready_ops
        self.on_ready = on_ready
        self.on_done = on_done
        self.state = "running"
        self.executed = 0
        self.faults = 0
        self.stall_us = 0
        self.ready_at: int | None = None
        self.touched: set[int] = set()
        self.error: Exception | None = None
        self._ev = None
        self._waiting = None
        self._stall_start = 0
        self._paused_at = 0
        self._paused_stalled = False
        if self.ready_ops == 0:
            self.ready_at = start_us
        self._ev = cloud.loop.schedule(start_us, self._wake)

    # -- control -------------------------------------------------------------

    def pause(self) -> None:
        if self.state not in ("running", "stalled"):
            return
        if self._ev is not None:
            self._ev.cancel()
            self._ev = None
        self._paused_stalled = self.state == "stalled"
        self._paused_at = self.cloud.loop.now
        self.state = "paused"

    def resume(self, at: int) -> None:
        if self.state != "paused":
            return
        if self._paused_stalled:
            self.origin += at - self._stall_start
        else:
            self.origin += at - self._paused_at
        self._waiting = None
        self.state = "running"
        self._ev = self.cloud.loop.schedule(at, self._wake)

    def stop(self) -> None:
        if self._ev is not None:
            self._ev.cancel()
            self._ev = None
        self._waiting = None
        if self.state not in ("failed", "done"):
            self.state = "stopped"

    def fail(self, exc: Exception) -> None:
        self.stop()
        self.state = "failed"
        self.error = exc
        self.cloud.record("vm_failed", self.vm.vm_id, type(exc).__name__)

    # -- execution -----------------------------------------------------------

    def _wake(self) -> None:
        self._ev = None
        if self.state == "running":
            self._run()

    def _schedule(self, at: int) -> None:
        self._ev = self.cloud.loop.schedule(at, self._wake)

    def _run(self) -> None:
        cloud = self.cloud
        loop = cloud.loop
        now = loop.now
        nxt = loop.peek_time()
        horizon = cloud.until if nxt is None else min(nxt, cloud.until)
        vm = self.vm
        space = vm.space
        kind = space.kind
        shared = space.shared
        last_use = cloud.hosts[vm.host_id].last_use
        stream = self.stream
        period = stream.period_us
        origin = self.origin
        touched = self.touched
        k = vm.ops_done
        budget = MAX_OPS_PER_WAKE
        blk = -1
        pages = writes = keys = None
        while True:
            if k >= self.limit:
                vm.ops_done = k
                self.state = "done"
                if self.on_done is not None:
                    self.on_done(self)
                return
            due = origin + int(k * period + 0.5)
            if due > horizon or budget == 0:
                vm.ops_done = k
                if due < INF:
                    self._schedule(max(due, now))
                return
            b, i = divmod(k, TRACE_BLOCK)
            if b != blk:
                pages, writes, keys = stream.block(b)
                blk = b
            p = int(pages[i])
            ks = kind[p]
            if ks == K_REMOTE:
                vm.ops_done = k
                if due > now:
                    self._schedule(due)
                else:
                    self._fault(p)
                return
            touched.add(p)
            if writes[i]:
                space.write(p, stream.content(int(keys[i])))
            elif ks == K_SHARED:
                last_use[shared[p]] = due
            k += 1
            budget -= 1
            self.executed += 1
            if self.executed == self.ready_ops:
                self.ready_at = due
                if self.on_ready is not None:
                    self.on_ready(self)

    def _fault(self, page: int) -> None:
        cloud = self.cloud
        vm = self.vm
        self.state = "stalled"
        self._stall_start = cloud.loop.now
        self.faults += 1
        try:
            _, pending = demand_fault(cloud, cloud.hosts[vm.host_id], vm, page, self._resume)
        except StreamUnavailable as exc:
            self.fail(exc)
            return
        self._waiting = pending

    def _resume(self, pending) -> None:
        if self.state != "stalled" or pending is not self._waiting:
            return
        self._waiting = None
        if pending.error is not None:
            self.fail(pending.error)
            return
        stall = self.cloud.loop.now - self._stall_start
        self.stall_us += stall
        self.origin += stall
        self.state = "running"
        self._run()


class Cloud:
    """Hosts + image server + network, all on one virtual clock."""

    def __init__(self, hosts: list[HostSpec] | tuple[HostSpec, ...] = (),
                 config: CloudConfig | None = None) -> None:
        self.config = config or CloudConfig()
        self.loop = EventLoop()
        self.meter = WireMeter(verify=self.config.verify_wire)
        self.net = Network(self.loop, self.meter, self.config.link_latency_us)
        self.server = ImageServer()
        self.net.add_node(self.server.node, self.config.store_bandwidth_bps)
        self.fetcher = Fetcher(self)
        self.hosts: dict[str, Host] = {}
        self.vms: dict[str, GuestVm] = {}
        self.runners: dict[str, VmRunner] = {}
        self.streams: dict[str, BackgroundStream] = {}
        self.records: list[tuple[int, str, str, object]] = []
        self.until: float = INF
        self._vm_seq = 0
        self._enforcer = None
        self.migrating: set[str] = set()
        # optional replacement for in-process image serving (live socket mode)
        self.serve_hook = None
        for spec in hosts:
            self.add_host(spec)

    # -- registry ------------------------------------------------------------

    def add_host(self, spec: HostSpec) -> Host:
        if spec.host_id in self.hosts or spec.host_id == self.server.node:
            raise InvalidConfig(f"duplicate host {spec.host_id}")
        host = Host(spec)
        host.cloud = self
        self.hosts[spec.host_id] = host
        self.net.add_node(host.node, spec.nic_bandwidth_bits_per_s)
        return host

    def host(self, host_id: str) -> Host:
        try:
            return self.hosts[host_id]
        except KeyError:
            raise UnknownHost(host_id) from None

    def vm(self, vm_id: str) -> GuestVm:
        try:
            return self.vms[vm_id]
        except KeyError:
            raise UnknownVm(vm_id) from None

    def next_vm_id(self, stem: str) -> str:
        while True:
            self._vm_seq += 1
            vm_id = f"{stem}-{self._vm_seq}"
            if vm_id not in self.vms:
                return vm_id

    def record(self, kind: str, subject: str, value: object, t: int | None = None) -> None:
        self.records.append((self.loop.now if t is None else int(t), kind, subject, value))

    # -- placement -----------------------------------------------------------

    def check_admission(self, host: Host, logical_bytes: int, touch_fraction: float) -> None:
        if admit(host, logical_bytes, self.config.policy, touch_fraction) is Admission.REJECT:
            self.record("admission_reject", host.host_id, logical_bytes)
            raise PlacementError(f"{host.host_id} cannot admit {logical_bytes} more bytes")

    def attach(self, vm: GuestVm, host: Host) -> None:
        if vm.vm_id in self.vms:
            raise InvalidConfig(f"duplicate vm id {vm.vm_id}")
        vm.host_id = host.host_id
        vm.runtime = self
        host.vms[vm.vm_id] = vm
        self.vms[vm.vm_id] = vm
        self.enforce_host(host)

    def destroy(self, vm_id: str) -> None:
        vm = self.vm(vm_id)
        runner = self.runners.pop(vm_id, None)
        if runner is not None:
            runner.stop()
        bg = self.streams.pop(vm_id, None)
        if bg is not None:
            bg.stop()
        vm.space.release_all()
        self.hosts[vm.host_id].vms.pop(vm_id, None)
        del self.vms[vm_id]
        vm.runtime = None

    def enforce_host(self, host: Host) -> None:
        try:
            rep = enforce(host, self.config.policy)
        except OvercommitFailure as exc:
            self.record("overcommit", host.host_id, str(exc))
            return
        if rep.evicted_pages:
            self.record("evicted_pages", host.host_id, rep.evicted_pages)

    def start_enforcer(self) -> None:
        interval = int(self.config.policy.enforce_interval_s * 1_000_000)
        if interval <= 0 or self._enforcer is not None:
            return
        self._enforcer = self.loop.schedule(self.loop.now + interval, self._enforce_tick, interval)

    def _enforce_tick(self, interval: int) -> None:
        self._enforcer = None
        for host in self.hosts.values():
            self.enforce_host(host)
            self.record("host_physical_bytes", host.host_id, host.physical_bytes())
        if self.loop.peek_time() is not None:
            self._enforcer = self.loop.schedule(self.loop.now + interval, self._enforce_tick, interval)

    # -- guests --------------------------------------------------------------

    def spawn_vm(self, host_id: str, page_count: int, workload: WorkloadSpec | None = None, *,
                 vm_id: str | None = None, identity: IdentityRecord | None = None,
                 vcpu_bytes: int = 16384, touch_estimate: float = 1.0,
                 disk_page_count: int = 0) -> GuestVm:
        """Place an already-running VM (no boot cost); for tests and setup."""
        host = self.host(host_id)
        self.check_admission(host, page_count * PAGE_SIZE, touch_estimate)
        vm_id = vm_id or self.next_vm_id("vm")
        vm = create_vm(page_count, workload, identity, vm_id=vm_id, vcpu_bytes=vcpu_bytes,
                       store=host.store, disk_page_count=disk_page_count, booted_at=self.loop.now)
        vm.touch_estimate = touch_estimate
        vm.live_at = self.loop.now
        self.attach(vm, host)
        return vm

    def boot_vm(self, host_id: str, page_count: int, workload: WorkloadSpec | None = None, *,
                vm_id: str | None = None, disk_bytes: int = 0, vcpu_bytes: int = 16384,
                run: bool = True, op_limit: int | None = None) -> GuestVm:
        """Cold boot: transfer the disk image, then a fixed OS boot time."""
        host = self.host(host_id)
        vm = self.spawn_vm(host_id, page_count, workload, vm_id=vm_id, vcpu_bytes=vcpu_bytes,
                           disk_page_count=-(-disk_bytes // PAGE_SIZE))
        t0 = self.loop.now
        arrival = self.net.send_raw(self.server.node, host.node, disk_bytes, "boot", vm.vm_id)
        vm.live_at = arrival + int(round(self.config.boot_duration_s * 1_000_000))
        vm.booted_at = t0
        self.record("boot_start", vm.vm_id, host_id)
        if run:
            self.run_vm(vm.vm_id, op_limit=op_limit, t0=t0)
        return vm

    def run_vm(self, vm_id: str, *, at: int | None = None, op_limit: int | None = None,
               t0: int | None = None) -> VmRunner:
        """Start the workload at ``at`` (default: when the vCPU is live)."""
        vm = self.vm(vm_id)
        start = max(vm.live_at if at is None else at, self.loop.now)
        t0 = self.loop.now if t0 is None else t0

        def ready(r: VmRunner) -> None:
            self.record("startup_latency_us", vm.vm_id, r.ready_at - t0, t=r.ready_at)

        runner = VmRunner(self, vm, start, op_limit=op_limit, on_ready=ready)
        if runner.ready_at is not None:
            ready(runner)
        self.runners[vm_id] = runner
        return runner

    def create_image(self, vm_id: str) -> LiveImageManifest:
        vm = self.vm(vm_id)
        host = self.hosts[vm.host_id]
        runner = self.runners.get(vm_id)
        if runner is not None:
            runner.pause()
        manifest, rep = live_image_create(vm, self.server.store, now_us=self.loop.now,
                                          bandwidth_bps=self.config.store_bandwidth_bps,
                                          source_node=self.server.node)
        self.server.register(manifest)
        pack = len(manifest.unique_digests()) * PAGE_SIZE
        self.net.send_raw(host.node, self.server.node, pack, "image", vm_id)
        if runner is not None:
            runner.resume(self.loop.now + rep.paused_virtual_us)
        self.record("image_pause_us", manifest.image_id, rep.paused_virtual_us)
        return manifest

    def start_clone(self, image_id: str, host_id: str, identity_overrides: dict | None = None, *,
                    vm_id: str | None = None, workload: WorkloadSpec | None = None,
                    run: bool = False, op_limit: int | None = None,
                    background_budget_bps: float | None = None) -> GuestVm:
        from .stream import live_image_start

        manifest = self.server.source(image_id).manifest
        t0 = self.loop.now
        vm = live_image_start(manifest, self.host(host_id), identity_overrides,
                              vm_id=vm_id, workload=workload)
        if run:
            self.run_vm(vm.vm_id, op_limit=op_limit, t0=t0)
        budget = self.config.background_budget_bps if background_budget_bps is None else background_budget_bps
        if budget > 0:
            self.streams[vm.vm_id] = BackgroundStream(self, vm, budget).start()
        return vm

    # -- synchronous helpers ---------------------------------------------------

    def read_page(self, vm_id: str, page: int) -> bytes:
        """Guest read that streams the page in first if needed."""
        from .stream import handle_fault

        vm = self.vm(vm_id)
        for _ in range(8):
            if vm.space.kind[page] != K_REMOTE:
                return vm.space.read(page)
            handle_fault(vm, page)
        raise StreamUnavailable(f"page {page} of {vm_id} kept getting evicted")

    def write_page(self, vm_id: str, page: int, content: bytes) -> None:
        vm = self.vm(vm_id)
        if vm.space.kind[page] == K_REMOTE:
            self.read_page(vm_id, page)
        vm.space.write(page, content)

    def fault_handler(self, vm_id: str):
        """Adapter for ``guest.apply_trace``."""
        def handler(space, page: int) -> None:
            self.read_page(vm_id, page)
        return handler

    def run(self, until: int | None = None) -> None:
        self.until = INF if until is None else until
        try:
            self.loop.run(until)
        finally:
            self.until = INF

    def run_until(self, done: Callable[[], bool], limit: int | None = None) -> bool:
        self.until = INF if limit is None else limit
        try:
            return self.loop.run_until(done, limit)
        finally:
            self.until = INF

    def footprint(self, host_id: str):
        return account(self.host(host_id))


__all__ = ["Cloud", "CloudConfig", "VmRunner", "cloud_of", "DEFAULT_BOOT_DURATION_S"]
