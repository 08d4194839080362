import math
import random

import numpy as np
import pytest

from vmstream.cloud import Cloud, CloudConfig
from vmstream.errors import InvalidConfig, MigrationAborted, PlacementError, StreamUnavailable
from vmstream.guest import K_REMOTE, WorkloadSpec
from vmstream.host import GIB, HostSpec
from vmstream.migration import (
    MigrationParams, migrate_postcopy, migrate_precopy, migrate_stopcopy, start_migration,
)
from vmstream.pages import PAGE_SIZE
from vmstream.reference import migration_setup
from vmstream.wire import DirtyBitmap, VcpuTransfer, frame_size

from helpers import image_cloud
from oracles import precopy_rounds


def snapshot_memory(vm):
    def resolve(p):
        s = vm.space.source_for(p)
        return s.lookup(p)[1] or bytes(PAGE_SIZE)
    return vm.space.materialize(resolve)


def run_mode(mode, cloud, vm, params=None, capture=True):
    """Migrate v1 to h1, freezing the guest at resume so memory is comparable."""
    runner = cloud.runners.get(vm.vm_id)
    seen = {"mem": None}

    def on_pause(v):
        if capture:
            seen["mem"] = snapshot_memory(v)

    params = params or MigrationParams(mode=mode)
    fn = {"precopy": migrate_precopy, "postcopy": migrate_postcopy, "stopcopy": migrate_stopcopy}[mode]
    rep = fn(vm, "h0", "h1", params,
             on_pause=on_pause,
             on_resume=lambda v: runner and runner.stop())
    return rep, seen["mem"]


def test_paused_workload_single_round():
    cloud, vm = migration_setup(page_count=2048, nic_bps=1e9, dirty_fraction=0.0)
    rep, _ = run_mode("precopy", cloud, vm)
    assert rep.rounds == 1
    vcpu = frame_size(VcpuTransfer(vm.vm_id, vm.vcpu_state))
    assert rep.downtime_us == cloud.net.transfer_time_us("h0", "h1", vcpu)


def test_dirty_faster_than_link_hits_max_rounds():
    nic = 1e9
    link_pps = nic / 8 / PAGE_SIZE
    cloud, vm = migration_setup(page_count=4096, nic_bps=nic, dirty_fraction=1.5)
    residual = {}
    params = MigrationParams(max_rounds=5, stop_threshold_pages=64)
    runner = cloud.runners[vm.vm_id]
    rep = migrate_precopy(vm, "h0", "h1", params,
                          on_pause=lambda v: residual.setdefault("n", len(v.space.dirty)),
                          on_resume=lambda v: runner.stop())
    expected = precopy_rounds(4096, 1.5 * link_pps, link_pps, 64, 5)
    assert rep.rounds == expected == 5
    # stop-and-copy moved the whole residual dirty set while paused
    assert residual["n"] > 64
    assert rep.downtime_us >= residual["n"] * PAGE_SIZE * 8 / nic * 1e6


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("mode", ["precopy", "postcopy", "stopcopy"])
def test_dst_memory_equals_pause_copy(seed, mode):
    rng = random.Random(seed)
    cloud, vm = migration_setup(page_count=rng.choice([512, 1024, 2048]), nic_bps=1e9,
                                dirty_fraction=rng.choice([0.0, 0.05, 0.3]), pool=64, seed=seed,
                                resident_fraction=rng.choice([0.3, 1.0]))
    rep, at_pause = run_mode(mode, cloud, vm)
    assert vm.host_id == "h1"
    assert snapshot_memory(vm) == at_pause
    assert cloud.host("h0").store.unique_pages == 0  # source fully retired


@pytest.mark.parametrize("mode", ["precopy", "postcopy", "stopcopy"])
def test_clone_migration_preserves_memory(mode):
    cloud, m, oracle = image_cloud(256, seed=4, hosts=3)
    vm = cloud.start_clone(m.image_id, "h1", vm_id="c")
    for p in range(0, 256, 3):
        cloud.read_page("c", p)
    vm.space.write(10, b"\x77" * PAGE_SIZE)
    before = snapshot_memory(vm)
    fn = {"precopy": migrate_precopy, "postcopy": migrate_postcopy, "stopcopy": migrate_stopcopy}[mode]
    fn(vm, "h1", "h2")
    assert snapshot_memory(vm) == before
    assert vm.space.source is not None
    # untouched pages still stream from the image after the move
    assert (vm.space.kind == K_REMOTE).any()


def test_postcopy_downtime_independent_of_size():
    small, vs = migration_setup(page_count=65536, dirty_fraction=0.0)
    big, vb = migration_setup(page_count=4 * GIB // PAGE_SIZE, dirty_fraction=0.0, resident_fraction=1 / 16)
    r1, _ = run_mode("postcopy", small, vs, capture=False)
    r2, _ = run_mode("postcopy", big, vb, capture=False)
    assert r1.downtime_us == r2.downtime_us


def test_postcopy_moves_each_page_once():
    cloud, vm = migration_setup(page_count=4096, nic_bps=1e9, dirty_fraction=0.0, pool=4096)
    resident = len(vm.space.resident_pages())
    c0 = cloud.meter.content_pages_by_vm[vm.vm_id]
    rep, _ = run_mode("postcopy", cloud, vm)
    moved = cloud.meter.content_pages_by_vm[vm.vm_id] - c0
    assert moved <= resident
    vcpu = frame_size(VcpuTransfer(vm.vm_id, vm.vcpu_state))
    bitmap = frame_size(DirtyBitmap.from_pages(vm.vm_id, 4096, []))
    assert rep.bytes_transferred <= resident * PAGE_SIZE * 1.05 + vcpu + bitmap + 4096


def test_stopcopy_empty_vm_is_vcpu_only():
    cloud = Cloud([HostSpec("h0"), HostSpec("h1")])
    vm = cloud.spawn_vm("h0", 1024, vm_id="v1")
    rep = migrate_stopcopy(vm, "h0", "h1")
    vcpu = frame_size(VcpuTransfer("v1", vm.vcpu_state))
    assert rep.downtime_us == cloud.net.transfer_time_us("h0", "h1", vcpu)
    assert rep.rounds == 0


def test_stopcopy_equals_single_round_infinite_threshold():
    a_cloud, a = migration_setup(page_count=2048, nic_bps=1e9, dirty_fraction=0.1, seed=3)
    b_cloud, b = migration_setup(page_count=2048, nic_bps=1e9, dirty_fraction=0.1, seed=3)
    ra, mem_a = run_mode("stopcopy", a_cloud, a)
    rb, mem_b = run_mode("precopy", b_cloud, b, MigrationParams(max_rounds=1, stop_threshold_pages=math.inf))
    assert (ra.downtime_us, ra.bytes_transferred, ra.total_us) == (rb.downtime_us, rb.bytes_transferred, rb.total_us)
    assert mem_a == mem_b


def test_downtime_ordering_small():
    out = {}
    for mode in ("stopcopy", "precopy", "postcopy"):
        cloud, vm = migration_setup(page_count=8192, nic_bps=2e9, dirty_fraction=0.1)
        out[mode], _ = run_mode(mode, cloud, vm)
    assert out["postcopy"].downtime_us <= out["precopy"].downtime_us <= out["stopcopy"].downtime_us


def test_placement_errors():
    cloud, vm = migration_setup(page_count=256, dirty_fraction=0.0)
    with pytest.raises(PlacementError):
        start_migration(cloud, vm, "h0", MigrationParams())
    m = start_migration(cloud, vm, "h1", MigrationParams())
    with pytest.raises(PlacementError):
        start_migration(cloud, vm, "h1", MigrationParams())
    cloud.run_until(lambda: m.done)
    with pytest.raises(InvalidConfig):
        MigrationParams(mode="teleport")


def test_precopy_failure_leaves_vm_on_source():
    cloud, vm = migration_setup(page_count=2048, nic_bps=1e9, dirty_fraction=0.05)
    before_host = vm.host_id
    m = start_migration(cloud, vm, "h1", MigrationParams())
    cloud.run(cloud.loop.now + 5_000)
    cloud.net.set_down("h1")
    cloud.run_until(lambda: m.done)
    assert isinstance(m.error, StreamUnavailable)
    assert vm.host_id == before_host
    assert cloud.runners[vm.vm_id].state == "running"
    assert cloud.host("h1").store.unique_pages == 0


def test_postcopy_source_loss_aborts():
    cloud, vm = migration_setup(page_count=4096, nic_bps=1e9, dirty_fraction=0.0, pool=4096)
    m = start_migration(cloud, vm, "h1", MigrationParams(mode="postcopy"))
    cloud.run_until(lambda: vm.host_id == "h1")
    cloud.net.set_down("h0")
    cloud.run_until(lambda: m.done)
    assert isinstance(m.error, MigrationAborted)
