import numpy as np
import pytest

from vmstream.cloud import Cloud, CloudConfig
from vmstream.errors import CorruptImage, InvalidConfig, ProtocolError, StreamUnavailable, UnknownHost
from vmstream.guest import K_REMOTE, K_SHARED, K_ZERO, AddressSpace, WorkloadSpec
from vmstream.host import Host, HostSpec
from vmstream.pages import PAGE_SIZE, ZERO
from vmstream.snapshot import materialize_image
from vmstream.stream import (
    FETCH_RETRIES, ImageServer, background_stream, handle_fault, live_image_start, plan_fetch,
    serve_page_request,
)
from vmstream.wire import PageRequest, VcpuTransfer, frame_size, reply_size

from helpers import image_cloud


def test_thin_start():
    cloud, m, _ = image_cloud()
    before = cloud.meter.total
    vm = live_image_start(m, cloud.host("h1"), vm_id="c")
    assert vm.space.private_pages == 0 and vm.space.shared_pages == 0
    assert cloud.meter.total - before == frame_size(VcpuTransfer("c", m.vcpu_state))
    assert vm.vcpu_state == m.vcpu_state
    assert np.array_equal(np.flatnonzero(vm.space.kind == K_REMOTE), sorted(m.memory_map))
    assert vm.live_at == cloud.loop.now + cloud.net.transfer_time_us("store", "h1",
        frame_size(VcpuTransfer("c", m.vcpu_state))) + cloud.config.clone_setup_us


def test_identity_override():
    cloud, m, _ = image_cloud()
    vm = live_image_start(m, cloud.host("h1"), {"hostname": "c1"})
    assert vm.identity.hostname == "c1"
    assert vm.identity.net_id == m.identity.net_id
    assert m.identity.hostname == "p"


def test_unknown_identity_field_rejected():
    cloud, m, _ = image_cloud()
    with pytest.raises(InvalidConfig):
        live_image_start(m, cloud.host("h1"), {"mac": "x"})


def test_unknown_host_and_image():
    cloud, m, _ = image_cloud()
    with pytest.raises(UnknownHost):
        live_image_start(m, Host(HostSpec("elsewhere")))
    other, m2, _ = image_cloud(seed=9)
    with pytest.raises(CorruptImage):
        live_image_start(m2, cloud.host("h1"))


def test_full_sequential_read_equals_image():
    cloud, m, oracle = image_cloud(200, seed=1)
    vm = live_image_start(m, cloud.host("h1"))
    for p in range(200):
        cloud.read_page(vm.vm_id, p)
    assert vm.space.materialize() == oracle == materialize_image(m, cloud.server.store)
    assert vm.space.n_remote == 0


def test_plan_window():
    space = AddressSpace(32)
    space.make_remote(np.arange(32))
    space.install(9, ZERO)
    space.install(12, ZERO)
    plan = plan_fetch(space, 7, 8)
    assert plan.pages == tuple(p for p in range(7, 15) if p not in (9, 12))
    assert len(plan.prefetch) <= 8
    assert plan_fetch(space, 30, 8).pages == (30, 31)


def test_hash_only_when_cached():
    cloud, m, _ = image_cloud()
    p = next(iter(m.memory_map))
    d = m.memory_hash(p)
    rep = serve_page_request(cloud.server, PageRequest(m.image_id, ((p, p + 1),)), {d})
    assert rep.entries == ((p, d, None),)
    assert frame_size(rep) == reply_size(m.image_id, 0, 1)


def test_zero_page_has_no_content():
    cloud, m, _ = image_cloud()
    rep = serve_page_request(cloud.server, PageRequest(m.image_id, ((0, 1),)), set())
    assert rep.entries == ((0, ZERO, None),)


def test_uncached_reply_size():
    cloud, m, _ = image_cloud(zero_every=10**9, dup_every=10**9)
    rep = serve_page_request(cloud.server, PageRequest(m.image_id, ((3, 8),)), set())
    assert rep.content_pages == 5
    assert frame_size(rep) == reply_size(m.image_id, 5, 0)
    assert frame_size(rep) - reply_size(m.image_id, 0, 5) == 5 * PAGE_SIZE


def test_malformed_requests():
    cloud, m, _ = image_cloud()
    with pytest.raises(ProtocolError):
        serve_page_request(cloud.server, PageRequest(m.image_id, ((5, 2),)), set())
    with pytest.raises(ProtocolError):
        serve_page_request(cloud.server, PageRequest(m.image_id, ((0, 10**6),)), set())


def test_second_clone_served_from_host_cache():
    cloud, m, _ = image_cloud()
    cfg_window = 0
    a = live_image_start(m, cloud.host("h1"))
    b = live_image_start(m, cloud.host("h1"))
    page = 3
    handle_fault(a, page, window=cfg_window)
    after_first = cloud.meter.content_pages["demand"]
    handle_fault(b, page, window=cfg_window)
    assert after_first == 1
    assert cloud.meter.content_pages["demand"] == 1
    assert a.space.read(page) == b.space.read(page)


def test_concurrent_faults_coalesce():
    cloud, m, _ = image_cloud()
    from vmstream.stream import demand_fault
    host = cloud.host("h1")
    a = live_image_start(m, host)
    b = live_image_start(m, host)
    _, pa = demand_fault(cloud, host, a, 3, window=0)
    plan_b, pb = demand_fault(cloud, host, b, 3, window=0)
    cloud.run()
    assert plan_b is None and pa is pb
    assert cloud.meter.content_pages["demand"] == 1
    assert a.space.kind[3] == K_SHARED and b.space.kind[3] == K_SHARED


def test_unreachable_server():
    cloud, m, _ = image_cloud()
    vm = live_image_start(m, cloud.host("h1"))
    cloud.run()
    cloud.net.set_down("store")
    t0 = cloud.loop.now
    with pytest.raises(StreamUnavailable):
        handle_fault(vm, 3)
    assert vm.space.kind[3] == K_REMOTE
    assert cloud.loop.now - t0 >= FETCH_RETRIES * 10_000 - 10_000


def test_background_budget_zero_makes_no_progress():
    cloud, m, oracle = image_cloud()
    vm = live_image_start(m, cloud.host("h1"))
    bg = background_stream(vm, 0)
    cloud.run(cloud.loop.now + 10_000_000)
    assert bg.fetched == 0 and vm.space.n_remote == len(m.memory_map)
    cloud.read_page(vm.vm_id, 3)
    assert vm.space.kind[3] != K_REMOTE


def test_background_completion_time():
    n = 1024
    cloud, m, oracle = image_cloud(n, zero_every=10**9, dup_every=10**9)
    vm = live_image_start(m, cloud.host("h1"))
    cloud.run()
    remote_bytes = vm.space.n_remote * PAGE_SIZE
    budget = 1_000_000.0  # bytes/s
    t0 = cloud.loop.now
    bg = background_stream(vm, budget)
    cloud.run()
    expected = remote_bytes / budget * 1e6
    # one event quantum: a batch gap plus a round trip
    quantum = 32 * PAGE_SIZE / budget * 1e6 + 2_000
    assert abs((bg.completed_at - t0) - expected) <= quantum
    assert vm.space.n_remote == 0 and vm.space.source is None
    assert vm.space.materialize() == oracle
    # detached: no page can fault any more
    from vmstream.errors import InvalidPage
    with pytest.raises(InvalidPage):
        handle_fault(vm, 5)


def test_clone_runs_workload_to_oracle():
    from oracles import apply_writes
    from vmstream.guest import workload_trace
    cloud, m, oracle = image_cloud(128, seed=3)
    wl = WorkloadSpec("uniform", 0.3, 5000.0, seed=4)
    vm = cloud.start_clone(m.image_id, "h1", workload=wl, run=True, op_limit=2000)
    cloud.run()
    tr = workload_trace(wl, 128, 0, 2000)
    expected = apply_writes(oracle, [(op.page, op.written) for op in tr if op.op == "W"])
    src = cloud.server.source(m.image_id)
    assert vm.space.materialize(lambda p: src.lookup(p)[1]) == expected
