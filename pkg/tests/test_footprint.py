import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmstream.cloud import Cloud, CloudConfig
from vmstream.errors import InvalidConfig, OvercommitFailure, PlacementError
from vmstream.footprint import Admission, EvictionPolicy, account, admit, enforce
from vmstream.guest import K_REMOTE
from vmstream.host import GIB, Host, HostCache, HostSpec
from vmstream.pages import PAGE_SIZE, PageStore
from vmstream.stream import live_image_start

from helpers import image_cloud
from oracles import unique_hash_walk


def test_two_identical_clones_share():
    cloud, m, _ = image_cloud(64, zero_every=10**9, dup_every=10**9)
    a = live_image_start(m, cloud.host("h1"))
    b = live_image_start(m, cloud.host("h1"))
    for vm in (a, b):
        for p in range(64):
            cloud.read_page(vm.vm_id, p)
    rep = account(cloud.host("h1"))
    w = 63 * PAGE_SIZE  # page 0 is zero
    assert rep.host_physical_bytes == w
    assert sum(v.resident_bytes for v in rep.per_vm.values()) == 2 * w
    assert rep.savings_bytes == w


def test_all_private_vm_saves_nothing():
    cloud = Cloud([HostSpec("h0")])
    vm = cloud.spawn_vm("h0", 32)
    rng = random.Random(0)
    for p in range(32):
        vm.space.write(p, rng.randbytes(PAGE_SIZE))
    rep = account(cloud.host("h0"))
    assert rep.savings_bytes == 0
    assert rep.host_physical_bytes == rep.private_bytes == 32 * PAGE_SIZE


def random_host_state(seed: int):
    """Clones of two images plus a plain VM, with random reads and writes."""
    rng = random.Random(seed)
    cloud, m1, _ = image_cloud(rng.randint(16, 96), seed=seed)
    m2 = None
    if rng.random() < 0.5:
        parent = cloud.spawn_vm("h0", 48, vm_id="p2")
        for p in range(0, 48, 2):
            parent.space.write(p, bytes([rng.randrange(1, 4)]) * PAGE_SIZE)
        m2 = cloud.create_image("p2")
    host = cloud.host("h1")
    plain = cloud.spawn_vm("h1", 16, vm_id="plain")
    for p in range(16):
        if rng.random() < 0.5:
            plain.space.write(p, bytes([rng.randrange(1, 6)]) * PAGE_SIZE)
    for i in range(rng.randint(1, 4)):
        m = m2 if (m2 is not None and rng.random() < 0.4) else m1
        vm = live_image_start(m, host)
        for _ in range(rng.randint(0, 60)):
            p = rng.randrange(vm.space.page_count)
            if rng.random() < 0.3:
                if vm.space.kind[p] == K_REMOTE:
                    cloud.read_page(vm.vm_id, p)
                vm.space.write(p, bytes([rng.randrange(1, 6)]) * PAGE_SIZE)
            else:
                cloud.read_page(vm.vm_id, p)
    cloud.run()
    return cloud, host


def check_account(host: Host):
    rep = account(host)
    spaces = [s for _, s in host.spaces()]
    private, unique_shared, shared_pages = unique_hash_walk(spaces)
    cache_only = sum(1 for d in host.cache if all(d not in s.shared.values() for s in spaces))
    assert rep.private_bytes == private * PAGE_SIZE
    assert rep.unique_shared_bytes == unique_shared * PAGE_SIZE
    assert rep.cache_bytes == cache_only * PAGE_SIZE
    assert rep.host_physical_bytes == (private + unique_shared + cache_only) * PAGE_SIZE
    assert rep.savings_bytes == (shared_pages - unique_shared) * PAGE_SIZE
    assert rep.host_physical_bytes == host.physical_bytes()
    # refcount audit: every store reference is a mapped page or a cache pin
    refs: dict[bytes, int] = {}
    for s in spaces:
        for d in s.shared.values():
            refs[d] = refs.get(d, 0) + 1
    for d in host.cache:
        refs[d] = refs.get(d, 0) + 1
    assert refs == {d: host.store.refcount(d) for d in host.store.digests()}


@pytest.mark.parametrize("seed", range(10))
def test_account_matches_brute_force(seed):
    _, host = random_host_state(seed)
    check_account(host)


def test_under_watermark_no_eviction():
    cloud, m, _ = image_cloud()
    vm = live_image_start(m, cloud.host("h1"))
    cloud.read_page(vm.vm_id, 3)
    assert enforce(cloud.host("h1")).evicted_pages == 0


def test_evict_then_refetch():
    cfg = CloudConfig(prefetch_window=0)
    cloud, m, oracle = image_cloud(200, config=cfg, ram_gib=(256 * PAGE_SIZE) / GIB)
    host = cloud.host("h1")
    vm = live_image_start(m, host)
    for p in range(200):
        cloud.read_page(vm.vm_id, p)
    rep = enforce(host, EvictionPolicy(0.5, 0.25))
    assert rep.evicted_pages > 0 and rep.freed_bytes > 0
    assert host.physical_bytes() <= 0.25 * host.capacity_bytes
    remote = vm.space.remote_pages().tolist()
    p = remote[-1]
    before = cloud.meter.content_pages["demand"]
    cloud.read_page(vm.vm_id, p)
    assert cloud.meter.content_pages["demand"] == before + 1
    src = cloud.server.source(m.image_id)
    assert vm.space.materialize(lambda q: src.lookup(q)[1]) == oracle


def test_overcommit_failure():
    cloud = Cloud([HostSpec("h0", 256 * PAGE_SIZE)])
    host = cloud.host("h0")
    vm = cloud.spawn_vm("h0", 308, touch_estimate=0.1)
    for p in range(308):
        vm.space.write(p, (p + 1).to_bytes(4, "little") * (PAGE_SIZE // 4))
    with pytest.raises(OvercommitFailure):
        enforce(host)
    assert admit(host, 0) is Admission.REJECT


def test_admission_booted_and_cloned():
    host = Host(HostSpec("h0", 16 * GIB))
    cloud = Cloud([])
    cloud.add_host(HostSpec("h0", 16 * GIB))
    four = 4 * GIB // PAGE_SIZE
    for i in range(4):
        cloud.spawn_vm("h0", four, touch_estimate=1.0)
    with pytest.raises(PlacementError):
        cloud.spawn_vm("h0", four, touch_estimate=1.0)
    fresh = Cloud([HostSpec("h1", 16 * GIB)])
    n = 0
    while admit(fresh.host("h1"), 4 * GIB, touch_fraction=0.25) is Admission.ADMIT:
        fresh.spawn_vm("h1", four, touch_estimate=0.25)
        n += 1
    # 16 GiB / (0.25 * 4 GiB) = 16
    assert n == 16 >= 8
    assert admit(host, 0) is Admission.ADMIT


def test_policy_validation():
    with pytest.raises(InvalidConfig):
        EvictionPolicy(0.5, 0.6)


@given(st.lists(st.tuples(st.integers(0, 40), st.booleans()), max_size=200), st.integers(1, 16))
@settings(max_examples=50)
def test_cache_capacity_and_verify(ops, cap_pages):
    store = PageStore()
    cache = HostCache(store, cap_pages * PAGE_SIZE)
    contents = [(i + 1).to_bytes(2, "little") * (PAGE_SIZE // 2) for i in range(41)]
    for i, touch in ops:
        d = store.put_page(contents[i])
        cache.admit(d)
        store.release_page(d)
        if touch:
            cache.touch(d)
        assert cache.bytes <= cache.capacity_bytes
        assert cache.verify()
    assert store.unique_pages == len(cache)
