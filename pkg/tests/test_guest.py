import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vmstream.errors import InvalidConfig, StreamUnavailable
from vmstream.guest import (
    K_PRIVATE, K_REMOTE, K_SHARED, K_ZERO, AddressSpace, Private, WorkloadSpec, Zero, apply_trace,
    create_vm, generate_trace, workload_trace,
)
from vmstream.pages import PAGE_SIZE, ZERO_PAGE, IdentityRecord, PageStore
from vmstream.snapshot import live_image_create, materialize_image

from oracles import apply_writes, zipf_weights


def test_create_1gib_vm():
    vm = create_vm(262144, WorkloadSpec("uniform"), IdentityRecord("h1", "n1"))
    assert vm.space.logical_bytes == 1 << 30
    assert np.all(vm.space.kind == K_ZERO)
    assert vm.space.private_pages == 0


def test_create_is_deterministic():
    a = create_vm(16, vm_id="x")
    b = create_vm(16, vm_id="x")
    assert a.vcpu_state == b.vcpu_state


def test_create_zero_pages_rejected():
    with pytest.raises(InvalidConfig):
        create_vm(0)


@pytest.mark.parametrize("bad", [
    dict(kind="nope"), dict(write_fraction=1.5), dict(ops_per_second=0),
    dict(kind="phased"), dict(kind="hotspot", zipf_s=0), dict(content_pool=-1),
])
def test_workload_validation(bad):
    with pytest.raises(InvalidConfig):
        WorkloadSpec(**bad)


def test_phase_outside_memory_rejected():
    with pytest.raises(InvalidConfig):
        create_vm(8, WorkloadSpec("phased", phases=((0, 16, 1.0),)))


def test_sequential_trace():
    vm = create_vm(10, WorkloadSpec("sequential", 0.0, 10.0))
    tr = generate_trace(vm, 1.0)
    assert [op.page for op in tr] == list(range(10))
    assert all(op.op == "R" for op in tr)


@given(st.sampled_from(["sequential", "uniform", "hotspot"]), st.integers(0, 2**32), st.integers(1, 500))
def test_no_writes_without_write_fraction(kind, seed, n):
    tr = workload_trace(WorkloadSpec(kind, 0.0, seed=seed), 64, 0, n)
    assert tr.write_count == 0


def test_trace_length_and_determinism():
    vm = create_vm(100, WorkloadSpec("uniform", 0.3, 1000.0, seed=5))
    a, b = generate_trace(vm, 2.5), generate_trace(vm, 2.5)
    assert len(a) == 2500
    assert list(a) == list(b)


@given(st.integers(0, 20_000), st.integers(0, 9000))
def test_chunked_windows_match_one_shot(start, n):
    spec = WorkloadSpec("uniform", 0.5, seed=3)
    whole = workload_trace(spec, 1000, 0, start + n)
    part = workload_trace(spec, 1000, start, n)
    assert np.array_equal(whole.pages[start:], part.pages)
    assert np.array_equal(whole.writes[start:], part.writes)


def _rank_counts(seed, n, ops):
    tr = workload_trace(WorkloadSpec("hotspot", 0.0, zipf_s=1.0, seed=seed), n, 0, ops)
    return Counter(tr.pages.tolist())


def test_zipf_rank_frequency():
    # 10^5 ops, top-10 ranks within 5% of the closed-form weights (default seed)
    n, ops = 1024, 100_000
    freq = _rank_counts(0, n, ops)
    w = zipf_weights(n, 1.0)
    for rank in range(10):
        expected = w[rank] * ops
        assert abs(freq[rank] - expected) <= 0.05 * expected, rank


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_zipf_rank_frequency_any_seed(seed):
    # the 5% band is ~2 sigma for rank 10 at 10^5 ops; at 10^6 it is ~6 sigma
    n, ops = 1024, 1_000_000
    freq = _rank_counts(seed, n, ops)
    w = zipf_weights(n, 1.0)
    for rank in range(10):
        expected = w[rank] * ops
        assert abs(freq[rank] - expected) <= 0.05 * expected, rank
    # chi-square over top-10 ranks plus the tail bucket, df = 10
    cells = [(freq[r], w[r] * ops) for r in range(10)]
    tail = ops - sum(o for o, _ in cells)
    cells.append((tail, ops * (1 - sum(w[:10]))))
    chi2 = sum((o - e) ** 2 / e for o, e in cells)
    assert chi2 < 35.56  # p = 1e-4 critical value for df = 10


def test_phased_confined_to_working_set():
    spec = WorkloadSpec("phased", 0.0, 100.0, phases=((0, 10, 1.0), (50, 60, 1.0)))
    tr = workload_trace(spec, 64, 0, 400)
    for op in tr:
        phase = int(op.t // 1_000_000) % 2
        lo = 0 if phase == 0 else 50
        assert lo <= op.page < lo + 10


def test_read_zero_then_write_then_read():
    s = AddressSpace(4)
    rep = apply_trace(s, workload_trace(WorkloadSpec("sequential", 0.0), 4, 0, 1))
    assert rep.faults == 0 and s.read(0) == ZERO_PAGE
    c = b"\x42" * PAGE_SIZE
    s.write(1, c)
    assert s.read(1) == c
    assert s.state(1) == Private(c)
    assert s.state(0) == Zero()


def test_remote_without_handler_is_unavailable():
    s = AddressSpace(4)
    s.make_remote(np.array([2]))
    tr = workload_trace(WorkloadSpec("sequential", 0.0), 4, 0, 4)
    with pytest.raises(StreamUnavailable):
        apply_trace(s, tr)


def test_clone_trace_matches_full_copy_oracle():
    rng = random.Random(9)
    n = 256
    parent = create_vm(n, vm_id="p")
    for p in range(0, n, 3):
        parent.space.write(p, rng.randbytes(PAGE_SIZE))
    image_store = PageStore("image")
    manifest, _ = live_image_create(parent, image_store)
    base = materialize_image(manifest, image_store)

    clone = AddressSpace(n, PageStore("host"))
    clone.make_remote(np.arange(n))
    clone.n_remote = n

    def handler(space, page):
        d = manifest.memory_hash(page)
        if d in space.store or d == bytes(32):
            space.install(page, d)
        else:
            space.store.put_page(image_store.get_page(d))
            space.install(page, d)
            space.store.release_page(d)

    spec = WorkloadSpec("uniform", 0.4, seed=21)
    tr = workload_trace(spec, n, 0, 3000)
    rep = apply_trace(clone, tr, handler)
    assert rep.reads + rep.writes == 3000 and rep.faults > 0
    expected = apply_writes(base, [(op.page, op.written) for op in tr if op.op == "W"])
    assert clone.materialize(lambda p: image_store.get_page(manifest.memory_hash(p))) == expected


def test_evict_requires_source():
    s = AddressSpace(2)
    s.install_shared(0, s.store.put_page(b"\x01" * PAGE_SIZE))
    with pytest.raises(ValueError):
        s.evict(0)
