import os
import random

import pytest
from hypothesis import given, strategies as st

from vmstream.errors import CorruptImage, MissingPage, StoreError
from vmstream.pages import (
    IMAGE_MAGIC, PAGE_SIZE, ZERO, ZERO_PAGE, IdentityRecord, PageStore, dedup_stats,
    decode_image, encode_image, hash_page, make_manifest, pack_record_count, read_image,
    read_manifest, write_image,
)

from oracles import MultisetStore

pages = st.binary(min_size=PAGE_SIZE, max_size=PAGE_SIZE)
small_pages = st.integers(0, 2**32 - 1).map(lambda x: x.to_bytes(4, "little") * (PAGE_SIZE // 4))


def rand_page(rng):
    return rng.randbytes(PAGE_SIZE)


def test_zero_page_hashes_to_sentinel():
    assert hash_page(bytes(PAGE_SIZE)) == ZERO


def test_identical_pages_share_digest():
    rng = random.Random(1)
    c = rand_page(rng)
    assert hash_page(c) == hash_page(bytes(c))


def test_hash_rejects_wrong_size():
    from vmstream.errors import InvalidPage
    with pytest.raises(InvalidPage):
        hash_page(b"x" * 100)


def test_distinct_pages_distinct_digests():
    rng = random.Random(2)
    seen: dict[bytes, bytes] = {}
    for _ in range(10_000):
        c = rand_page(rng)
        d = hash_page(c)
        if d in seen:
            # only a real collision may share a digest
            assert seen[d] == c
        seen[d] = c
    assert len(seen) == 10_000


def test_put_same_content_twice():
    s = PageStore()
    c = b"\x01" * PAGE_SIZE
    d1, d2 = s.put_page(c), s.put_page(c)
    assert d1 == d2
    assert (s.unique_pages, s.refcount(d1), s.logical_pages) == (1, 2, 2)


def test_put_zero_page_stores_nothing():
    s = PageStore()
    assert s.put_page(ZERO_PAGE) == ZERO
    assert s.unique_pages == 0
    assert s.get_page(ZERO) == ZERO_PAGE


def test_round_trip_1000_pages():
    rng = random.Random(3)
    s = PageStore()
    originals = [rand_page(rng) for _ in range(1000)]
    digests = [s.put_page(bytearray(c)) for c in originals]
    for c, d in zip(originals, digests):
        assert s.get_page(d) == c


def test_get_after_release_is_missing():
    s = PageStore()
    d = s.put_page(b"\x02" * PAGE_SIZE)
    s.release_page(d)
    with pytest.raises(MissingPage):
        s.get_page(d)


def test_release_lifecycle():
    s = PageStore()
    c = b"\x03" * PAGE_SIZE
    d = s.put_page(c)
    s.release_page(d)
    assert s.unique_pages == 0 and s.logical_pages == 0
    s.put_page(c), s.put_page(c)
    s.release_page(d)
    assert s.refcount(d) == 1 and s.get_page(d) == c


def test_release_unknown_is_missing():
    with pytest.raises(MissingPage):
        PageStore().release_page(b"\x07" * 32)


def test_put_release_fuzz_matches_multiset():
    rng = random.Random(4)
    pool = [bytes(PAGE_SIZE)] + [rng.randbytes(8) * (PAGE_SIZE // 8) for _ in range(50)]
    s, oracle = PageStore(), MultisetStore()
    live: list[bytes] = []
    for _ in range(10_000):
        if live and rng.random() < 0.45:
            c = live.pop(rng.randrange(len(live)))
            s.release_page(hash_page(c))
            oracle.release(c)
        else:
            c = rng.choice(pool)
            s.put_page(c)
            oracle.put(c)
            live.append(c)
    assert s.unique_pages == oracle.unique
    assert s.logical_pages == oracle.logical
    for c, n in oracle.c.items():
        assert s.refcount(hash_page(c)) == n


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 7)), max_size=200))
def test_refcounts_never_negative(ops):
    s, held = PageStore(), []
    contents = [bytes([i]) * PAGE_SIZE for i in range(8)]
    for put, i in ops:
        if put or not held:
            held.append(s.put_page(contents[i]))
        else:
            s.release_page(held.pop())
    assert s.total_refs() + s.refcount(ZERO) == len(held)
    assert all(s.refcount(d) > 0 for d in s.digests())


def test_dedup_stats():
    e = dedup_stats(PageStore())
    assert (e.logical_pages, e.unique_pages, e.dedup_ratio) == (0, 0, 0.0)
    s = PageStore()
    for _ in range(10):
        s.put_page(b"\x05" * PAGE_SIZE)
    st_ = dedup_stats(s)
    assert (st_.logical_pages, st_.unique_pages, st_.dedup_ratio) == (10, 1, 10.0)


def _manifest(store, mem, npages, disk=None, ndisk=0, vcpu=b"cpu", ident=("h", "n")):
    mm = {p: store.put_page(c) for p, c in mem.items()}
    dm = {p: store.put_page(c) for p, c in (disk or {}).items()}
    return make_manifest(vcpu_state=vcpu, memory_map=mm, disk_map=dm, identity=IdentityRecord(*ident),
                         memory_page_count=npages, disk_page_count=ndisk)


def test_empty_image_is_header_only(tmp_path):
    s = PageStore()
    m = _manifest(s, {}, 1)
    path = tmp_path / "e.vms"
    write_image(s, m, path)
    data = path.read_bytes()
    assert data.startswith(IMAGE_MAGIC)
    assert pack_record_count(data) == 0


def test_half_zero_image_packs_only_nonzero(tmp_path):
    rng = random.Random(5)
    s = PageStore()
    mem = {p: (bytes(PAGE_SIZE) if p % 2 else rng.randbytes(PAGE_SIZE)) for p in range(1024)}
    m = _manifest(s, mem, 1024)
    path = tmp_path / "h.vms"
    write_image(s, m, path)
    assert pack_record_count(path.read_bytes()) <= 512


@given(st.dictionaries(st.integers(0, 63), small_pages, max_size=20),
       st.dictionaries(st.integers(0, 15), small_pages, max_size=5),
       st.binary(max_size=64), st.text(min_size=1, max_size=10))
def test_image_round_trip(mem, disk, vcpu, hostname):
    s = PageStore()
    m = _manifest(s, mem, 64, disk, 16, vcpu, (hostname, "net"))
    fresh = PageStore()
    back = decode_image(encode_image(s, m), fresh)
    assert back == m
    for d in m.unique_digests():
        assert fresh.get_page(d) == s.get_page(d)


def test_read_image_file_round_trip(tmp_path):
    s = PageStore()
    m = _manifest(s, {3: b"\x09" * PAGE_SIZE}, 8)
    path = tmp_path / "i.vms"
    write_image(s, m, path)
    assert read_manifest(path) == m
    assert read_image(path, PageStore()) == m
    assert not any(p.name.endswith(".tmp") for p in tmp_path.iterdir())


def test_truncated_image_is_corrupt(tmp_path):
    s = PageStore()
    m = _manifest(s, {3: b"\x09" * PAGE_SIZE}, 8)
    data = encode_image(s, m)
    for cut in (4, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptImage):
            decode_image(data[:cut], PageStore())


def test_bad_magic_and_tampered_content_are_corrupt():
    s = PageStore()
    m = _manifest(s, {0: b"\x09" * PAGE_SIZE}, 2)
    data = bytearray(encode_image(s, m))
    with pytest.raises(CorruptImage):
        decode_image(b"NOTANIMG" + bytes(data[8:]), PageStore())
    data[-10] ^= 0xFF
    with pytest.raises(CorruptImage):
        decode_image(bytes(data), PageStore())


def test_manifest_rejects_out_of_range_pages():
    s = PageStore()
    with pytest.raises(StoreError):
        _manifest(s, {9: b"\x01" * PAGE_SIZE}, 8)


def test_missing_image_file_is_corrupt(tmp_path):
    with pytest.raises(CorruptImage):
        read_manifest(tmp_path / "nope.vms")
