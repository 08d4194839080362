"""Independent reference implementations used as test oracles.

Nothing here imports the modules under test beyond plain constants, so a
bug in the package cannot leak into the expected values.
"""

from __future__ import annotations

import hashlib
from collections import Counter

PAGE = 4096


def flat_copy(pages: dict[int, bytes], page_count: int) -> bytes:
    """Full byte copy of a sparse page map."""
    out = bytearray(page_count * PAGE)
    for p, c in pages.items():
        out[p * PAGE:(p + 1) * PAGE] = c
    return bytes(out)


def apply_writes(base: bytes, writes) -> bytes:
    """Apply (page, content) writes to a flat memory copy."""
    out = bytearray(base)
    for p, c in writes:
        out[p * PAGE:(p + 1) * PAGE] = c
    return bytes(out)


class MultisetStore:
    """Reference counter for put/release traffic (zero page excluded)."""

    ZERO = bytes(PAGE)

    def __init__(self) -> None:
        self.c: Counter[bytes] = Counter()
        self.logical = 0

    def put(self, content: bytes) -> None:
        self.logical += 1
        if content != self.ZERO:
            self.c[content] += 1

    def release(self, content: bytes) -> None:
        self.logical -= 1
        if content != self.ZERO:
            self.c[content] -= 1
            if self.c[content] == 0:
                del self.c[content]

    @property
    def unique(self) -> int:
        return len(self.c)


def unique_hash_walk(spaces) -> tuple[int, int, int]:
    """Brute force over every page of every space.

    Returns (private pages, unique shared contents, shared page count) by
    hashing each resident page's bytes directly.
    """
    private = 0
    shared_contents: set[bytes] = set()
    shared_pages = 0
    for space in spaces:
        for p in range(space.page_count):
            k = int(space.kind[p])
            if k == 3:
                private += 1
            elif k == 2:
                shared_pages += 1
                shared_contents.add(hashlib.sha256(space.read(p)).digest())
    return private, len(shared_contents), shared_pages


def zipf_weights(n: int, s: float) -> list[float]:
    """Closed-form normalized Zipf(s) weights for ranks 1..n."""
    h = sum(1.0 / k ** s for k in range(1, n + 1))
    return [1.0 / (k ** s) / h for k in range(1, n + 1)]


def precopy_rounds(mem_pages: int, dirty_pps: float, link_pps: float,
                   threshold: float, max_rounds: int) -> int:
    """Iterative pre-copy round count when pages dirty faster than they copy.

    Round i sends ``d_i`` pages taking ``d_i / link`` seconds, during which
    ``dirty * d_i / link`` pages are re-dirtied (capped at memory size).
    """
    to_send = float(mem_pages)
    rounds = 0
    while True:
        rounds += 1
        duration = to_send / link_pps
        to_send = min(float(mem_pages), dirty_pps * duration)
        if to_send <= threshold or rounds >= max_rounds:
            return rounds
