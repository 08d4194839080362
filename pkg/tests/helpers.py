"""Shared fixtures: a small cloud holding one captured image."""

from __future__ import annotations

import random

from vmstream.cloud import Cloud, CloudConfig
from vmstream.host import GIB, HostSpec
from vmstream.pages import PAGE_SIZE

from oracles import flat_copy


def image_cloud(n: int = 64, seed: int = 0, *, hosts: int = 2, zero_every: int = 5,
                dup_every: int = 7, config: CloudConfig | None = None, ram_gib: float = 16):
    """Cloud with hosts h0..h{k-1}; parent ``p`` on h0 captured as an image.

    The parent is destroyed after capture so clone hosts start cold.  Returns
    (cloud, manifest, oracle bytes of the image).
    """
    rng = random.Random(seed)
    cloud = Cloud([HostSpec(f"h{i}", int(ram_gib * GIB)) for i in range(hosts)], config or CloudConfig())
    parent = cloud.spawn_vm("h0", n, vm_id="p")
    written = {}
    dup = rng.randbytes(PAGE_SIZE)
    for p in range(n):
        if p % zero_every == 0:
            continue
        c = dup if p % dup_every == 0 else rng.randbytes(PAGE_SIZE)
        parent.space.write(p, c)
        written[p] = c
    manifest = cloud.create_image("p")
    cloud.destroy("p")
    cloud.run()
    return cloud, manifest, flat_copy(written, n)
