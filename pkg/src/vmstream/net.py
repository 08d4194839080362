"""Link model and wire-byte accounting.

A transfer of ``b`` bytes costs ``latency + b / bandwidth``.  Each ordered
node pair is a FIFO pipe: a message starts serializing when the previous one
on the same pair has finished, and latency overlaps.  Link bandwidth is the
slower of the two endpoint NICs.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

from .engine import EventLoop
from .errors import StreamUnavailable, UnknownHost
from .pages import PAGE_SIZE
from .wire import PageReply, WireMessage, encode, frame_size


class WireMeter:
    """Counts every byte put on the wire, by purpose and by VM.

    With ``verify`` set, each message is also encoded and its real length
    accumulated separately, giving an independent check on ``frame_size``.
    """

    def __init__(self, verify: bool = False) -> None:
        self.verify = verify
        self.total = 0
        self.raw_total = 0
        self.encoded_total = 0
        self.messages = 0
        self.by_purpose: dict[str, int] = defaultdict(int)
        self.by_vm: dict[str, int] = defaultdict(int)
        self.content_pages: dict[str, int] = defaultdict(int)
        self.content_pages_by_vm: dict[str, int] = defaultdict(int)

    def record(self, msg: WireMessage, purpose: str, vm_id: str | None = None) -> int:
        size = frame_size(msg)
        if self.verify:
            self.encoded_total += len(encode(msg))
        self.messages += 1
        self._add(size, purpose, vm_id)
        if isinstance(msg, PageReply):
            n = msg.content_pages
            self.content_pages[purpose] += n
            if vm_id is not None:
                self.content_pages_by_vm[vm_id] += n
        return size

    def record_raw(self, nbytes: int, purpose: str, vm_id: str | None = None) -> int:
        self.raw_total += nbytes
        self._add(nbytes, purpose, vm_id)
        return nbytes

    def _add(self, size: int, purpose: str, vm_id: str | None) -> None:
        self.total += size
        self.by_purpose[purpose] += size
        if vm_id is not None:
            self.by_vm[vm_id] += size

    def content_bytes(self, purpose: str | None = None) -> int:
        if purpose is None:
            return sum(self.content_pages.values()) * PAGE_SIZE
        return self.content_pages[purpose] * PAGE_SIZE


@dataclass
class Link:
    bandwidth_bps: float
    latency_us: int
    busy_until_ns: int = 0
    bytes_sent: int = 0


class Network:
    def __init__(self, loop: EventLoop, meter: WireMeter | None = None, latency_us: int = 500) -> None:
        self.loop = loop
        self.meter = meter or WireMeter()
        self.latency_us = int(latency_us)
        self.nic_bps: dict[str, float] = {}
        self.down: set[str] = set()
        self._links: dict[tuple[str, str], Link] = {}

    def add_node(self, name: str, nic_bps: float) -> None:
        if nic_bps <= 0:
            raise ValueError("bandwidth must be positive")
        self.nic_bps[name] = float(nic_bps)

    def link(self, src: str, dst: str) -> Link:
        key = (src, dst)
        link = self._links.get(key)
        if link is None:
            for n in key:
                if n not in self.nic_bps:
                    raise UnknownHost(n)
            link = Link(min(self.nic_bps[src], self.nic_bps[dst]), self.latency_us)
            self._links[key] = link
        return link

    def set_down(self, node: str, down: bool = True) -> None:
        (self.down.add if down else self.down.discard)(node)

    def transfer_time_us(self, src: str, dst: str, nbytes: int) -> int:
        """Cost of ``nbytes`` on an idle link (no queueing)."""
        link = self.link(src, dst)
        ser_ns = -(-nbytes * 8 * 10**9 // int(link.bandwidth_bps))
        return link.latency_us + -(-ser_ns // 1000)

    def transfer(self, src: str, dst: str, nbytes: int) -> int:
        """Reserve the pipe for ``nbytes`` now; return the arrival time (us)."""
        if src in self.down or dst in self.down:
            raise StreamUnavailable(f"link {src}->{dst} is down")
        if src == dst:
            return self.loop.now
        link = self.link(src, dst)
        start = max(self.loop.now * 1000, link.busy_until_ns)
        ser_ns = -(-nbytes * 8 * 10**9 // int(link.bandwidth_bps))
        link.busy_until_ns = start + ser_ns
        link.bytes_sent += nbytes
        return -(-(start + ser_ns) // 1000) + link.latency_us

    def send(self, src: str, dst: str, msg: WireMessage, purpose: str, vm_id: str | None = None) -> int:
        arrival = self.transfer(src, dst, frame_size(msg))
        self.meter.record(msg, purpose, vm_id)
        return arrival

    def send_raw(self, src: str, dst: str, nbytes: int, purpose: str, vm_id: str | None = None) -> int:
        arrival = self.transfer(src, dst, nbytes)
        self.meter.record_raw(nbytes, purpose, vm_id)
        return arrival
