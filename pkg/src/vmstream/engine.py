"""Deterministic discrete-event loop with integer-microsecond time.

Events dispatch in ``(time, sequence)`` order; the sequence number is the
insertion order, so ties break the same way on every run.
"""

from __future__ import annotations

import heapq
from typing import Any, Callable


class Event:
    __slots__ = ("time", "seq", "fn", "args", "cancelled")

    def __init__(self, time: int, seq: int, fn: Callable[..., Any], args: tuple) -> None:
        self.time, self.seq, self.fn, self.args = time, seq, fn, args
        self.cancelled = False

    def __lt__(self, other: "Event") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    def __init__(self) -> None:
        self.now = 0
        self._heap: list[Event] = []
        self._seq = 0
        self.dispatched = 0

    def schedule(self, at: int, fn: Callable[..., Any], *args: Any) -> Event:
        at = int(at)
        if at < self.now:
            raise ValueError(f"cannot schedule at {at} before now={self.now}")
        ev = Event(at, self._seq, fn, args)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def call_soon(self, fn: Callable[..., Any], *args: Any) -> Event:
        return self.schedule(self.now, fn, *args)

    def peek_time(self) -> int | None:
        heap = self._heap
        while heap and heap[0].cancelled:
            heapq.heappop(heap)
        return heap[0].time if heap else None

    def step(self) -> bool:
        heap = self._heap
        while heap:
            ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            self.now = ev.time
            self.dispatched += 1
            ev.fn(*ev.args)
            return True
        return False

    def run(self, until: int | None = None) -> None:
        """Dispatch events up to and including ``until`` (all if None)."""
        while True:
            t = self.peek_time()
            if t is None or (until is not None and t > until):
                break
            self.step()
        if until is not None and until > self.now:
            self.now = until

    def run_until(self, done: Callable[[], bool], limit: int | None = None) -> bool:
        """Dispatch until ``done()`` holds; False if events ran out first."""
        while not done():
            t = self.peek_time()
            if t is None or (limit is not None and t > limit):
                return done()
            self.step()
        return True

    def __len__(self) -> int:
        return sum(1 for e in self._heap if not e.cancelled)
