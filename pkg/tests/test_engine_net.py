import pytest
from hypothesis import given, strategies as st

from vmstream.engine import EventLoop
from vmstream.errors import StreamUnavailable, UnknownHost
from vmstream.net import Network, WireMeter
from vmstream.wire import MigrateCommit, frame_size


@given(st.lists(st.integers(0, 1000), max_size=50))
def test_events_run_in_time_then_insertion_order(times):
    loop, seen = EventLoop(), []
    for i, t in enumerate(times):
        loop.schedule(t, seen.append, (t, i))
    loop.run()
    assert seen == sorted(seen)


def test_cancel_and_past_scheduling():
    loop, seen = EventLoop(), []
    ev = loop.schedule(5, seen.append, "x")
    loop.schedule(6, seen.append, "y")
    ev.cancel()
    loop.run()
    assert seen == ["y"] and loop.now == 6
    with pytest.raises(ValueError):
        loop.schedule(1, seen.append, "z")


def test_run_until_horizon():
    loop, seen = EventLoop(), []
    for t in (1, 5, 10):
        loop.schedule(t, seen.append, t)
    loop.run(6)
    assert seen == [1, 5] and loop.now == 6


def test_fifo_link_serializes_transfers():
    loop = EventLoop()
    net = Network(loop, latency_us=100)
    net.add_node("a", 8e6)  # 1 byte per us
    net.add_node("b", 80e6)
    assert net.transfer("a", "b", 1000) == 1000 + 100
    assert net.transfer("a", "b", 500) == 1500 + 100
    # other direction has its own pipe
    assert net.transfer("b", "a", 1000) == 1000 + 100
    assert net.transfer_time_us("a", "b", 10) == 110


def test_down_node_and_unknown_node():
    loop = EventLoop()
    net = Network(loop)
    net.add_node("a", 1e9)
    net.add_node("b", 1e9)
    net.set_down("b")
    with pytest.raises(StreamUnavailable):
        net.transfer("a", "b", 1)
    net.set_down("b", False)
    net.transfer("a", "b", 1)
    with pytest.raises(UnknownHost):
        net.transfer("a", "zz", 1)


def test_meter_verify_mode():
    m = WireMeter(verify=True)
    msg = MigrateCommit("vm")
    m.record(msg, "migration", "vm")
    m.record_raw(100, "boot", "vm")
    assert m.total == frame_size(msg) + 100 == m.encoded_total + m.raw_total
    assert m.by_vm["vm"] == m.total
