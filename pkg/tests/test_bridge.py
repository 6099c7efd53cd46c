import json
import os
import time

import pytest

from zerocast import POINTCLOUD, Context
from zerocast.bridge import Bridge, BridgeConfig, should_relay


def test_should_relay():
    assert should_relay(5, {1, 2})
    assert not should_relay(2, {1, 2})


def test_bad_direction(broker):
    with pytest.raises(ValueError):
        Bridge(BridgeConfig("t", direction="sideways", broker_path=broker.path))


def wait_until(pred, timeout=10):
    deadline = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > deadline:
            return False
        time.sleep(0.01)
    return True


def make_value(i, data):
    v = POINTCLOUD.empty_value()
    v.update(seq=i, stamp_ns=1000 + i, width=len(data), height=1, data=data)
    return v


def test_relays_both_ways_without_loops(broker):
    bridge = Bridge(BridgeConfig("pc", broker_path=broker.path))
    zc_got, bl_got = [], []
    ctx = Context(broker.path)
    try:
        ctx.create_subscription("pc", POINTCLOUD, lambda m: zc_got.append(
            (m.publisher_id, {n: m[n] for n in POINTCLOUD.fixed_names} | {"data": bytes(m.seq("data"))})))
        ctx.create_baseline_subscription("pc", POINTCLOUD, lambda m: bl_got.append((m.origin_id, m.value)))
        zc = ctx.create_publisher("pc", POINTCLOUD)
        bl = ctx.create_baseline_publisher("pc", POINTCLOUD)

        a = make_value(1, os.urandom(5000))
        loan = zc.allocate()
        for n in POINTCLOUD.fixed_names:
            loan[n] = a[n]
        loan.seq("data").extend(a["data"])
        zc.publish(loan)
        b = make_value(2, os.urandom(7000))
        bl.publish(b)

        assert wait_until(lambda: len(zc_got) == 2 and len(bl_got) == 2)
        time.sleep(0.3)
        # each message seen once natively and once through the bridge, never again
        assert sorted((o, v["seq"]) for o, v in zc_got) == sorted([(zc.publisher_id, 1), (bridge.zc_pub.publisher_id, 2)])
        assert sorted((o, v["seq"]) for o, v in bl_got) == sorted([(bl.origin_id, 2), (bridge.bl_pub.origin_id, 1)])
        assert dict((v["seq"], v) for _, v in zc_got) == {1: a, 2: b}
        assert dict((v["seq"], v) for _, v in bl_got) == {1: a, 2: b}
        assert bridge.suppressed == 2
        assert (bridge.relayed_to_baseline, bridge.relayed_to_zc) == (1, 1)
    finally:
        ctx.close()
        bridge.close()


def test_arena_exhaustion_drops_and_counts(broker):
    from zerocast.errors import OutOfArenaMemory

    bridge = Bridge(BridgeConfig("pc", direction="baseline-to-zc", broker_path=broker.path))
    ctx = Context(broker.path)
    try:
        hog = []
        with pytest.raises(OutOfArenaMemory):
            while True:
                hog.append(bridge.zc_pub.arena.alloc(1 << 20))
        bl = ctx.create_baseline_publisher("pc", POINTCLOUD)
        bl.publish(make_value(1, os.urandom(2 << 20)))
        assert wait_until(lambda: bridge.dropped == 1)
        for a in hog:
            bridge.zc_pub.arena.dealloc(a)
        bl.publish(make_value(2, os.urandom(1000)))
        assert wait_until(lambda: bridge.relayed_to_zc == 1)
    finally:
        ctx.close()
        bridge.close()


def test_bridge_process_exits_nonzero_on_broker_loss(tmp_path, child):
    from zerocast.broker.server import BrokerServer
    from zerocast.broker.state import BrokerConfig

    server = BrokerServer(str(tmp_path / "b.sock"), BrokerConfig(pool_start=0x0e00_0000_0000)).start_in_thread()
    br = child("bridge", server.path, "pc", "both")
    # the baseline subscription is the bridge's last registration
    assert wait_until(lambda: json.loads(server.snapshot())["topics"].get("pc", {}).get("baseline_subscribers"))
    server.shutdown()
    assert br.wait() == 1
