"""Relay a topic between the zero-copy transport and the copying baseline.

The bridge is an ordinary participant on both transports. Each relayed
message is rebuilt on the other side, so it costs one extra copy. Messages
that the bridge itself injected are recognised by origin and never relayed
back, which keeps a bidirectional bridge from looping.
"""

import argparse
import logging
import signal
import sys
import threading
import time
from dataclasses import dataclass

from zerocast import schema as schemas
from zerocast.broker.server import default_path
from zerocast.client import Context
from zerocast.errors import OutOfArenaMemory, QueueFull, ZerocastError

log = logging.getLogger("zerocast.bridge")

DIRECTIONS = ("both", "zc-to-baseline", "baseline-to-zc")

# how long a relay waits for zero-copy subscribers to free queue slots
QUEUE_FULL_PATIENCE = 2.0


@dataclass
class BridgeConfig:
    topic: str
    schema: schemas.Schema = schemas.POINTCLOUD
    direction: str = "both"
    broker_path: str = None


def should_relay(origin, own_ids):
    """False for messages this bridge put on the bus itself."""
    return origin not in own_ids


class Bridge:
    def __init__(self, config, on_broker_lost=None):
        if config.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        self.config = config
        self.relayed_to_baseline = 0
        self.relayed_to_zc = 0
        self._suppressed = 0
        self._subs = []
        self.dropped = 0
        self.own_ids = set()
        self.ctx = Context(config.broker_path, on_broker_lost=on_broker_lost, name="bridge")
        topic, schema = config.topic, config.schema
        self.zc_pub = self.bl_pub = None
        if config.direction in ("both", "baseline-to-zc"):
            self.zc_pub = self.ctx.create_publisher(topic, schema)
            self.own_ids.add(self.zc_pub.publisher_id)
        if config.direction in ("both", "zc-to-baseline"):
            self.bl_pub = self.ctx.create_baseline_publisher(topic, schema)
            self.own_ids.add(self.bl_pub.origin_id)
        # our own publications come back to us; the client releases them
        # before they reach the callback queue
        if self.bl_pub is not None:
            self._subs.append(self.ctx.create_subscription(topic, schema, self._from_zero_copy, ignore=self.own_ids))
        if self.zc_pub is not None:
            self._subs.append(
                self.ctx.create_baseline_subscription(topic, schema, self._from_baseline, ignore=self.own_ids))
        log.info("bridge up topic=%s direction=%s", topic, config.direction)

    @property
    def suppressed(self):
        return self._suppressed + sum(s.ignored for s in self._subs)

    def _from_zero_copy(self, msg):
        if not should_relay(msg.publisher_id, self.own_ids):
            self._suppressed += 1
            return
        schema = self.config.schema
        value = {n: msg[n] for n in schema.fixed_names}
        for n in schema.seq_names:
            value[n] = bytes(msg.seq(n))
        self.bl_pub.publish(value)
        self.relayed_to_baseline += 1

    def _from_baseline(self, msg):
        if not should_relay(msg.origin_id, self.own_ids):
            self._suppressed += 1
            return
        schema = self.config.schema
        loan = None
        try:
            loan = self.zc_pub.allocate()
            for n in schema.fixed_names:
                loan[n] = msg[n]
            for n in schema.seq_names:
                loan.seq(n).extend(msg.seq(n))
        except OutOfArenaMemory:
            self.dropped += 1
            log.warning("arena exhausted; dropping message topic=%s", self.config.topic)
            if loan is not None:
                loan.discard()
            return
        if not self._publish_when_room(loan):
            self.dropped += 1
            loan.discard()
            log.warning("queue stayed full; dropping message topic=%s", self.config.topic)
            return
        self.relayed_to_zc += 1

    def _publish_when_room(self, loan):
        # a full queue drains as subscribers drop handles; the loan stays ours meanwhile
        deadline = time.monotonic() + QUEUE_FULL_PATIENCE
        while True:
            try:
                self.zc_pub.publish(loan)
                return True
            except QueueFull:
                if time.monotonic() >= deadline:
                    return False
                time.sleep(0.0005)

    def close(self):
        self.ctx.close()


def main(argv=None):
    ap = argparse.ArgumentParser(prog="zerocast-bridge", description="relay a topic between transports")
    ap.add_argument("--topic", required=True)
    ap.add_argument("--schema", default="pointcloud")
    ap.add_argument("--direction", choices=DIRECTIONS, default="both")
    ap.add_argument("--broker", default=default_path())
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    lost = threading.Event()
    stop = threading.Event()
    try:
        bridge = Bridge(BridgeConfig(args.topic, schemas.by_name(args.schema), args.direction, args.broker),
                        on_broker_lost=lost.set)
    except (OSError, ZerocastError) as exc:
        log.error("bridge failed to start: %s", exc)
        return 2
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    print("bridge ready", flush=True)
    while not (stop.is_set() or lost.is_set()):
        stop.wait(0.2)
    bridge.close()
    log.info("bridge down relayed_to_baseline=%d relayed_to_zc=%d suppressed=%d dropped=%d",
             bridge.relayed_to_baseline, bridge.relayed_to_zc, bridge.suppressed, bridge.dropped)
    if lost.is_set() and not stop.is_set():
        log.error("lost the broker; exiting")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
