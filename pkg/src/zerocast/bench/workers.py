"""Publisher and subscriber processes driven by the bench coordinator.

Run as ``python -m zerocast.bench.workers pub|sub ...``; workers report to
the coordinator with one JSON object per stdout line. The publisher writes
CLOCK_MONOTONIC into ``stamp_ns`` right before each publish call and the
subscriber reads the clock on callback entry, so both ends share one clock.

With ``--fifo`` only the subscriber's callback thread runs under SCHED_FIFO;
the publisher and the rest of the delivery path keep normal scheduling.
"""

import argparse
import json
import os
import sys
import threading
import time

from zerocast.broker.__main__ import set_realtime
from zerocast.client import Context
from zerocast.errors import QueueFull
from zerocast.schema import POINTCLOUD

FIRST_MESSAGE_TIMEOUT = 10.0


def emit(**kw):
    sys.stdout.write(json.dumps(kw) + "\n")
    sys.stdout.flush()


def run_subscriber(args):
    samples = []
    cond = threading.Condition()

    def on_message(msg):
        now = time.monotonic_ns()
        seq, stamp = msg["seq"], msg["stamp_ns"]
        with cond:
            samples.append((seq, now - stamp))
            cond.notify()

    ctx = Context(args.broker)
    prio = "fifo" if args.fifo and set_realtime(args.fifo, ctx.dispatch_thread_id) else "default"
    if args.transport == "zerocopy":
        ctx.create_subscription(args.topic, POINTCLOUD, on_message)
    else:
        ctx.create_baseline_subscription(args.topic, POINTCLOUD, on_message)
    emit(ready=True, prio=prio)

    gap = 10 * args.period_ms / 1000
    complete = True
    with cond:
        timeout = args.start_timeout
        while len(samples) < args.count:
            seen = len(samples)
            cond.wait_for(lambda: len(samples) > seen, timeout)
            if len(samples) == seen:
                complete = False
                break
            timeout = gap
        got = list(samples)
    emit(samples=got, complete=complete)
    ctx.close()


def run_publisher(args):
    ctx = Context(args.broker)
    payload = os.urandom(args.size)
    zero_copy = args.transport == "zerocopy"
    pub = ctx.create_publisher(args.topic, POINTCLOUD) if zero_copy else \
        ctx.create_baseline_publisher(args.topic, POINTCLOUD)
    emit(ready=True)
    sys.stdin.readline()

    period = args.period_ms / 1000
    starts = []
    dropped = 0
    t0 = time.monotonic()
    for i in range(args.count):
        delay = t0 + i * period - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        if zero_copy:
            msg = pub.allocate()
            msg["seq"] = i
            msg["width"] = args.size
            msg["height"] = 1
            if args.size:
                msg.seq("data").extend(payload)
            stamp = time.monotonic_ns()
            msg["stamp_ns"] = stamp
            starts.append(stamp)
            try:
                pub.publish(msg)
            except QueueFull:
                dropped += 1
                msg.discard()
        else:
            value = POINTCLOUD.empty_value()
            value.update(seq=i, width=args.size, height=1, data=payload)
            stamp = time.monotonic_ns()
            value["stamp_ns"] = stamp
            starts.append(stamp)
            pub.publish(value)
    emit(published=args.count - dropped, dropped=dropped,
         intervals_ns=[b - a for a, b in zip(starts, starts[1:])])
    sys.stdin.readline()
    ctx.close()


def main(argv=None):
    ap = argparse.ArgumentParser(prog="python -m zerocast.bench.workers")
    ap.add_argument("role", choices=("pub", "sub"))
    ap.add_argument("--transport", choices=("zerocopy", "baseline"), required=True)
    ap.add_argument("--broker", required=True)
    ap.add_argument("--topic", required=True)
    ap.add_argument("--size", type=int, default=0)
    ap.add_argument("--count", type=int, required=True)
    ap.add_argument("--period-ms", type=float, required=True)
    ap.add_argument("--start-timeout", type=float, default=FIRST_MESSAGE_TIMEOUT,
                    help="seconds to wait for the first message")
    ap.add_argument("--fifo", type=int, default=0,
                    help="SCHED_FIFO priority for the subscriber callback thread, 0 for none")
    args = ap.parse_args(argv)
    (run_publisher if args.role == "pub" else run_subscriber)(args)


if __name__ == "__main__":
    main()
