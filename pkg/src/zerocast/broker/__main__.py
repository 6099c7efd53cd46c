"""``zerocast-broker``: run the broker daemon in the foreground."""

import argparse
import logging
import os
import signal
import sys

from zerocast.broker.server import BrokerServer, default_path
from zerocast.broker.state import BrokerConfig


def set_realtime(priority, tid=0):
    """Best effort SCHED_FIFO for thread ``tid`` (0: the caller); True when granted."""
    try:
        os.sched_setscheduler(tid, os.SCHED_FIFO, os.sched_param(priority))
        return True
    except (PermissionError, OSError, AttributeError):
        return False


def main(argv=None):
    ap = argparse.ArgumentParser(prog="zerocast-broker", description="zero-copy pub/sub broker")
    ap.add_argument("--path", default=default_path(), help="Unix socket path (env ZEROCAST_BROKER)")
    ap.add_argument("--pool-start", type=lambda v: int(v, 0), default=BrokerConfig.pool_start,
                    help="first virtual address of the arena slot pool")
    ap.add_argument("--arena-capacity", type=int, default=BrokerConfig.arena_capacity)
    ap.add_argument("--queue-capacity", type=int, default=BrokerConfig.queue_capacity,
                    help="max unreclaimed entries per publisher")
    ap.add_argument("--max-slots", type=int, default=BrokerConfig.max_slots)
    ap.add_argument("--fifo-priority", type=int, default=0,
                    help="run under SCHED_FIFO at this priority when permitted (0 = off)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    config = BrokerConfig(
        pool_start=args.pool_start,
        arena_capacity=args.arena_capacity,
        slot_stride=2 * args.arena_capacity,
        queue_capacity=args.queue_capacity,
        max_slots=args.max_slots,
    )
    if args.fifo_priority and not set_realtime(args.fifo_priority):
        logging.getLogger("zerocast.broker").warning("SCHED_FIFO not permitted; running at default priority")
    server = BrokerServer(args.path, config)

    def stop(signum, frame):
        server._stop = True
        server._wake()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    server.bind()
    print(f"zerocast-broker listening on {args.path}", file=sys.stderr, flush=True)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
