"""``zerocast-bench``: run a measurement suite and write a CSV dataset."""

import argparse
import logging
import sys

from zerocast.bench import stats
from zerocast.bench.load import calibrate
from zerocast.bench.suites import (
    DEFAULT_SIZES,
    ExperimentConfig,
    run_bridge_suite,
    run_latency_suite,
    run_load_suite,
)


def _size(text):
    text = text.strip().upper()
    for suffix, mult in (("KIB", 1024), ("MIB", 1 << 20), ("K", 1024), ("M", 1 << 20), ("B", 1)):
        if text.endswith(suffix):
            return int(float(text[: -len(suffix)]) * mult)
    return int(text)


def _list(conv):
    return lambda text: tuple(conv(x) for x in text.split(",") if x)


def build_parser():
    ap = argparse.ArgumentParser(prog="zerocast-bench", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, default_transports):
        p.add_argument("--sizes", type=_list(_size), default=DEFAULT_SIZES, help="comma list, e.g. 1K,1M")
        p.add_argument("--count", type=int, default=1000)
        p.add_argument("--period-ms", type=float, default=100.0)
        p.add_argument("--warmup", type=int, default=10, help="leading samples excluded per cell")
        p.add_argument("--transports", type=_list(str), default=default_transports)
        p.add_argument("--out", default="results.csv")
        p.add_argument("--broker", default=None, help="existing broker socket; default starts a private one")
        p.add_argument("--fifo", action="store_true", help="run subscriber callback threads under SCHED_FIFO")

    common(sub.add_parser("latency", help="latency vs message size"), ("zerocopy", "baseline"))
    p = sub.add_parser("load", help="latency stability under generated CPU load")
    common(p, ("zerocopy", "baseline"))
    p.add_argument("--loads", type=_list(int), default=(0, 30, 60, 90))
    p.add_argument("--size", type=_size, default=100 * 1024, help="fixed message size")
    p.add_argument("--no-fifo", dest="fifo", action="store_false", help="keep default scheduling for callback threads")
    p.set_defaults(fifo=True)
    common(sub.add_parser("bridge", help="bridge overhead per route"), ())

    p = sub.add_parser("calibrate", help="check the load generator against OS CPU accounting")
    p.add_argument("--load", type=int, default=50)
    p.add_argument("--seconds", type=float, default=3.0)

    p = sub.add_parser("summarize", help="statistics table from a CSV")
    p.add_argument("csv")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(asctime)s %(levelname)s %(message)s")

    if args.command == "calibrate":
        got = calibrate(args.load, args.seconds)
        print(f"target={args.load}% measured={got:.1f}%")
        return 0
    if args.command == "summarize":
        samples, comments = stats.read_csv(args.csv)
        for c in comments:
            print(f"# {c}")
        print(stats.format_table(stats.summarize(samples)))
        return 0

    config = ExperimentConfig(
        sizes=args.sizes, count=args.count, period_ms=args.period_ms, warmup_excluded=args.warmup,
        transports=args.transports or ("zerocopy", "baseline"), broker=args.broker, fifo=args.fifo,
    )
    extra = []
    if args.command == "latency":
        data = run_latency_suite(config)
    elif args.command == "load":
        config.loads = args.loads
        config.load_size = args.size
        data, cv = run_load_suite(config)
        extra = [f"cv {t} load={ld}: {v:.4f}" for (t, ld), v in sorted(cv.items())]
    else:
        data, overhead = run_bridge_suite(config)
        extra = [f"overhead {route} size={size}: {ns / 1000:.1f} us" for (route, size), ns in sorted(overhead.items())]

    stats.write_csv(args.out, data.samples, data.comments())
    print(stats.format_table(stats.summarize(data.samples)))
    for line in data.comments() + extra:
        print(line)
    print(f"wrote {len(data.samples)} samples to {args.out}")
    return 1 if data.incomplete else 0


if __name__ == "__main__":
    sys.exit(main())
