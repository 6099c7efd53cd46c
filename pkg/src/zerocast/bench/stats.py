"""Latency datasets: CSV I/O and per-cell summary statistics.

Everything here is a pure function of the rows, so a summary can be
recomputed bit-for-bit from a saved CSV. Percentiles use the nearest-rank
method and the spread is the population standard deviation.
"""

import csv
import math
from dataclasses import dataclass

HEADER = ("transport", "size_bytes", "load_pct", "seq", "latency_ns")
TRANSPORTS = ("zerocopy", "baseline", "bridge_zc_to_baseline", "bridge_baseline_to_zc")


@dataclass(frozen=True)
class Sample:
    transport: str
    size_bytes: int
    load_pct: int
    seq: int
    latency_ns: int

    @property
    def cell(self):
        return self.transport, self.size_bytes, self.load_pct


def percentile(sorted_values, p):
    """Nearest-rank percentile of an already sorted, nonempty sequence."""
    if not sorted_values:
        raise ValueError("empty series")
    rank = max(1, math.ceil(p / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


def describe(values):
    if not values:
        raise ValueError("empty series")
    xs = sorted(values)
    n = len(xs)
    mean = math.fsum(xs) / n
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / n)
    return {
        "n": n,
        "min": xs[0],
        "p50": percentile(xs, 50),
        "p95": percentile(xs, 95),
        "p99": percentile(xs, 99),
        "max": xs[-1],
        "mean": mean,
        "stddev": std,
        "cv": std / mean if mean else 0.0,
    }


def summarize(samples):
    """{(transport, size, load): stats} for every cell present in ``samples``."""
    cells = {}
    for s in samples:
        cells.setdefault(s.cell, []).append(s.latency_ns)
    if not cells:
        raise ValueError("empty dataset")
    return {cell: describe(v) for cell, v in sorted(cells.items())}


def exclude_warmup(pairs, warmup):
    """Drop the first ``warmup`` sequence numbers from (seq, latency) pairs."""
    return [(seq, lat) for seq, lat in pairs if seq >= warmup]


def write_csv(path, samples, comments=()):
    with open(path, "w", newline="") as f:
        for c in comments:
            f.write(f"# {c}\n")
        w = csv.writer(f)
        w.writerow(HEADER)
        for s in samples:
            w.writerow((s.transport, s.size_bytes, s.load_pct, s.seq, s.latency_ns))


def read_csv(path):
    """(samples, comment lines) from a file written by ``write_csv``."""
    comments = []
    rows = []
    with open(path, newline="") as f:
        lines = []
        for line in f:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, None)
    if tuple(header or ()) != HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    for t, size, load, seq, lat in reader:
        rows.append(Sample(t, int(size), int(load), int(seq), int(lat)))
    return rows, comments


def format_table(summary):
    cols = ("n", "min", "p50", "p95", "p99", "max", "mean", "stddev", "cv")
    out = ["transport              size_bytes load  " + " ".join(f"{c:>10}" for c in cols)]
    for (t, size, load), st in summary.items():
        vals = []
        for c in cols:
            v = st[c]
            vals.append(f"{v:>10.4f}" if c == "cv" else f"{v / 1000:>10.1f}" if c != "n" else f"{v:>10d}")
        out.append(f"{t:<22} {size:>10} {load:>4}  " + " ".join(vals))
    out.append("(latencies in microseconds)")
    return "\n".join(out)
