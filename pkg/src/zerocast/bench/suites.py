"""Measurement coordinator: broker, worker processes, load and datasets.

Each cell (transport, size, load) gets a fresh topic, a subscriber process,
optionally a bridge process, and a publisher process that starts sending
only once everything downstream is registered.
"""

import contextlib
import json
import logging
import os
import selectors
import socket
import subprocess
import sys
import tempfile
import time
import uuid
from dataclasses import dataclass, field

from zerocast.bench.load import LoadGenerator
from zerocast.bench.stats import Sample, exclude_warmup, summarize

log = logging.getLogger("zerocast.bench")

KiB = 1024
MiB = 1024 * KiB
DEFAULT_SIZES = (1 * KiB, 10 * KiB, 100 * KiB, 1 * MiB)
FIFO_PRIORITY = 10

# measured route -> (publisher transport, subscriber transport, bridge direction)
ROUTES = {
    "zerocopy": ("zerocopy", "zerocopy", None),
    "baseline": ("baseline", "baseline", None),
    "bridge_zc_to_baseline": ("zerocopy", "baseline", "zc-to-baseline"),
    "bridge_baseline_to_zc": ("baseline", "zerocopy", "baseline-to-zc"),
}


@dataclass
class ExperimentConfig:
    sizes: tuple = DEFAULT_SIZES
    count: int = 1000
    period_ms: float = 100.0
    warmup_excluded: int = 10
    loads: tuple = (0, 30, 60, 90)
    transports: tuple = ("zerocopy", "baseline")
    load_size: int = 100 * KiB
    fifo: bool = False
    broker: str = None

    def __post_init__(self):
        if self.count <= self.warmup_excluded:
            raise ValueError("count must exceed the number of excluded warm-up samples")
        if self.period_ms <= 0:
            raise ValueError("period must be positive")
        for t in self.transports:
            if t not in ROUTES:
                raise ValueError(f"unknown transport {t!r}")


@dataclass
class CellResult:
    transport: str
    size: int
    load: int
    samples: list
    complete: bool
    prio: str
    intervals_ns: list = field(default_factory=list)


@dataclass
class Dataset:
    samples: list = field(default_factory=list)
    cells: list = field(default_factory=list)

    @property
    def incomplete(self):
        return [(c.transport, c.size, c.load) for c in self.cells if not c.complete]

    @property
    def prio(self):
        prios = {c.prio for c in self.cells}
        return "fifo" if prios == {"fifo"} else "default"

    def comments(self):
        out = [f"prio={self.prio}"]
        out += [f"incomplete={t},{s},{ld}" for t, s, ld in self.incomplete]
        return out

    def add(self, cell):
        self.cells.append(cell)
        self.samples += cell.samples


class Worker:
    """Subprocess speaking line-delimited JSON (or plain text) on stdout."""

    def __init__(self, argv):
        self.err = tempfile.TemporaryFile()
        self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=self.err)
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)
        # lines are split here rather than by a buffered reader, which could
        # hold complete lines that select() no longer reports
        self._buf = b""

    def _next_line(self, deadline):
        while b"\n" not in self._buf:
            left = deadline - time.monotonic()
            if left <= 0 or not self._sel.select(left):
                return None
            chunk = os.read(self.proc.stdout.fileno(), 1 << 20)
            if not chunk:
                code = self.proc.wait()
                self.err.seek(0)
                tail = self.err.read()[-2000:].decode(errors="replace")
                raise RuntimeError(f"worker {self.proc.args[:4]} exited with {code}:\n{tail}")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode().strip()

    def read(self, timeout):
        deadline = time.monotonic() + timeout
        while True:
            line = self._next_line(deadline)
            if line is None:
                raise TimeoutError(f"{self.proc.args[:4]} silent for {timeout:.0f}s")
            if line.startswith("{"):
                return json.loads(line)
            if line:
                return line

    def send(self, text="go"):
        try:
            self.proc.stdin.write(text.encode() + b"\n")
            self.proc.stdin.flush()
        except BrokenPipeError:
            pass

    def stop(self):
        if self.proc.poll() is None:
            self.send("done")
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        self._sel.close()
        for f in (self.proc.stdin, self.proc.stdout):
            try:
                f.close()
            except BrokenPipeError:
                pass
        self.err.close()


def _reachable(path):
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        s.connect(path)
        return True
    except OSError:
        return False
    finally:
        s.close()


@contextlib.contextmanager
def broker_for(config):
    """Yield a broker socket path, starting a private broker when none is given."""
    if config.broker and _reachable(config.broker):
        yield config.broker
        return
    tmp = tempfile.mkdtemp(prefix="zerocast-bench-")
    path = config.broker or os.path.join(tmp, "broker.sock")
    argv = [sys.executable, "-m", "zerocast.broker", "--path", path]
    proc = subprocess.Popen(argv, stderr=subprocess.DEVNULL)
    try:
        deadline = time.monotonic() + 10
        while not _reachable(path):
            if proc.poll() is not None or time.monotonic() > deadline:
                raise RuntimeError("broker failed to start")
            time.sleep(0.02)
        yield path
    finally:
        proc.terminate()
        proc.wait(5)


def _worker_argv(role, transport, broker, topic, config, size):
    argv = [sys.executable, "-m", "zerocast.bench.workers", role, "--transport", transport,
            "--broker", broker, "--topic", topic, "--size", str(size),
            "--count", str(config.count), "--period-ms", str(config.period_ms)]
    if config.fifo and role == "sub":
        argv += ["--fifo", str(FIFO_PRIORITY)]
    return argv


def run_cell(config, broker, transport, size, load=0):
    """Measure one (transport, size) cell under whatever load is already running."""
    pub_t, sub_t, direction = ROUTES[transport]
    topic = f"bench.{transport}.{size}.{uuid.uuid4().hex[:8]}"
    workers = []
    try:
        sub = Worker(_worker_argv("sub", sub_t, broker, topic, config, size))
        workers.append(sub)
        prio = sub.read(30)["prio"]
        if direction:
            bridge = Worker([sys.executable, "-m", "zerocast.bridge", "--broker", broker,
                             "--topic", topic, "--direction", direction])
            workers.append(bridge)
            bridge.read(30)
        pub = Worker(_worker_argv("pub", pub_t, broker, topic, config, size))
        workers.append(pub)
        pub.read(30)
        pub.send("go")
        run_time = config.count * config.period_ms / 1000
        result = sub.read(run_time + 60)
        sent = pub.read(30)
    finally:
        for w in reversed(workers):
            w.stop()
    pairs = exclude_warmup(result["samples"], config.warmup_excluded)
    samples = [Sample(transport, size, load, seq, lat) for seq, lat in pairs]
    complete = result["complete"] and not sent["dropped"]
    if not complete:
        log.warning("cell incomplete transport=%s size=%d load=%d received=%d",
                    transport, size, load, len(result["samples"]))
    return CellResult(transport, size, load, samples, complete, prio, sent["intervals_ns"])


def run_latency_suite(config):
    data = Dataset()
    with broker_for(config) as broker:
        for transport in config.transports:
            for size in config.sizes:
                log.info("latency cell transport=%s size=%d", transport, size)
                data.add(run_cell(config, broker, transport, size))
    return data


def run_load_suite(config):
    """Dataset at ``config.load_size`` for every load, plus {(transport, load): cv}."""
    data = Dataset()
    with broker_for(config) as broker:
        for load in config.loads:
            with LoadGenerator(load):
                time.sleep(0.5 if load else 0)
                for transport in config.transports:
                    log.info("load cell transport=%s load=%d", transport, load)
                    data.add(run_cell(config, broker, transport, config.load_size, load))
    summary = summarize(data.samples)
    cv = {(t, ld): st["cv"] for (t, _, ld), st in summary.items()}
    return data, cv


BRIDGE_TRANSPORTS = ("baseline", "bridge_zc_to_baseline", "bridge_baseline_to_zc")


def bridge_overhead(summary, sizes, load=0):
    """{(route, size): bridged median - baseline median} in nanoseconds."""
    out = {}
    for route in BRIDGE_TRANSPORTS[1:]:
        for size in sizes:
            bridged = summary.get((route, size, load))
            plain = summary.get(("baseline", size, load))
            if bridged and plain:
                out[(route, size)] = bridged["p50"] - plain["p50"]
    return out


def run_bridge_suite(config):
    data = Dataset()
    with broker_for(config) as broker:
        for size in config.sizes:
            for transport in BRIDGE_TRANSPORTS:
                log.info("bridge cell transport=%s size=%d", transport, size)
                data.add(run_cell(config, broker, transport, size))
    return data, bridge_overhead(summarize(data.samples), config.sizes)
