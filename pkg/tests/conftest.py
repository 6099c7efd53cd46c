import ctypes
import mmap
import os

import pytest

from zerocast._core import IMPLEMENTATIONS

os.environ.setdefault("ZEROCAST_DEBUG", "1")


class RawMemory:
    """Page-aligned anonymous memory for exercising allocator kernels directly."""

    def __init__(self, capacity):
        self.map = mmap.mmap(-1, capacity)
        self.capacity = capacity
        self._anchor = ctypes.c_char.from_buffer(self.map)
        self.base = ctypes.addressof(self._anchor)

    def close(self):
        del self._anchor
        self.map.close()


@pytest.fixture(params=sorted(IMPLEMENTATIONS))
def core_cls(request):
    return IMPLEMENTATIONS[request.param]


@pytest.fixture
def raw_memory():
    mems = []

    def make(capacity=1 << 20):
        mem = RawMemory(capacity)
        mems.append(mem)
        return mem

    yield make
    for m in mems:
        m.close()


import itertools
import json
import selectors
import subprocess
import sys
import time

from zerocast.arena import unlink_arena

TESTS_DIR = os.path.dirname(os.path.abspath(__file__))
PROCS = os.path.join(TESTS_DIR, "procs.py")

# address region private to the test process; the broker pools live elsewhere
_TEST_REGION = 0x3000_0000_0000
_slots = itertools.count()


@pytest.fixture
def arena_slot():
    """Factory for (unique shm name, unique fixed base) pairs."""
    names = []

    def make():
        i = next(_slots)
        name = f"zerocast-test.{os.getpid()}.{i}"
        names.append(name)
        return name, _TEST_REGION + i * (256 << 20)

    yield make
    for n in names:
        unlink_arena(n)


class Child:
    """A helper process speaking line-delimited JSON on stdout."""

    def __init__(self, role, *args, env=None):
        self.proc = subprocess.Popen(
            [sys.executable, PROCS, role, *map(str, args)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            env={**os.environ, **(env or {})},
        )
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)
        self._buf = b""

    def _line(self, deadline, timeout):
        # split lines ourselves: a buffered readline can swallow lines select() won't report
        while b"\n" not in self._buf:
            left = deadline - time.monotonic()
            if left <= 0 or not self._sel.select(left):
                raise TimeoutError(f"child {self.proc.args[2]} silent for {timeout}s")
            chunk = os.read(self.proc.stdout.fileno(), 1 << 16)
            if not chunk:
                err = self.proc.stderr.read().decode(errors="replace")
                raise EOFError(f"child exited ({self.proc.wait()}): {err[-2000:]}")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode()

    def read(self, timeout=20.0):
        deadline = time.monotonic() + timeout
        while True:
            line = self._line(deadline, timeout)
            if line.startswith("{"):
                return json.loads(line)

    def send(self, text="go"):
        self.proc.stdin.write(text.encode() + b"\n")
        self.proc.stdin.flush()

    def kill(self):
        self.proc.kill()
        self.proc.wait()

    def wait(self, timeout=20.0):
        return self.proc.wait(timeout)

    def close(self):
        if self.proc.poll() is None:
            self.kill()
        self._sel.close()
        for f in (self.proc.stdin, self.proc.stdout, self.proc.stderr):
            try:
                f.close()
            except BrokenPipeError:
                pass


@pytest.fixture
def child():
    kids = []

    def spawn(role, *args, **kw):
        c = Child(role, *args, **kw)
        kids.append(c)
        return c

    yield spawn
    for c in kids:
        c.close()


class RawClient:
    """Blocking frame-level client for exercising the broker directly."""

    def __init__(self, path):
        import socket

        from zerocast.wire import FrameDecoder

        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.connect(path)
        self.sock.settimeout(5)
        self.decoder = FrameDecoder()
        self.backlog = []

    def send(self, op, *values):
        from zerocast.wire import CLIENT_TO_BROKER, encode

        self.sock.sendall(encode(CLIENT_TO_BROKER, op, *values))

    def recv(self):
        """Next (op, decoded values); None when the broker closed the session."""
        from zerocast.wire import BROKER_TO_CLIENT, decode

        while not self.backlog:
            data = self.sock.recv(65536)
            if not data:
                return None
            self.decoder.feed(data)
            self.backlog += self.decoder.frames()
        op, payload = self.backlog.pop(0)
        return op, decode(BROKER_TO_CLIENT, op, payload)

    def close(self):
        self.sock.close()


@pytest.fixture
def broker(tmp_path):
    """In-thread broker on a private socket with its own arena slot range."""
    from zerocast.broker.server import BrokerServer
    from zerocast.broker.state import BrokerConfig

    global _broker_count
    _broker_count += 1
    # 64 GiB of slot space per broker, below the default pool
    start = 0x1000_0000_0000 + (_broker_count % 256) * (1 << 36)
    server = BrokerServer(str(tmp_path / "broker.sock"), BrokerConfig(pool_start=start))
    server.start_in_thread()
    yield server
    server.shutdown()


_broker_count = 0


@pytest.fixture
def raw_client(broker):
    clients = []

    def make():
        c = RawClient(broker.path)
        clients.append(c)
        return c

    yield make
    for c in clients:
        c.close()


# one PASS/FAIL line per acceptance criterion, printed after the run
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": ""})
    if call.when == "call":
        entry["ran"] = True
    for key, value in item.user_properties:
        if key == "result":
            entry["detail"] = value
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False
        err = call.excinfo.exconly().splitlines()[0][:200]
        entry["detail"] = f"{entry['detail']}; {err}" if entry["detail"] else err


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        verdict = "PASS" if e["ok"] and e["ran"] else "FAIL" if e["ran"] or not e["ok"] else "SKIP"
        line = f"criterion {number:>2} {verdict}  {e['title']}"
        if e["detail"]:
            line += f"  [{e['detail']}]"
        terminalreporter.write_line(line)
