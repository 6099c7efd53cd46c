"""Synthetic CPU load: one duty-cycled busy loop per logical processor."""

import multiprocessing as mp
import os
import time

import psutil

SLICE = 0.02  # seconds per duty cycle


def _spin(duty, stop):
    while not stop.is_set():
        start = time.monotonic()
        busy_until = start + duty * SLICE
        while time.monotonic() < busy_until:
            pass
        rest = start + SLICE - time.monotonic()
        if rest > 0:
            time.sleep(rest)


def cpu_count():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


class LoadGenerator:
    """Keeps every CPU busy ``pct`` percent of the time until stopped."""

    def __init__(self, pct, workers=None):
        if not 0 <= pct <= 100:
            raise ValueError("load must be within 0..100 percent")
        self.pct = pct
        self.workers = workers or cpu_count()
        self._stop = None
        self._procs = []

    def start(self):
        if self.pct == 0:
            return self
        ctx = mp.get_context("fork")
        self._stop = ctx.Event()
        for _ in range(self.workers):
            p = ctx.Process(target=_spin, args=(self.pct / 100, self._stop), daemon=True)
            p.start()
            self._procs.append(p)
        return self

    def stop(self):
        if self._stop is not None:
            self._stop.set()
        for p in self._procs:
            p.join(timeout=2)
            if p.is_alive():
                p.kill()
        self._procs = []

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def calibrate(pct, duration=3.0, settle=0.3):
    """Aggregate CPU utilisation (percent) measured while generating ``pct`` load."""
    with LoadGenerator(pct):
        time.sleep(settle)
        psutil.cpu_percent(None)
        time.sleep(duration)
        return psutil.cpu_percent(None)
