"""Compare the compiled allocator kernel against the pure-Python one.

Both kernels replay the same pre-generated alloc/realloc/dealloc script on
identical anonymous mappings; the script is checked to produce the same
block map on each. Run with ``python benchmarks/bench_core.py``.
"""

import argparse
import ctypes
import mmap
import random
import time

from zerocast._core import IMPLEMENTATIONS
from zerocast.errors import OutOfArenaMemory


def make_script(n_ops, seed, max_size=4096):
    rng = random.Random(seed)
    script = []
    live = 0
    for _ in range(n_ops):
        r = rng.random()
        if r < 0.45 or not live:
            script.append(("alloc", rng.randint(1, max_size), rng.choice((16, 16, 64))))
            live += 1
        elif r < 0.8:
            script.append(("dealloc", rng.random()))
            live -= 1
        else:
            script.append(("realloc", rng.random(), rng.randint(8, max_size * 2)))
    return script


def replay(core, script):
    live = []
    for op in script:
        kind = op[0]
        try:
            if kind == "alloc":
                live.append(core.alloc(op[1], op[2]))
            elif kind == "dealloc":
                if live:
                    core.dealloc(live.pop(int(op[1] * len(live))))
            elif live:
                i = int(op[1] * len(live))
                live[i] = core.realloc(live[i], op[2])
        except OutOfArenaMemory:
            pass
    return live


def run(cls, script, capacity, repeat):
    best = None
    blocks = None
    for _ in range(repeat):
        mem = mmap.mmap(-1, capacity)
        anchor = ctypes.c_char.from_buffer(mem)
        core = cls(ctypes.addressof(anchor), capacity)
        core.format()
        t0 = time.perf_counter()
        replay(core, script)
        dt = time.perf_counter() - t0
        best = dt if best is None else min(best, dt)
        offset = ctypes.addressof(anchor)
        blocks = [(a - offset, size, used) for a, size, used in core.blocks()]
        core.release()
        del anchor
        mem.close()
    return best, blocks


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ops", type=int, default=50_000)
    ap.add_argument("--capacity", type=int, default=16 << 20)
    ap.add_argument("--repeat", type=int, default=1)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    script = make_script(args.ops, args.seed)
    results = {}
    for name in sorted(IMPLEMENTATIONS):
        results[name] = run(IMPLEMENTATIONS[name], script, args.capacity, args.repeat)
        secs = results[name][0]
        print(f"{name:>9}: {secs:8.3f} s  {args.ops / secs / 1e3:9.1f} kops/s")
    if len(results) == 2:
        (_, (t_c, b_c)), (_, (t_p, b_p)) = sorted(results.items())
        assert b_c == b_p, "kernels disagree on the final block map"
        print(f"speedup: {t_p / t_c:.1f}x (identical final block maps)")
    else:
        print("compiled kernel not built; only the Python kernel was measured")


if __name__ == "__main__":
    main()
