"""Brute-force reference models the implementation is checked against.

``FreeListOracle`` keeps the arena as an explicit, address-sorted Python list
of blocks and applies the first-fit / coalescing policy by direct list
surgery. ``LifetimeOracle`` tracks every live message handle as an explicit
multiset of holders and derives counters from it.
"""

from collections import Counter
from dataclasses import dataclass, field

HEADER_SIZE = 64
BLOCK_HEADER = 16
GRAIN = 16
MIN_BLOCK = 32


class OracleOOM(Exception):
    pass


def _need(size):
    return max(MIN_BLOCK, -(-size // GRAIN) * GRAIN + BLOCK_HEADER)


class FreeListOracle:
    def __init__(self, base, capacity):
        self.base = base
        self.capacity = capacity
        # [offset, size, allocated]
        self.blocks = [[HEADER_SIZE, capacity - HEADER_SIZE, False]]

    def _index_of_live(self, addr):
        o = addr - self.base - BLOCK_HEADER
        for i, (off, _, used) in enumerate(self.blocks):
            if off == o and used:
                return i
        raise KeyError(addr)

    def alloc(self, size, align=GRAIN):
        align = max(align, GRAIN)
        need = _need(size)
        for i, (off, bsize, used) in enumerate(self.blocks):
            if used:
                continue
            payload = self.base + off + BLOCK_HEADER
            lead = -payload % align
            while 0 < lead < MIN_BLOCK:
                lead += align
            if lead + need > bsize:
                continue
            new = []
            if lead:
                new.append([off, lead, False])
            rest = bsize - lead - need
            if rest >= MIN_BLOCK:
                new.append([off + lead, need, True])
                new.append([off + lead + need, rest, False])
            else:
                new.append([off + lead, need + rest, True])
            self.blocks[i:i + 1] = new
            return self.base + off + lead + BLOCK_HEADER
        raise OracleOOM(size)

    def _merge_free(self, i):
        # the list is fully merged except possibly around index i
        lo, hi = max(0, i - 1), min(len(self.blocks), i + 2)
        merged = []
        for blk in self.blocks[lo:hi]:
            if merged and not merged[-1][2] and not blk[2]:
                merged[-1][1] += blk[1]
            else:
                merged.append(list(blk))
        self.blocks[lo:hi] = merged

    def dealloc(self, addr):
        i = self._index_of_live(addr)
        self.blocks[i][2] = False
        self._merge_free(i)

    def realloc(self, addr, new_size):
        i = self._index_of_live(addr)
        off, cur, _ = self.blocks[i]
        need = _need(new_size)
        if need <= cur:
            if cur - need >= MIN_BLOCK:
                self.blocks[i:i + 1] = [[off, need, True], [off + need, cur - need, False]]
                self._merge_free(i + 1)
            return addr
        nxt = self.blocks[i + 1] if i + 1 < len(self.blocks) else None
        if nxt is not None and not nxt[2] and cur + nxt[1] >= need:
            total = cur + nxt[1]
            if total - need >= MIN_BLOCK:
                self.blocks[i:i + 2] = [[off, need, True], [off + need, total - need, False]]
            else:
                self.blocks[i:i + 2] = [[off, total, True]]
            return addr
        new = self.alloc(new_size)
        self.dealloc(addr)
        return new

    def block_map(self):
        return [(self.base + off + BLOCK_HEADER, size, used) for off, size, used in self.blocks]

    def live(self):
        return {(self.base + off + BLOCK_HEADER, size) for off, size, used in self.blocks if used}

    def totals(self):
        """(free bytes, used bytes) summed over the block list."""
        free = used = 0
        for _, size, allocated in self.blocks:
            if allocated:
                used += size
            else:
                free += size
        return free, used

    def free_bytes(self):
        return self.totals()[0]

    def used_bytes(self):
        return self.totals()[1]


@dataclass
class OracleEntry:
    publisher: str
    publisher_proc: int
    pending: set = field(default_factory=set)
    handles: Counter = field(default_factory=Counter)


class LifetimeOracle:
    """Explicit handle multisets; counters are derived, never stored."""

    def __init__(self):
        self.entries = {}
        self.reclaimed = []
        self.discarded = []
        self.alive = set()

    def ref_count(self, key):
        return sum(self.entries[key].handles.values())

    def unreceived(self, key):
        return len(self.entries[key].pending)

    def _settle(self, key, publisher_alive):
        e = self.entries[key]
        if not e.pending and not +e.handles:
            del self.entries[key]
            (self.reclaimed if publisher_alive else self.discarded).append(key)

    def publish(self, key, publisher, proc, subscribers):
        self.entries[key] = OracleEntry(publisher, proc, pending=set(subscribers))
        self._settle(key, True)

    def deliver(self, key, sub):
        e = self.entries[key]
        e.pending.discard(sub)
        e.handles[sub] += 1

    def clone(self, key, holder):
        self.entries[key].handles[holder] += 1

    def drop(self, key, holder):
        e = self.entries[key]
        e.handles[holder] -= 1
        self._settle(key, e.publisher_proc in self.alive)

    def kill(self, proc, endpoints_of_proc):
        self.alive.discard(proc)
        for key in list(self.entries):
            e = self.entries[key]
            for ep in endpoints_of_proc:
                e.pending.discard(ep)
                e.handles.pop(ep, None)
            if e.publisher_proc == proc and e.pending:
                # never-delivered remainder of a dead publisher's entry is dropped
                e.pending.clear()
            self._settle(key, e.publisher_proc in self.alive)


def random_alloc_trace(core, oracle, n_ops, rng, *, max_size=4096, check_every=1):
    """Drive ``core`` and ``oracle`` with the same random alloc/realloc/dealloc
    trace, asserting identical block maps and the conservation identity.

    Returns the number of out-of-memory events seen (identically) by both.
    """
    import ctypes

    from zerocast.errors import OutOfArenaMemory

    # every live block starts with an 8-byte tag; overlaps or bad copies corrupt it
    def stamp(addr):
        tag = rng.getrandbits(64).to_bytes(8, "little")
        ctypes.memmove(addr, tag, 8)
        tags[addr] = tag

    def check(addr):
        assert ctypes.string_at(addr, 8) == tags[addr], f"tag at {addr:#x} corrupted"

    tags = {}
    live = []
    ooms = 0
    for step in range(n_ops):
        r = rng.random()
        if r < 0.45 or not live:
            size = rng.choice((rng.randint(1, 64), rng.randint(1, max_size), rng.randint(1, max_size * 8)))
            align = rng.choice((1, 8, 16, 16, 64, 256))
            try:
                want = oracle.alloc(size, align)
            except OracleOOM:
                try:
                    core.alloc(size, align)
                except OutOfArenaMemory:
                    ooms += 1
                else:
                    raise AssertionError(f"step {step}: core allocated where oracle could not")
            else:
                got = core.alloc(size, align)
                assert got == want, (step, hex(got), hex(want))
                assert got % max(align, GRAIN) == 0
                live.append(got)
                stamp(got)
        elif r < 0.75:
            addr = live.pop(rng.randrange(len(live)))
            check(addr)
            del tags[addr]
            oracle.dealloc(addr)
            core.dealloc(addr)
        else:
            i = rng.randrange(len(live))
            addr = live[i]
            size = rng.randint(8, max_size * 4)
            try:
                want = oracle.realloc(addr, size)
            except OracleOOM:
                try:
                    core.realloc(addr, size)
                except OutOfArenaMemory:
                    ooms += 1
                else:
                    raise AssertionError(f"step {step}: core reallocated where oracle could not")
            else:
                got = core.realloc(addr, size)
                assert got == want, (step, hex(got), hex(want))
                live[i] = got
                tags[got] = tags.pop(addr)
                check(got)
        if step % check_every == 0 or step == n_ops - 1:
            free, used, nlive = core.stats()
            assert free + used + HEADER_SIZE == core.capacity, step
            assert (free, used) == oracle.totals(), step
            assert nlive == len(live), step
            if step % (check_every * 16) == 0 or step == n_ops - 1:
                assert core.blocks() == oracle.block_map(), step
                for addr in live:
                    check(addr)
    return ooms


def random_lifetime_trace(rng, n_steps, *, n_procs=4, max_live=3, finish=False):
    """Drive a BrokerState and a LifetimeOracle with the same random steps.

    Every process registers one publisher and one subscriber on a single
    topic. After each step the per-entry counters, live entry set and
    reclaim notices must agree. Dead processes are replaced by fresh ones.
    With ``finish`` every remaining process exits at the end and the broker
    must be empty. Returns (state, active steps, reclaimed, discarded).
    """
    from zerocast.broker.state import BrokerConfig, BrokerState, Reclaim

    state = BrokerState(BrokerConfig(max_slots=1 << 20))
    oracle = LifetimeOracle()
    procs = {}
    proc_of = {}
    spawned = 0

    def spawn():
        nonlocal spawned
        proc = spawned
        spawned += 1
        pub_id, _, _ = state.register_publisher(proc, 1000 + proc, "t")
        sub_id, _ = state.register_subscriber(proc, 1000 + proc, "t")
        procs[proc] = [pub_id, sub_id]
        proc_of[pub_id] = proc_of[sub_id] = proc
        oracle.alive.add(proc)

    for _ in range(n_procs):
        spawn()
    state.drain()
    reclaims = []
    steps = 0

    for _ in range(n_steps):
        alive = sorted(oracle.alive)
        if len(alive) < n_procs and rng.random() < 0.1:
            spawn()
            alive = sorted(oracle.alive)
        if not alive:
            continue
        steps += 1
        keys = sorted(oracle.entries)
        pending = [(k, s) for k in keys for s in sorted(oracle.entries[k].pending)]
        held = [(k, h) for k in keys for h, n in sorted(oracle.entries[k].handles.items()) if n > 0]
        choice = rng.random()
        if choice < 0.25:
            proc = rng.choice(alive)
            pub_id = procs[proc][0]
            if sum(k[0] == pub_id for k in keys) < max_live:
                arena = state.publishers[pub_id].arena
                subs = set(state.topics["t"].subscribers)
                entry_id = state.publish_entry(proc, pub_id, arena.base + 64, deliver=False)
                oracle.publish((pub_id, entry_id), pub_id, proc, subs)
        elif choice < 0.5 and pending:
            key, sub = rng.choice(pending)
            state.deliver(key[0], key[1], sub)
            oracle.deliver(key, sub)
        elif choice < 0.65 and held:
            key, holder = rng.choice(held)
            state.incr_ref(proc_of[holder], holder, *key)
            oracle.clone(key, holder)
        elif choice < 0.92 and held:
            key, holder = rng.choice(held)
            state.decr_ref(proc_of[holder], holder, *key)
            oracle.drop(key, holder)
        elif choice >= 0.97:
            proc = rng.choice(alive)
            state.process_exit(proc)
            oracle.kill(proc, procs[proc])
        reclaims += [(e.publisher_id, e.entry_id) for e in state.drain() if isinstance(e, Reclaim)]

        assert sorted(state.entries) == sorted(oracle.entries)
        for key, entry in state.entries.items():
            want = oracle.entries[key]
            assert entry.ref_count == oracle.ref_count(key)
            assert entry.unreceived_count == oracle.unreceived(key)
            assert entry.pending == want.pending
            assert entry.holder_refs == {h: n for h, n in want.handles.items() if n}
        assert sorted(reclaims) == sorted(oracle.reclaimed)

    if finish:
        # every process goes away; nothing may be left behind
        for proc in sorted(oracle.alive):
            state.process_exit(proc)
            oracle.kill(proc, procs[proc])
        state.drain()
        assert not state.entries and not oracle.entries
        assert not (state.topics or state.publishers or state.subscribers or state.arenas or state.retired_arenas)
    return state, steps, len(oracle.reclaimed), len(oracle.discarded)
