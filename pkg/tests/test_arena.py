import ctypes
import mmap
import os
import signal

import pytest

from zerocast.arena import (
    ArenaDescriptor,
    attach_read_only,
    contains,
    create_arena,
    shm_name_for,
)
from zerocast.errors import ArenaMissing, BaseMismatch, NameCollision, OutOfArenaMemory, RangeOccupied

MiB = 1 << 20


@pytest.fixture
def arena(arena_slot):
    name, base = arena_slot()
    a = create_arena(name, base, 16 * MiB)
    yield a
    a.close()


def test_create_echoes_arguments(arena):
    d = arena.descriptor
    assert isinstance(d, ArenaDescriptor)
    assert d.base == arena.base and d.capacity == 16 * MiB
    assert d.owner_process == os.getpid()
    assert os.path.exists(f"/dev/shm/{d.name}")


def test_name_collision(arena):
    with pytest.raises(NameCollision):
        create_arena(arena.name, arena.base + 64 * MiB, 16 * MiB)


def test_range_occupied_by_foreign_mapping(arena_slot):
    name, base = arena_slot()
    libc = ctypes.CDLL(None)
    libc.mmap.restype = ctypes.c_void_p
    libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_long]
    probe = libc.mmap(base + 4 * MiB, mmap.PAGESIZE, mmap.PROT_READ,
                      mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS | 0x10, -1, 0)  # MAP_FIXED
    assert probe == base + 4 * MiB
    try:
        with pytest.raises(RangeOccupied):
            create_arena(name, base, 16 * MiB)
        assert not os.path.exists(f"/dev/shm/{name}")
    finally:
        libc.munmap(ctypes.c_void_p(probe), mmap.PAGESIZE)


def test_overlapping_arenas_rejected(arena, arena_slot):
    name, _ = arena_slot()
    with pytest.raises(RangeOccupied):
        create_arena(name, arena.base + MiB, 16 * MiB)


@pytest.mark.parametrize("base,capacity", [(0x3000_0000_0001, 16 * MiB), (0x3000_0000_0000, 4096), (0x3000_0000_0000, MiB + 1)])
def test_invalid_geometry(base, capacity):
    with pytest.raises(ValueError):
        create_arena("zerocast-test.invalid", base, capacity)


def test_contains_is_half_open(arena):
    assert contains(arena, arena.base)
    assert not contains(arena, arena.base + arena.capacity)
    assert not contains(arena, arena.base - 1)
    assert contains(arena, arena.alloc(10))


def test_alloc_out_of_memory_keeps_existing(arena):
    a = arena.alloc(MiB)
    arena.write(a, b"\x42" * 16)
    with pytest.raises(OutOfArenaMemory):
        arena.alloc(64 * MiB)
    assert arena.read(a, 16) == b"\x42" * 16


def test_alloc_dealloc_conserves(arena):
    before = arena.free_bytes
    addrs = [arena.alloc(n) for n in (1, 100, 5000)]
    arena.dealloc(addrs[1])
    arena.dealloc(addrs[0])
    arena.dealloc(addrs[2])
    assert arena.free_bytes == before
    free, used, live = arena.stats()
    assert free + used + 64 == arena.capacity and live == 0


def test_attach_in_same_process_fails_range_occupied(arena):
    with pytest.raises(RangeOccupied):
        attach_read_only(arena.name, arena.base, arena.capacity)


def test_attach_missing():
    with pytest.raises(ArenaMissing):
        attach_read_only("zerocast-test.nonexistent", 0x3100_0000_0000, 16 * MiB)


def test_attach_with_wrong_base_fails_before_mapping(arena):
    wrong = arena.base + 128 * MiB
    with pytest.raises(BaseMismatch):
        attach_read_only(arena.name, wrong, arena.capacity)
    # nothing was mapped at the wrong base: mapping it ourselves succeeds
    m = create_arena(arena.name + "x", wrong, 16 * MiB)
    m.close()


def test_reader_process_sees_same_bytes_at_same_address(arena, child):
    a = arena.alloc(4096)
    payload = os.urandom(4096)
    arena.write(a, payload)
    arena.write(a, b"\xab")
    c = child("read-arena", arena.name, hex(arena.base), arena.capacity, hex(a), 4096)
    got = bytes.fromhex(c.read()["hex"])
    assert got == b"\xab" + payload[1:]


def test_reader_process_write_faults(arena, child):
    a = arena.alloc(64)
    arena.write(a, b"keep me!")
    c = child("write-arena", arena.name, hex(arena.base), arena.capacity, hex(a))
    assert c.read() == {"attached": True}
    assert c.wait() == -signal.SIGSEGV
    assert arena.read(a, 8) == b"keep me!"


def test_view_is_readonly_memoryview(arena, child):
    a = arena.alloc(32)
    arena.write(a, b"z" * 32)
    assert arena.view(a, 32).readonly is False
    assert bytes(arena.view(a, 32)) == b"z" * 32


def test_shm_name_convention():
    assert shm_name_for(1234, 0x2000_0000_0000) == "zerocast.1234.200000000000"
