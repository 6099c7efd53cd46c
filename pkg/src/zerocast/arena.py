"""Named shared-memory arenas mapped at a fixed virtual base.

The owner maps its arena read-write and allocates message bytes from it;
every other participant maps the same object read-only at the *same* base
address, so pointers stored inside messages stay valid everywhere.

Mapping uses ``MAP_FIXED_NOREPLACE``: a request for an address range that is
already in use fails with :class:`RangeOccupied` instead of being relocated.
"""

import ctypes
import errno
import mmap
import os
import threading
from dataclasses import dataclass

from zerocast._core import AllocatorCore
from zerocast._core.layout import IDENT, MAGIC, VERSION
from zerocast.errors import (
    ArenaError,
    ArenaMissing,
    BaseMismatch,
    NameCollision,
    RangeOccupied,
)

PAGE_SIZE = mmap.PAGESIZE
MiB = 1 << 20
MIN_CAPACITY = 1 * MiB
DEFAULT_CAPACITY = 64 * MiB
SHM_DIR = "/dev/shm"
# user space on x86-64 / aarch64 with 4-level page tables
ADDRESS_LIMIT = 1 << 47

MAP_FIXED_NOREPLACE = 0x100000

_libc = ctypes.CDLL(None, use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_long]
_libc.munmap.restype = ctypes.c_int
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
_MAP_FAILED = ctypes.c_void_p(-1).value


class ArenaPermissionError(ArenaError, PermissionError):
    pass


@dataclass(frozen=True)
class ArenaDescriptor:
    name: str
    base: int
    capacity: int
    owner_process: int = 0

    def contains(self, address):
        return self.base <= address < self.base + self.capacity


def shm_name_for(pid, base):
    """Shared-memory object name for the arena a process owns at ``base``."""
    return f"zerocast.{pid}.{base:x}"


def _shm_path(name):
    if not name or "/" in name or name in (".", ".."):
        raise ValueError(f"invalid shared-memory name {name!r}")
    return os.path.join(SHM_DIR, name)


def _check_range(base, capacity):
    if base <= 0 or base % PAGE_SIZE:
        raise ValueError(f"base {base:#x} is not page-aligned")
    if capacity < MIN_CAPACITY or capacity % PAGE_SIZE:
        raise ValueError(f"capacity {capacity} must be a page multiple >= {MIN_CAPACITY}")
    if base + capacity > ADDRESS_LIMIT:
        raise ValueError("range exceeds the user address space")


def _map_fixed(fd, base, capacity, prot):
    addr = _libc.mmap(base, capacity, prot, mmap.MAP_SHARED | MAP_FIXED_NOREPLACE, fd, 0)
    if addr == _MAP_FAILED or addr is None:
        err = ctypes.get_errno()
        if err == errno.EEXIST:
            raise RangeOccupied(f"range [{base:#x}, {base + capacity:#x}) is already mapped")
        if err in (errno.EACCES, errno.EPERM):
            raise ArenaPermissionError(err, os.strerror(err))
        raise OSError(err, os.strerror(err))
    if addr != base:
        # kernels without MAP_FIXED_NOREPLACE treat the address as a hint
        _libc.munmap(addr, capacity)
        raise RangeOccupied(f"kernel placed mapping at {addr:#x} instead of {base:#x}")


def _unmap(base, capacity):
    if _libc.munmap(base, capacity) != 0:
        err = ctypes.get_errno()
        raise OSError(err, os.strerror(err))


class _Mapping:
    def __init__(self, descriptor, writable):
        self.descriptor = descriptor
        self.writable = writable
        self.closed = False

    @property
    def name(self):
        return self.descriptor.name

    @property
    def base(self):
        return self.descriptor.base

    @property
    def capacity(self):
        return self.descriptor.capacity

    def contains(self, address):
        return self.descriptor.contains(address)

    def _check_span(self, address, size):
        if self.closed:
            raise ArenaError(f"arena {self.name} is closed")
        if size < 0 or not (self.contains(address) and address + size <= self.base + self.capacity):
            raise ValueError(f"[{address:#x}, +{size}) is outside arena {self.name}")

    def read(self, address, size):
        """Copy ``size`` bytes starting at ``address``."""
        self._check_span(address, size)
        return ctypes.string_at(address, size)

    def view(self, address, size):
        """Zero-copy memoryview over ``size`` bytes at ``address``."""
        self._check_span(address, size)
        mv = memoryview((ctypes.c_char * size).from_address(address)).cast("B")
        return mv if self.writable else mv.toreadonly()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        d = self.descriptor
        return f"<{type(self).__name__} {d.name} base={d.base:#x} capacity={d.capacity}>"


class Arena(_Mapping):
    """Read-write arena owned by this process. Allocator ops are serialized by a lock."""

    def __init__(self, descriptor, core):
        super().__init__(descriptor, writable=True)
        self._core = core
        self._lock = threading.Lock()

    def alloc(self, size, align=16):
        with self._lock:
            return self._core.alloc(size, align)

    def dealloc(self, address):
        with self._lock:
            self._core.dealloc(address)

    def realloc(self, address, new_size):
        with self._lock:
            return self._core.realloc(address, new_size)

    def usable_size(self, address):
        with self._lock:
            return self._core.usable_size(address)

    def stats(self):
        """(free_bytes, used_bytes, live_blocks)."""
        with self._lock:
            return self._core.stats()

    @property
    def free_bytes(self):
        return self.stats()[0]

    def blocks(self):
        with self._lock:
            return self._core.blocks()

    def write(self, address, data):
        data = memoryview(data).cast("B")
        if len(data):
            self.view(address, len(data))[:] = data

    def close(self, unlink=True):
        if self.closed:
            return
        self._core.release()
        _unmap(self.base, self.capacity)
        self.closed = True
        if unlink:
            try:
                os.unlink(_shm_path(self.name))
            except FileNotFoundError:
                pass


class ArenaView(_Mapping):
    """Read-only mapping of another process's arena at the owner's base."""

    def __init__(self, descriptor):
        super().__init__(descriptor, writable=False)

    def close(self):
        if not self.closed:
            _unmap(self.base, self.capacity)
            self.closed = True


def _poison_default():
    return os.environ.get("ZEROCAST_DEBUG", "") not in ("", "0")


def create_arena(name, base, capacity=DEFAULT_CAPACITY, *, poison=None, core=None):
    """Create the shared-memory object ``name`` and map it read-write at ``base``."""
    _check_range(base, capacity)
    path = _shm_path(name)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR, 0o644)
    except FileExistsError:
        raise NameCollision(f"shared-memory object {name!r} already exists") from None
    except PermissionError as exc:
        raise ArenaPermissionError(exc.errno, exc.strerror, path) from None
    try:
        os.ftruncate(fd, capacity)
        _map_fixed(fd, base, capacity, mmap.PROT_READ | mmap.PROT_WRITE)
    except BaseException:
        os.close(fd)
        os.unlink(path)
        raise
    os.close(fd)
    kernel = (core or AllocatorCore)(base, capacity)
    kernel.format(_poison_default() if poison is None else poison)
    return Arena(ArenaDescriptor(name, base, capacity, os.getpid()), kernel)


def attach_read_only(name, base, capacity):
    """Map an existing arena read-only at ``base``; writes through it fault."""
    _check_range(base, capacity)
    path = _shm_path(name)
    try:
        fd = os.open(path, os.O_RDONLY)
    except FileNotFoundError:
        raise ArenaMissing(f"shared-memory object {name!r} does not exist") from None
    except PermissionError as exc:
        raise ArenaPermissionError(exc.errno, exc.strerror, path) from None
    try:
        size = os.fstat(fd).st_size
        head = os.pread(fd, IDENT.size, 0)
        if len(head) < IDENT.size:
            raise ArenaError(f"{name!r} is too small to be an arena")
        magic, version, real_base, real_capacity = IDENT.unpack(head)
        if magic != MAGIC or version != VERSION:
            raise ArenaError(f"{name!r} is not a zerocast arena")
        if real_base != base:
            raise BaseMismatch(f"{name!r} lives at {real_base:#x}, not {base:#x}")
        if real_capacity != capacity or size != capacity:
            raise BaseMismatch(f"{name!r} has capacity {real_capacity}, not {capacity}")
        _map_fixed(fd, base, capacity, mmap.PROT_READ)
    finally:
        os.close(fd)
    return ArenaView(ArenaDescriptor(name, base, capacity, 0))


def contains(arena_or_view, address):
    return arena_or_view.contains(address)


def unlink_arena(name):
    """Remove the shared-memory object; existing mappings stay valid."""
    try:
        os.unlink(_shm_path(name))
        return True
    except FileNotFoundError:
        return False
