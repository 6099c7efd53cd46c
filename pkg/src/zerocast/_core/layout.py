"""Byte layout of an arena: fixed header followed by boundary-tagged blocks.

Arena header (64 bytes, little-endian)::

    0   magic      b"ZCAR"
    4   version    u16
    6   base       u64
    14  capacity   u64
    22  (pad)
    24  free_head  u64   offset of the lowest free block, 0 = none
    32  free_bytes u64   sum of free block sizes (headers included)
    40  used_bytes u64   sum of allocated block sizes (headers included)
    48  live       u64   number of allocated blocks
    56  flags      u64   bit 0: poison freed payloads

Block (16-byte aligned, size a multiple of 16)::

    0   size | ALLOCATED
    8   size of the physically preceding block (0 for the first)
    16  payload; free blocks keep next/prev free offsets here
"""

import struct

MAGIC = b"ZCAR"
VERSION = 1

HEADER_SIZE = 64
BLOCK_HEADER = 16
GRAIN = 16
MIN_BLOCK = 32
ALLOCATED = 1
SIZE_MASK = ~(GRAIN - 1)

OFF_MAGIC = 0
OFF_VERSION = 4
OFF_BASE = 6
OFF_CAPACITY = 14
OFF_FREE_HEAD = 24
OFF_FREE_BYTES = 32
OFF_USED_BYTES = 40
OFF_LIVE = 48
OFF_FLAGS = 56

FLAG_POISON = 1
POISON_BYTE = 0xDD

# magic, version, base, capacity
IDENT = struct.Struct("<4sHQQ")


def round_up(n, m):
    return (n + m - 1) // m * m


def block_size_for(size):
    """Total block size (header included) serving a ``size``-byte request."""
    return max(MIN_BLOCK, round_up(size, GRAIN) + BLOCK_HEADER)


def read_ident(buf):
    """Parse (magic, version, base, capacity) from the first bytes of an arena."""
    return IDENT.unpack_from(buf, 0)
