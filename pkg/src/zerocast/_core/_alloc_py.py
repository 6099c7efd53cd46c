"""Pure-Python allocator kernel, used when the compiled extension is unavailable.

Operates in place on arena memory through a memoryview; the compiled kernel
implements the identical algorithm on a raw pointer.
"""

import ctypes
import struct

from zerocast.errors import DoubleFree, OutOfArenaMemory, UnknownAddress

from .layout import (
    ALLOCATED,
    BLOCK_HEADER,
    FLAG_POISON,
    GRAIN,
    HEADER_SIZE,
    IDENT,
    MAGIC,
    MIN_BLOCK,
    OFF_FLAGS,
    OFF_FREE_BYTES,
    OFF_FREE_HEAD,
    OFF_LIVE,
    OFF_USED_BYTES,
    POISON_BYTE,
    SIZE_MASK,
    VERSION,
    block_size_for,
)

_U64 = struct.Struct("<Q")


class AllocatorCore:
    """First-fit allocator over an address-ordered intrusive free list."""

    def __init__(self, base, capacity):
        self.base = base
        self.capacity = capacity
        self._mem = memoryview((ctypes.c_char * capacity).from_address(base)).cast("B")

    def release(self):
        self._mem.release()

    # raw field access

    def _get(self, off):
        return _U64.unpack_from(self._mem, off)[0]

    def _put(self, off, value):
        _U64.pack_into(self._mem, off, value)

    def _size(self, o):
        return self._get(o) & SIZE_MASK

    def _is_free(self, o):
        return not self._get(o) & ALLOCATED

    def _set_block(self, o, size, allocated):
        self._put(o, size | (ALLOCATED if allocated else 0))

    def _set_prev_size_after(self, o, size):
        nxt = o + size
        if nxt < self.capacity:
            self._put(nxt + 8, size)

    def _next_free(self, o):
        return self._get(o + 16)

    def _prev_free(self, o):
        return self._get(o + 24)

    def _add(self, field, delta):
        self._put(field, self._get(field) + delta)

    def _poison(self, start, end):
        if end > start and self._get(OFF_FLAGS) & FLAG_POISON:
            ctypes.memset(self.base + start, POISON_BYTE, end - start)

    # free list

    def _unlink(self, o):
        nxt, prv = self._next_free(o), self._prev_free(o)
        if prv:
            self._put(prv + 16, nxt)
        else:
            self._put(OFF_FREE_HEAD, nxt)
        if nxt:
            self._put(nxt + 24, prv)

    def _link_after(self, prv, o):
        nxt = self._next_free(prv) if prv else self._get(OFF_FREE_HEAD)
        self._put(o + 16, nxt)
        self._put(o + 24, prv)
        if prv:
            self._put(prv + 16, o)
        else:
            self._put(OFF_FREE_HEAD, o)
        if nxt:
            self._put(nxt + 24, o)

    def _link_ordered(self, o):
        prv, cur = 0, self._get(OFF_FREE_HEAD)
        while cur and cur < o:
            prv, cur = cur, self._next_free(cur)
        self._link_after(prv, o)

    # public kernel

    def format(self, poison=False):
        IDENT.pack_into(self._mem, 0, MAGIC, VERSION, self.base, self.capacity)
        self._mem[22:HEADER_SIZE] = bytes(HEADER_SIZE - 22)
        size = self.capacity - HEADER_SIZE
        o = HEADER_SIZE
        self._set_block(o, size, False)
        self._put(o + 8, 0)
        self._put(o + 16, 0)
        self._put(o + 24, 0)
        self._put(OFF_FREE_HEAD, o)
        self._put(OFF_FREE_BYTES, size)
        self._put(OFF_FLAGS, FLAG_POISON if poison else 0)

    def _placement(self, o, align):
        # offset of the allocated block inside free block o
        payload = self.base + o + BLOCK_HEADER
        p = (payload + align - 1) // align * align
        lead = p - payload
        while 0 < lead < MIN_BLOCK:
            lead += align
        return o + lead

    def alloc(self, size, align=GRAIN):
        if size <= 0:
            raise ValueError("size must be positive")
        if align <= 0 or align & (align - 1):
            raise ValueError("align must be a power of two")
        align = max(align, GRAIN)
        need = block_size_for(size)
        o = self._get(OFF_FREE_HEAD)
        while o:
            bsize = self._size(o)
            blk = self._placement(o, align)
            if blk - o + need <= bsize:
                break
            o = self._next_free(o)
        else:
            raise OutOfArenaMemory(f"no free block for {size} bytes (align {align})")

        lead = blk - o
        rest = bsize - lead - need
        if lead:
            self._set_block(o, lead, False)
            self._put(blk + 8, lead)
            anchor = o
        else:
            anchor = self._prev_free(o)
            self._unlink(o)
        if rest >= MIN_BLOCK:
            tail = blk + need
            self._set_block(tail, rest, False)
            self._put(tail + 8, need)
            self._set_prev_size_after(tail, rest)
            self._link_after(anchor, tail)
        else:
            need += rest
            self._set_prev_size_after(blk, need)
        self._set_block(blk, need, True)
        self._add(OFF_FREE_BYTES, -need)
        self._add(OFF_USED_BYTES, need)
        self._add(OFF_LIVE, 1)
        return self.base + blk + BLOCK_HEADER

    def _live_offset(self, addr):
        o = addr - self.base - BLOCK_HEADER
        if HEADER_SIZE <= o <= self.capacity - MIN_BLOCK and o % GRAIN == 0:
            word = self._get(o)
            size = word & SIZE_MASK
            if word & ALLOCATED and MIN_BLOCK <= size <= self.capacity - o:
                prev = self._get(o + 8)
                nxt = o + size
                ok_next = nxt == self.capacity or self._get(nxt + 8) == size
                if o == HEADER_SIZE:
                    ok_prev = prev == 0
                else:
                    ok_prev = HEADER_SIZE <= o - prev and self._size(o - prev) == prev
                if ok_next and ok_prev:
                    return o
        self._classify_bad(addr, o)

    def _classify_bad(self, addr, o):
        cur = HEADER_SIZE
        while cur < self.capacity:
            size = self._size(cur)
            if size == 0:
                break
            if cur <= o < cur + size and self._is_free(cur):
                raise DoubleFree(f"address {addr:#x} is not live (inside freed memory)")
            if cur > o:
                break
            cur += size
        raise UnknownAddress(f"address {addr:#x} was not returned by this arena")

    def dealloc(self, addr):
        o = self._live_offset(addr)
        size = self._size(o)
        self._add(OFF_FREE_BYTES, size)
        self._add(OFF_USED_BYTES, -size)
        self._add(OFF_LIVE, -1)
        self._poison(o + BLOCK_HEADER, o + size)
        self._release(o, size)

    def _release(self, o, size):
        # mark [o, o+size) free, coalescing with both physical neighbours
        nxt = o + size
        if nxt < self.capacity and self._is_free(nxt):
            self._unlink(nxt)
            size += self._size(nxt)
            self._put(nxt, 0)
        if o > HEADER_SIZE:
            prev = o - self._get(o + 8)
            if self._is_free(prev):
                self._put(o, 0)
                size += self._size(prev)
                self._set_block(prev, size, False)
                self._set_prev_size_after(prev, size)
                return
        self._set_block(o, size, False)
        self._set_prev_size_after(o, size)
        self._link_ordered(o)

    def realloc(self, addr, new_size):
        if new_size <= 0:
            raise ValueError("size must be positive")
        o = self._live_offset(addr)
        cur = self._size(o)
        need = block_size_for(new_size)
        if need <= cur:
            rest = cur - need
            if rest >= MIN_BLOCK:
                tail = o + need
                self._poison(tail + BLOCK_HEADER, tail + rest)
                self._set_block(o, need, True)
                self._put(tail + 8, need)
                self._add(OFF_USED_BYTES, -rest)
                self._add(OFF_FREE_BYTES, rest)
                self._release(tail, rest)
            return addr
        nxt = o + cur
        if nxt < self.capacity and self._is_free(nxt) and cur + self._size(nxt) >= need:
            nsize = self._size(nxt)
            anchor = self._prev_free(nxt)
            self._unlink(nxt)
            self._add(OFF_FREE_BYTES, -nsize)
            total = cur + nsize
            rest = total - need
            if rest >= MIN_BLOCK:
                tail = o + need
                self._set_block(tail, rest, False)
                self._put(tail + 8, need)
                self._set_prev_size_after(tail, rest)
                self._link_after(anchor, tail)
                self._add(OFF_FREE_BYTES, rest)
                total = need
            else:
                self._set_prev_size_after(o, total)
            self._set_block(o, total, True)
            self._add(OFF_USED_BYTES, total - cur)
            return addr
        new = self.alloc(new_size)
        ctypes.memmove(new, addr, min(cur - BLOCK_HEADER, new_size))
        self.dealloc(addr)
        return new

    def usable_size(self, addr):
        o = self._live_offset(addr)
        return self._size(o) - BLOCK_HEADER

    def stats(self):
        """(free_bytes, used_bytes, live_blocks)."""
        return self._get(OFF_FREE_BYTES), self._get(OFF_USED_BYTES), self._get(OFF_LIVE)

    def blocks(self):
        """Physical block map as a list of (payload address, block size, allocated)."""
        out = []
        o = HEADER_SIZE
        while o < self.capacity:
            word = self._get(o)
            size = word & SIZE_MASK
            if size == 0:
                raise RuntimeError(f"corrupt block header at offset {o:#x}")
            out.append((self.base + o + BLOCK_HEADER, size, bool(word & ALLOCATED)))
            o += size
        return out

    def free_list(self):
        out = []
        o = self._get(OFF_FREE_HEAD)
        while o:
            out.append(self.base + o + BLOCK_HEADER)
            o = self._next_free(o)
        return out
