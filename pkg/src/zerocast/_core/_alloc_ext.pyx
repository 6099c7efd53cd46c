# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled allocator kernel. Same algorithm and layout as _alloc_py."""

from libc.stdint cimport uint8_t, uint16_t, uint64_t
from libc.string cimport memcpy, memmove, memset

from zerocast.errors import DoubleFree, OutOfArenaMemory, UnknownAddress

cdef enum:
    HEADER_SIZE = 64
    BLOCK_HEADER = 16
    GRAIN = 16
    MIN_BLOCK = 32
    ALLOCATED = 1
    OFF_FREE_HEAD = 24
    OFF_FREE_BYTES = 32
    OFF_USED_BYTES = 40
    OFF_LIVE = 48
    OFF_FLAGS = 56
    FLAG_POISON = 1
    POISON_BYTE = 0xDD

cdef uint64_t SIZE_MASK = ~(<uint64_t>(GRAIN - 1))


cdef inline uint64_t block_size_for(uint64_t size) noexcept nogil:
    cdef uint64_t need = (size + GRAIN - 1) // GRAIN * GRAIN + BLOCK_HEADER
    return need if need > MIN_BLOCK else MIN_BLOCK


cdef class AllocatorCore:
    cdef uint8_t* mem
    cdef readonly object base
    cdef readonly object capacity
    cdef uint64_t cap
    cdef uint64_t base_u

    def __init__(self, base, capacity):
        self.base = base
        self.capacity = capacity
        self.base_u = base
        self.cap = capacity
        self.mem = <uint8_t*><size_t>self.base_u

    def release(self):
        pass

    cdef inline uint64_t get(self, uint64_t off) noexcept nogil:
        return (<uint64_t*>(self.mem + off))[0]

    cdef inline void put(self, uint64_t off, uint64_t value) noexcept nogil:
        (<uint64_t*>(self.mem + off))[0] = value

    cdef inline uint64_t bsize(self, uint64_t o) noexcept nogil:
        return self.get(o) & SIZE_MASK

    cdef inline bint is_free(self, uint64_t o) noexcept nogil:
        return not (self.get(o) & ALLOCATED)

    cdef inline void set_block(self, uint64_t o, uint64_t size, bint allocated) noexcept nogil:
        self.put(o, size | (ALLOCATED if allocated else 0))

    cdef inline void set_prev_size_after(self, uint64_t o, uint64_t size) noexcept nogil:
        if o + size < self.cap:
            self.put(o + size + 8, size)

    cdef inline void add(self, uint64_t field, long long delta) noexcept nogil:
        self.put(field, self.get(field) + <uint64_t>delta)

    cdef inline void poison(self, uint64_t start, uint64_t end) noexcept nogil:
        if end > start and (self.get(OFF_FLAGS) & FLAG_POISON):
            memset(self.mem + start, POISON_BYTE, end - start)

    cdef void unlink(self, uint64_t o) noexcept nogil:
        cdef uint64_t nxt = self.get(o + 16)
        cdef uint64_t prv = self.get(o + 24)
        if prv:
            self.put(prv + 16, nxt)
        else:
            self.put(OFF_FREE_HEAD, nxt)
        if nxt:
            self.put(nxt + 24, prv)

    cdef void link_after(self, uint64_t prv, uint64_t o) noexcept nogil:
        cdef uint64_t nxt = self.get(prv + 16) if prv else self.get(OFF_FREE_HEAD)
        self.put(o + 16, nxt)
        self.put(o + 24, prv)
        if prv:
            self.put(prv + 16, o)
        else:
            self.put(OFF_FREE_HEAD, o)
        if nxt:
            self.put(nxt + 24, o)

    cdef void link_ordered(self, uint64_t o) noexcept nogil:
        cdef uint64_t prv = 0
        cdef uint64_t cur = self.get(OFF_FREE_HEAD)
        while cur and cur < o:
            prv = cur
            cur = self.get(cur + 16)
        self.link_after(prv, o)

    def format(self, poison=False):
        cdef uint16_t version = 1
        cdef uint64_t size = self.cap - HEADER_SIZE
        memcpy(self.mem, b"ZCAR", 4)
        memcpy(self.mem + 4, &version, 2)
        memcpy(self.mem + 6, &self.base_u, 8)
        memcpy(self.mem + 14, &self.cap, 8)
        memset(self.mem + 22, 0, HEADER_SIZE - 22)
        self.set_block(HEADER_SIZE, size, False)
        self.put(HEADER_SIZE + 8, 0)
        self.put(HEADER_SIZE + 16, 0)
        self.put(HEADER_SIZE + 24, 0)
        self.put(OFF_FREE_HEAD, HEADER_SIZE)
        self.put(OFF_FREE_BYTES, size)
        self.put(OFF_FLAGS, FLAG_POISON if poison else 0)

    cdef inline uint64_t placement(self, uint64_t o, uint64_t align) noexcept nogil:
        cdef uint64_t payload = self.base_u + o + BLOCK_HEADER
        cdef uint64_t p = (payload + align - 1) // align * align
        cdef uint64_t lead = p - payload
        while 0 < lead < MIN_BLOCK:
            lead += align
        return o + lead

    cdef uint64_t c_alloc(self, uint64_t size, uint64_t align) noexcept nogil:
        # returns block offset, 0 when nothing fits
        cdef uint64_t need = block_size_for(size)
        cdef uint64_t o = self.get(OFF_FREE_HEAD)
        cdef uint64_t bs = 0, blk = 0, lead, rest, anchor, tail
        while o:
            bs = self.bsize(o)
            blk = self.placement(o, align)
            if blk - o + need <= bs:
                break
            o = self.get(o + 16)
        if not o:
            return 0
        lead = blk - o
        rest = bs - lead - need
        if lead:
            self.set_block(o, lead, False)
            self.put(blk + 8, lead)
            anchor = o
        else:
            anchor = self.get(o + 24)
            self.unlink(o)
        if rest >= MIN_BLOCK:
            tail = blk + need
            self.set_block(tail, rest, False)
            self.put(tail + 8, need)
            self.set_prev_size_after(tail, rest)
            self.link_after(anchor, tail)
        else:
            need += rest
            self.set_prev_size_after(blk, need)
        self.set_block(blk, need, True)
        self.add(OFF_FREE_BYTES, -<long long>need)
        self.add(OFF_USED_BYTES, need)
        self.add(OFF_LIVE, 1)
        return blk

    def alloc(self, size, align=GRAIN):
        if size <= 0:
            raise ValueError("size must be positive")
        if align <= 0 or align & (align - 1):
            raise ValueError("align must be a power of two")
        if align < GRAIN:
            align = GRAIN
        if size >= self.capacity:
            raise OutOfArenaMemory(f"no free block for {size} bytes (align {align})")
        cdef uint64_t blk = self.c_alloc(size, align)
        if not blk:
            raise OutOfArenaMemory(f"no free block for {size} bytes (align {align})")
        return self.base_u + blk + BLOCK_HEADER

    cdef bint c_is_live(self, uint64_t o) noexcept nogil:
        cdef uint64_t word, size, prev, nxt
        cdef bint ok_next, ok_prev
        if o < HEADER_SIZE or o > self.cap - MIN_BLOCK or o % GRAIN:
            return False
        word = self.get(o)
        size = word & SIZE_MASK
        if not (word & ALLOCATED) or size < MIN_BLOCK or size > self.cap - o:
            return False
        prev = self.get(o + 8)
        nxt = o + size
        ok_next = nxt == self.cap or self.get(nxt + 8) == size
        if o == HEADER_SIZE:
            ok_prev = prev == 0
        else:
            ok_prev = prev <= o - HEADER_SIZE and self.bsize(o - prev) == prev
        return ok_next and ok_prev

    cdef uint64_t live_offset(self, addr) except? 0:
        cdef uint64_t o
        if addr < self.base + HEADER_SIZE + BLOCK_HEADER or addr >= self.base + self.capacity:
            raise UnknownAddress(f"address {addr:#x} was not returned by this arena")
        o = <uint64_t>(addr - self.base) - BLOCK_HEADER
        if self.c_is_live(o):
            return o
        cdef uint64_t cur = HEADER_SIZE, size
        while cur < self.cap:
            size = self.bsize(cur)
            if size == 0:
                break
            if cur <= o < cur + size and self.is_free(cur):
                raise DoubleFree(f"address {addr:#x} is not live (inside freed memory)")
            if cur > o:
                break
            cur += size
        raise UnknownAddress(f"address {addr:#x} was not returned by this arena")

    cdef void release_block(self, uint64_t o, uint64_t size) noexcept nogil:
        cdef uint64_t nxt = o + size, prev
        if nxt < self.cap and self.is_free(nxt):
            self.unlink(nxt)
            size += self.bsize(nxt)
            self.put(nxt, 0)
        if o > HEADER_SIZE:
            prev = o - self.get(o + 8)
            if self.is_free(prev):
                self.put(o, 0)
                size += self.bsize(prev)
                self.set_block(prev, size, False)
                self.set_prev_size_after(prev, size)
                return
        self.set_block(o, size, False)
        self.set_prev_size_after(o, size)
        self.link_ordered(o)

    cdef void c_dealloc(self, uint64_t o) noexcept nogil:
        cdef uint64_t size = self.bsize(o)
        self.add(OFF_FREE_BYTES, size)
        self.add(OFF_USED_BYTES, -<long long>size)
        self.add(OFF_LIVE, -1)
        self.poison(o + BLOCK_HEADER, o + size)
        self.release_block(o, size)

    def dealloc(self, addr):
        self.c_dealloc(self.live_offset(addr))

    def realloc(self, addr, new_size):
        if new_size <= 0:
            raise ValueError("size must be positive")
        cdef uint64_t o = self.live_offset(addr)
        cdef uint64_t cur = self.bsize(o)
        cdef uint64_t need, rest, tail, nxt, nsize, anchor, total, blk, keep
        if new_size >= self.capacity:
            raise OutOfArenaMemory(f"no free block for {new_size} bytes")
        need = block_size_for(new_size)
        if need <= cur:
            rest = cur - need
            if rest >= MIN_BLOCK:
                tail = o + need
                self.poison(tail + BLOCK_HEADER, tail + rest)
                self.set_block(o, need, True)
                self.put(tail + 8, need)
                self.add(OFF_USED_BYTES, -<long long>rest)
                self.add(OFF_FREE_BYTES, rest)
                self.release_block(tail, rest)
            return addr
        nxt = o + cur
        if nxt < self.cap and self.is_free(nxt) and cur + self.bsize(nxt) >= need:
            nsize = self.bsize(nxt)
            anchor = self.get(nxt + 24)
            self.unlink(nxt)
            self.add(OFF_FREE_BYTES, -<long long>nsize)
            total = cur + nsize
            rest = total - need
            if rest >= MIN_BLOCK:
                tail = o + need
                self.set_block(tail, rest, False)
                self.put(tail + 8, need)
                self.set_prev_size_after(tail, rest)
                self.link_after(anchor, tail)
                self.add(OFF_FREE_BYTES, rest)
                total = need
            else:
                self.set_prev_size_after(o, total)
            self.set_block(o, total, True)
            self.add(OFF_USED_BYTES, total - cur)
            return addr
        blk = self.c_alloc(new_size, GRAIN)
        if not blk:
            raise OutOfArenaMemory(f"no free block for {new_size} bytes")
        keep = cur - BLOCK_HEADER
        if keep > <uint64_t>new_size:
            keep = new_size
        memmove(self.mem + blk + BLOCK_HEADER, self.mem + o + BLOCK_HEADER, keep)
        self.c_dealloc(o)
        return self.base_u + blk + BLOCK_HEADER

    def usable_size(self, addr):
        return self.bsize(self.live_offset(addr)) - BLOCK_HEADER

    def stats(self):
        """(free_bytes, used_bytes, live_blocks)."""
        return self.get(OFF_FREE_BYTES), self.get(OFF_USED_BYTES), self.get(OFF_LIVE)

    def blocks(self):
        """Physical block map as a list of (payload address, block size, allocated)."""
        out = []
        cdef uint64_t o = HEADER_SIZE, word, size
        while o < self.cap:
            word = self.get(o)
            size = word & SIZE_MASK
            if size == 0:
                raise RuntimeError(f"corrupt block header at offset {o:#x}")
            out.append((self.base_u + o + BLOCK_HEADER, size, bool(word & ALLOCATED)))
            o += size
        return out

    def free_list(self):
        out = []
        cdef uint64_t o = self.get(OFF_FREE_HEAD)
        while o:
            out.append(self.base_u + o + BLOCK_HEADER)
            o = self.get(o + 16)
        return out
