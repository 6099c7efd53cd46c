"""Broker wire protocol.

Every frame is ``[u32 LE length][u8 opcode][payload]`` where ``length``
counts the opcode byte plus the payload. Integers are little-endian and
fixed width, text is ``[u16 length][UTF-8]``, byte blobs are
``[u32 length][bytes]`` and addresses are u64.

Requests that expect an answer (register/publish) are answered with a frame
carrying the same opcode, or with an ``ERROR`` frame naming that opcode.
"""

import struct
from enum import IntEnum

from zerocast.errors import ProtocolError

HEADER = struct.Struct("<IB")
MAX_PAYLOAD = 16 << 20
# headroom for the fixed fields wrapped around a maximal baseline payload
MAX_FRAME = MAX_PAYLOAD + 4096


class Op(IntEnum):
    REGISTER_PUBLISHER = 0x01
    REGISTER_SUBSCRIBER = 0x02
    PUBLISH_ENTRY = 0x03
    INCR_REF = 0x04
    DECR_REF = 0x05
    RECLAIM_NOTICE = 0x06
    DELIVERY = 0x07
    ARENA_ANNOUNCE = 0x08
    BASELINE_PUBLISH = 0x09
    BASELINE_DELIVERY = 0x0A
    ERROR = 0x7F


class Transport(IntEnum):
    ZERO_COPY = 0
    BASELINE = 1


# field codes: B u8, H u16, I u32, Q u64, s text, b blob, A arena list
# (count u16, then per arena: text name, u64 base, u64 capacity, u64 publisher_id)
CLIENT_TO_BROKER = {
    Op.REGISTER_PUBLISHER: "BsI",  # transport, topic, pid
    Op.REGISTER_SUBSCRIBER: "BsI",
    Op.PUBLISH_ENTRY: "QQ",  # publisher_id, address
    Op.INCR_REF: "QQQ",  # holder_id, publisher_id, entry_id
    Op.DECR_REF: "QQQ",
    Op.BASELINE_PUBLISH: "Qb",  # origin_id, payload
}

BROKER_TO_CLIENT = {
    Op.REGISTER_PUBLISHER: "QsQQI",  # publisher_id, arena name, base, capacity, subscribers
    Op.REGISTER_SUBSCRIBER: "QA",  # subscriber_id, arenas
    Op.PUBLISH_ENTRY: "QQ",  # publisher_id, entry_id
    Op.RECLAIM_NOTICE: "QQ",  # publisher_id, entry_id
    Op.DELIVERY: "QQQQs",  # subscriber_id, publisher_id, entry_id, address, arena name
    Op.ARENA_ANNOUNCE: "QQsQQ",  # subscriber_id, publisher_id, arena name, base, capacity
    Op.BASELINE_DELIVERY: "QQb",  # subscriber_id, origin_id, payload
    Op.ERROR: "BBs",  # error code, opcode it answers, message
}

_INTS = {"B": struct.Struct("<B"), "H": struct.Struct("<H"), "I": struct.Struct("<I"), "Q": struct.Struct("<Q")}
_U16 = _INTS["H"]
_U32 = _INTS["I"]
_U64 = _INTS["Q"]


def _text(value):
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("text field longer than 65535 bytes")
    return _U16.pack(len(raw)) + raw


def encode_payload(layout, values):
    if len(layout) != len(values):
        raise ValueError(f"layout {layout!r} takes {len(layout)} values, got {len(values)}")
    parts = []
    for code, value in zip(layout, values):
        if code in _INTS:
            parts.append(_INTS[code].pack(value))
        elif code == "s":
            parts.append(_text(value))
        elif code == "b":
            parts.append(_U32.pack(len(value)))
            parts.append(value)
        elif code == "A":
            parts.append(_U16.pack(len(value)))
            for name, base, capacity, publisher_id in value:
                parts += (_text(name), _U64.pack(base), _U64.pack(capacity), _U64.pack(publisher_id))
        else:
            raise ValueError(f"unknown field code {code!r}")
    return b"".join(parts)


def decode_payload(layout, payload):
    """Decode ``payload`` strictly: truncation and trailing bytes are errors."""
    mv = memoryview(payload)
    pos = 0
    out = []

    def take(n):
        nonlocal pos
        if pos + n > len(mv):
            raise ProtocolError("truncated payload")
        chunk = mv[pos:pos + n]
        pos += n
        return chunk

    def text():
        (n,) = _U16.unpack(take(2))
        try:
            return str(take(n), "utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("invalid UTF-8 in text field") from None

    for code in layout:
        if code in _INTS:
            st = _INTS[code]
            out.append(st.unpack(take(st.size))[0])
        elif code == "s":
            out.append(text())
        elif code == "b":
            (n,) = _U32.unpack(take(4))
            out.append(take(n))
        elif code == "A":
            (n,) = _U16.unpack(take(2))
            arenas = []
            for _ in range(n):
                name = text()
                base, capacity, publisher_id = struct.unpack("<QQQ", take(24))
                arenas.append((name, base, capacity, publisher_id))
            out.append(arenas)
    if pos != len(mv):
        raise ProtocolError(f"{len(mv) - pos} trailing bytes in payload")
    return tuple(out)


def frame(op, payload=b""):
    return HEADER.pack(len(payload) + 1, op) + payload


def encode(table, op, *values):
    return frame(op, encode_payload(table[op], values))


def decode(table, op, payload):
    try:
        layout = table[Op(op)]
    except (ValueError, KeyError):
        raise ProtocolError(f"unexpected opcode {op:#04x}") from None
    return decode_payload(layout, payload)


class FrameDecoder:
    """Accumulates stream bytes; yields only complete frames.

    A partially received frame never surfaces, so a peer that dies mid-frame
    has no effect beyond its own buffer.
    """

    def __init__(self, max_frame=MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data):
        self._buf += data

    @property
    def pending(self):
        return len(self._buf)

    def frames(self):
        buf = self._buf
        pos = 0
        out = []
        while len(buf) - pos >= HEADER.size:
            length, op = HEADER.unpack_from(buf, pos)
            if length == 0 or length > self.max_frame:
                raise ProtocolError(f"bad frame length {length}")
            end = pos + 4 + length
            if end > len(buf):
                break
            out.append((op, bytes(buf[pos + HEADER.size:end])))
            pos = end
        if pos:
            del buf[:pos]
        return out
