"""Message schemas: fixed-layout roots with variable-length sequences.

A message root is a packed little-endian record. Fixed fields sit in
declaration order; each sequence field takes a 24-byte descriptor
``(data address, length, capacity)`` whose buffer lives elsewhere in the same
arena. Address 0 means the sequence has no buffer.

The baseline transport uses ``serialize``/``deserialize``: fixed fields in
order, then each sequence as ``[u32 byte length][raw bytes]``.
"""

import struct
from dataclasses import dataclass

SEQ_DESCRIPTOR = struct.Struct("<QQQ")


@dataclass(frozen=True)
class Field:
    name: str
    fmt: str  # one struct code, e.g. "Q", "d" or "112s"


@dataclass(frozen=True)
class Seq:
    name: str
    element_size: int = 1


class Schema:
    def __init__(self, name, fields):
        self.name = name
        self.fields = tuple(fields)
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate field names in {name}")
        self.offsets = {}
        self.formats = {}
        fmt = "<"
        for f in self.fields:
            self.offsets[f.name] = struct.calcsize(fmt)
            code = "QQQ" if isinstance(f, Seq) else f.fmt
            self.formats[f.name] = struct.Struct("<" + code)
            fmt += code
        self.root = struct.Struct(fmt)
        self.root_size = self.root.size
        self.fixed_names = tuple(f.name for f in self.fields if isinstance(f, Field))
        self.seq_names = tuple(f.name for f in self.fields if isinstance(f, Seq))
        self.element_sizes = {f.name: f.element_size for f in self.fields if isinstance(f, Seq)}
        self._fixed = struct.Struct("<" + "".join(f.fmt for f in self.fields if isinstance(f, Field)))

    def empty_value(self):
        value = {}
        for f in self.fields:
            if isinstance(f, Seq) or f.fmt.endswith("s"):
                value[f.name] = b""
            else:
                value[f.name] = 0
        return value

    def __repr__(self):
        return f"<Schema {self.name} root={self.root_size}B seqs={list(self.seq_names)}>"


_U32 = struct.Struct("<I")


def serialize(schema, value):
    parts = [schema._fixed.pack(*(value[n] for n in schema.fixed_names))]
    for n in schema.seq_names:
        data = value[n]
        parts.append(_U32.pack(len(data)))
        parts.append(data)
    return b"".join(parts)


def deserialize(schema, payload):
    mv = memoryview(payload)
    fixed = schema._fixed
    if len(mv) < fixed.size:
        raise ValueError("payload shorter than the fixed fields")
    value = dict(zip(schema.fixed_names, fixed.unpack_from(mv, 0)))
    pos = fixed.size
    for n in schema.seq_names:
        if pos + 4 > len(mv):
            raise ValueError(f"payload truncated before sequence {n!r}")
        (length,) = _U32.unpack_from(mv, pos)
        pos += 4
        if pos + length > len(mv):
            raise ValueError(f"sequence {n!r} runs past the payload")
        value[n] = bytes(mv[pos:pos + length])
        pos += length
    if pos != len(mv):
        raise ValueError(f"{len(mv) - pos} trailing bytes")
    return value


# stamp_ns carries the publisher's CLOCK_MONOTONIC send time for latency runs
FIXED128 = Schema("fixed128", [Field("stamp_ns", "Q"), Field("seq", "Q"), Field("body", "112s")])

POINTCLOUD = Schema("pointcloud", [
    Field("stamp_ns", "Q"),
    Field("seq", "Q"),
    Field("width", "I"),
    Field("height", "I"),
    Field("point_step", "I"),
    Field("row_step", "I"),
    Seq("data", 1),
])

_REGISTRY = {s.name: s for s in (FIXED128, POINTCLOUD)}


def register(schema):
    _REGISTRY[schema.name] = schema
    return schema


def by_name(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown schema {name!r}; known: {sorted(_REGISTRY)}") from None
