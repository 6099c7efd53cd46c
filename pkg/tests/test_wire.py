import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from zerocast.errors import ProtocolError
from zerocast.wire import (
    BROKER_TO_CLIENT,
    CLIENT_TO_BROKER,
    FrameDecoder,
    Op,
    decode,
    encode,
    frame,
)


def test_frame_layout_is_bit_exact():
    raw = encode(CLIENT_TO_BROKER, Op.PUBLISH_ENTRY, 7, 0x2000_0000_0050)
    assert raw[:5] == struct.pack("<IB", 17, 0x03)
    assert raw[5:] == struct.pack("<QQ", 7, 0x2000_0000_0050)


def test_text_field_layout():
    raw = encode(CLIENT_TO_BROKER, Op.REGISTER_SUBSCRIBER, 0, "pc", 99)
    assert raw[5:] == b"\x00" + b"\x02\x00pc" + struct.pack("<I", 99)


def test_opcode_values():
    assert [int(o) for o in Op] == [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0x7F]


arena_lists = st.lists(
    st.tuples(st.text(max_size=20), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1)),
    max_size=5,
)


@given(st.integers(0, 2**64 - 1), arena_lists)
def test_subscriber_reply_round_trip(sub_id, arenas):
    raw = encode(BROKER_TO_CLIENT, Op.REGISTER_SUBSCRIBER, sub_id, arenas)
    dec = FrameDecoder()
    dec.feed(raw)
    [(op, payload)] = dec.frames()
    assert op == Op.REGISTER_SUBSCRIBER
    assert decode(BROKER_TO_CLIENT, op, payload) == (sub_id, arenas)


@given(st.binary(max_size=3000), st.integers(1, 64))
def test_decoder_handles_arbitrary_chunking(blob, chunk):
    frames = [encode(CLIENT_TO_BROKER, Op.BASELINE_PUBLISH, i, blob[: i * 7]) for i in range(5)]
    stream = b"".join(frames)
    dec = FrameDecoder()
    got = []
    for i in range(0, len(stream), chunk):
        dec.feed(stream[i:i + chunk])
        got += dec.frames()
    assert [decode(CLIENT_TO_BROKER, op, p) for op, p in got] == [(i, blob[: i * 7]) for i in range(5)]
    assert dec.pending == 0


def test_partial_frame_never_surfaces():
    raw = encode(CLIENT_TO_BROKER, Op.PUBLISH_ENTRY, 1, 2)
    dec = FrameDecoder()
    dec.feed(raw[:-1])
    assert dec.frames() == []
    assert dec.pending == len(raw) - 1


@pytest.mark.parametrize("length", [0, (16 << 20) + 5000])
def test_bad_length_rejected(length):
    dec = FrameDecoder()
    dec.feed(struct.pack("<IB", length, 1))
    with pytest.raises(ProtocolError):
        dec.frames()


def test_truncated_and_overlong_payloads_rejected():
    with pytest.raises(ProtocolError):
        decode(CLIENT_TO_BROKER, Op.PUBLISH_ENTRY, b"\x00" * 15)
    with pytest.raises(ProtocolError):
        decode(CLIENT_TO_BROKER, Op.PUBLISH_ENTRY, b"\x00" * 17)
    with pytest.raises(ProtocolError):
        decode(CLIENT_TO_BROKER, Op.REGISTER_PUBLISHER, b"\x00\x05\x00ab")


def test_unknown_opcode_rejected():
    with pytest.raises(ProtocolError):
        decode(CLIENT_TO_BROKER, 0x55, b"")
    with pytest.raises(ProtocolError):
        decode(CLIENT_TO_BROKER, Op.DELIVERY, b"")


def test_invalid_utf8_rejected():
    with pytest.raises(ProtocolError):
        decode(CLIENT_TO_BROKER, Op.REGISTER_PUBLISHER, b"\x00\x01\x00\xff" + b"\x00" * 4)


def test_empty_frame_payload():
    assert frame(Op.ERROR) == b"\x01\x00\x00\x00\x7f"
