import socket
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from laneseg import protocol as P
from laneseg.errors import ProtocolError


@given(st.sampled_from(list(P.MsgType)), st.binary(max_size=64))
def test_framing_roundtrip(msg_type, payload):
    raw = P.encode_message(msg_type, payload)
    msg = P.decode_message(raw)
    assert msg == P.WireMessage(msg_type, payload)
    assert msg.encode() == raw


def test_header_is_big_endian():
    assert P.encode_message(P.MsgType.ACK, b"abc") == b"\x00\x00\x00\x03\x05abc"


def test_unknown_type():
    with pytest.raises(ProtocolError) as e:
        P.decode_message(b"\x00\x00\x00\x00\x7f")
    assert e.value.code == P.ErrorCode.UNKNOWN_TYPE


def test_short_and_long_bodies():
    with pytest.raises(ProtocolError) as e:
        P.decode_message(struct.pack(">IB", 10, 1) + b"x" * 9)
    assert e.value.code == P.ErrorCode.TRUNCATED
    with pytest.raises(ProtocolError) as e:
        P.decode_message(struct.pack(">IB", 1, 1) + b"xy")
    assert e.value.code == P.ErrorCode.BAD_LENGTH
    with pytest.raises(ProtocolError):
        P.decode_message(b"\x00\x00")


def test_frame_payload_roundtrip(rng):
    img = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    fp = P.FramePayload.from_array(42, img)
    assert (fp.width, fp.height, fp.channels) == (7, 5, 3)
    back = P.FramePayload.decode(fp.encode())
    assert back == fp
    np.testing.assert_array_equal(back.to_array(), img)
    assert fp.encode()[:8] == (42).to_bytes(8, "big")


def test_frame_payload_single_channel(rng):
    lab = rng.integers(0, 3, size=(4, 4)).astype(np.uint8)
    np.testing.assert_array_equal(P.FramePayload.decode(P.FramePayload.from_array(1, lab).encode()).to_array(), lab)


def test_frame_pixel_count_checked():
    with pytest.raises(ProtocolError):
        P.FramePayload(1, 2, 2, 3, b"\0" * 11)


def test_small_codecs():
    assert P.decode_ack(P.encode_ack(2 ** 40 + 3)) == 2 ** 40 + 3
    assert P.decode_train_request(P.encode_train_request(7)) == 7
    assert P.decode_error(P.encode_error(5, "empty dataset")) == (5, "empty dataset")
    with pytest.raises(ProtocolError):
        P.decode_ack(b"\0" * 4)


def test_read_message_over_socketpair():
    a, b = socket.socketpair()
    with a, b:
        P.send_message(a, P.MsgType.FRAME, b"hello")
        P.send_message(a, P.MsgType.ACK)
        a.shutdown(socket.SHUT_WR)
        assert P.read_message(b) == P.WireMessage(P.MsgType.FRAME, b"hello")
        assert P.read_message(b) == P.WireMessage(P.MsgType.ACK, b"")
        assert P.read_message(b) is None


def test_read_message_truncated_stream():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(struct.pack(">IB", 10, 1) + b"x" * 9)
        a.shutdown(socket.SHUT_WR)
        with pytest.raises(ProtocolError) as e:
            P.read_message(b)
        assert e.value.code == P.ErrorCode.TRUNCATED
