import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e3dapp import codec
from e3dapp.codec import (
    ControlBody,
    E3Pdu,
    IndicationBody,
    ReportBody,
    SetupRequestBody,
    SetupResponseBody,
    SubscriptionRequestBody,
    SubscriptionResponseBody,
    XAppControlBody,
)

u16 = st.integers(0, codec.U16)
u32 = st.integers(0, codec.U32)
u64 = st.integers(0, codec.U64)
blob = st.binary(max_size=256)


def _increasing(max_size=64):
    return st.sets(u32, max_size=max_size).map(lambda s: tuple(sorted(s)))


def _unique_ids(min_size=0):
    return st.lists(u16, min_size=min_size, max_size=16, unique=True).map(tuple)


bodies = st.one_of(
    st.builds(SetupRequestBody, u32, _unique_ids(min_size=1)),
    st.builds(SetupResponseBody, u32, st.booleans(), _unique_ids()),
    st.builds(SubscriptionRequestBody, u32, u16, u16),
    st.builds(SubscriptionResponseBody, u32, u16, st.booleans()),
    st.builds(IndicationBody, u16, u32, u64, blob),
    st.builds(ControlBody, u16, u32, _increasing()),
    st.builds(ReportBody, u32, u16, blob),
    st.builds(XAppControlBody, u32, u16, blob),
)
pdus = bodies.map(E3Pdu)


@given(pdus)
def test_roundtrip(pdu):
    frame = codec.encode(pdu)
    back, n = codec.decode(frame)
    assert back == pdu
    assert n == len(frame)
    assert codec.encode(back) == frame


@given(pdus)
def test_length_field_matches_body(pdu):
    frame = codec.encode(pdu)
    version, kind, body_len = codec.HEADER.unpack_from(frame)
    assert (version, kind) == (1, pdu.kind)
    assert body_len == len(frame) - codec.HEADER_LEN


@given(st.lists(pdus, max_size=8), st.binary(max_size=16))
def test_stream_walk_leaves_trailing_bytes(items, tail):
    buf = b"".join(codec.encode(p) for p in items)
    pos = 0
    got = []
    for _ in items:
        p, n = codec.decode(buf + tail, pos)
        got.append(p)
        pos += n
    assert got == items
    assert pos == len(buf)


@settings(max_examples=500)
@given(st.binary(max_size=64))
def test_fuzz_never_crashes(data):
    try:
        codec.decode(data)
    except codec.E3CodecError:
        pass


@given(pdus, st.data())
def test_bit_flips_only_raise_codec_errors(pdu, data):
    frame = bytearray(codec.encode(pdu))
    i = data.draw(st.integers(0, len(frame) - 1))
    frame[i] ^= 1 << data.draw(st.integers(0, 7))
    try:
        back, _ = codec.decode(bytes(frame))
    except codec.E3CodecError:
        return
    assert codec.encode(back) == codec.encode(back)


def test_setup_request_bytes():
    frame = codec.encode(E3Pdu(SetupRequestBody(7, [1])))
    assert frame == bytes.fromhex("01 01 00000008 00000007 0001 0001")


def test_empty_control():
    frame = codec.encode(E3Pdu(ControlBody(1, 0, [])))
    assert codec.HEADER.unpack_from(frame)[2] == 8
    assert len(frame) == 6 + 8


def test_control_entry_density():
    # 4 bytes per PRB
    frame = codec.encode(E3Pdu(ControlBody(1, 0, [30, 31, 32, 33])))
    assert len(frame) - 6 - 8 == 16


def test_indication_2048_samples():
    frame = codec.encode(E3Pdu(IndicationBody(1, 0, 0, bytes(8192))))
    assert codec.HEADER.unpack_from(frame)[2] == 2 + 4 + 8 + 4 + 8192 == 8210
    assert len(frame) == 8216
    assert codec.framing_overhead_exact(8192) == Fraction(24, 8192)
    assert codec.header_overhead_exact(8192) == Fraction(6, 8210)


@pytest.mark.parametrize("n,expected", [(8192, 24 / 8192), (1536, 24 / 1536), (1, 24.0)])
def test_framing_overhead_examples(n, expected):
    assert codec.framing_overhead(n) == pytest.approx(expected)


def test_framing_overhead_strictly_decreasing():
    vals = [codec.framing_overhead_exact(n) for n in range(1, 5000)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_framing_overhead_rejects_nonpositive():
    with pytest.raises(ValueError):
        codec.framing_overhead(0)


def test_encoding_is_deterministic():
    p = E3Pdu(IndicationBody(3, 9, 12345, b"\x01\x02\x03\x04"))
    assert codec.encode(p) == codec.encode(E3Pdu(IndicationBody(3, 9, 12345, b"\x01\x02\x03\x04")))


def test_unknown_kind():
    with pytest.raises(codec.UnknownKind):
        codec.decode(bytes([1, 0x99, 0, 0, 0, 0]))


def test_unknown_version():
    frame = bytearray(codec.encode(E3Pdu(ControlBody(1, 0, []))))
    frame[0] = 2
    with pytest.raises(codec.UnknownVersion):
        codec.decode(bytes(frame))
    with pytest.raises(codec.UnknownVersion):
        codec.encode(E3Pdu(ControlBody(1, 0, []), version=2))


def test_truncated():
    with pytest.raises(codec.Truncated):
        codec.decode(bytes([1, 5, 0, 0, 0, 100]) + bytes(50))
    with pytest.raises(codec.Truncated):
        codec.decode(b"\x01\x05")


def test_malformed_inner_length():
    # Report declares a 10-byte payload inside a body that only holds 4
    body = bytes.fromhex("00000001 0001 0000000a") + b"abcd"
    frame = codec.HEADER.pack(1, codec.PduKind.REPORT, len(body)) + body
    with pytest.raises(codec.MalformedBody):
        codec.decode(frame)


def test_trailing_bytes_inside_body_are_malformed():
    body = bytes.fromhex("00000007 0001 0001") + b"\x00"
    frame = codec.HEADER.pack(1, codec.PduKind.SETUP_REQUEST, len(body)) + body
    with pytest.raises(codec.MalformedBody):
        codec.decode(frame)


@pytest.mark.parametrize("body", [
    SetupRequestBody(1 << 32, [1]),
    SubscriptionRequestBody(1, 1 << 16, 1),
    IndicationBody(1, -1, 0, b""),
    IndicationBody(1, 0, 1 << 64, b""),
    ControlBody(1, 0, [1 << 32]),
    ControlBody(1, 0, [True]),
])
def test_field_out_of_range(body):
    with pytest.raises(codec.FieldOutOfRange):
        codec.encode(E3Pdu(body))


def test_list_too_long():
    with pytest.raises(codec.ListTooLong):
        codec.encode(E3Pdu(ControlBody(1, 0, range(1 << 16))))


@pytest.mark.parametrize("body", [
    SetupRequestBody(1, []),
    SetupRequestBody(1, [1, 1]),
    ControlBody(1, 0, [3, 2]),
    ControlBody(1, 0, [3, 3]),
])
def test_malformed_on_encode(body):
    with pytest.raises(codec.MalformedBody):
        codec.encode(E3Pdu(body))


def test_accepted_flag_must_be_boolean_byte():
    frame = bytearray(codec.encode(E3Pdu(SubscriptionResponseBody(1, 1, True))))
    frame[-1] = 2
    with pytest.raises(codec.MalformedBody):
        codec.decode(bytes(frame))


def test_sequence_wraps():
    assert codec.next_sequence(codec.U32) == 0
    assert codec.next_sequence(5) == 6


def test_decode_all():
    items = [E3Pdu(ControlBody(1, i, [i])) for i in range(5)]
    assert codec.decode_all(b"".join(map(codec.encode, items))) == items


def test_frame_length_incomplete_header():
    assert codec.frame_length(b"\x01\x05\x00") is None
    assert codec.frame_length(codec.encode(E3Pdu(ControlBody(1, 0, [])))) == 14


def random_pdu(rng: random.Random) -> E3Pdu:
    """Independent generator (no hypothesis) used for the bulk roundtrip."""
    k = rng.randrange(8)
    b = lambda: rng.randbytes(rng.randrange(0, 64))  # noqa: E731
    u = lambda bits: rng.getrandbits(bits)  # noqa: E731
    ids = lambda lo: tuple(rng.sample(range(1 << 16), rng.randrange(lo, 8)))  # noqa: E731
    if k == 0:
        body = SetupRequestBody(u(32), ids(1))
    elif k == 1:
        body = SetupResponseBody(u(32), rng.random() < 0.5, ids(0))
    elif k == 2:
        body = SubscriptionRequestBody(u(32), u(16), u(16))
    elif k == 3:
        body = SubscriptionResponseBody(u(32), u(16), rng.random() < 0.5)
    elif k == 4:
        body = IndicationBody(u(16), u(32), u(64), b())
    elif k == 5:
        body = ControlBody(u(16), u(32), sorted(rng.sample(range(1 << 32), rng.randrange(0, 32))))
    elif k == 6:
        body = ReportBody(u(32), u(16), b())
    else:
        body = XAppControlBody(u(32), u(16), b())
    return E3Pdu(body)
