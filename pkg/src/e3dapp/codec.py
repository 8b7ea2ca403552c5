"""E3AP PDU types and their binary wire format.

Frame layout (v1), all integers big-endian, no padding::

    [version: u8][kind: u8][body_len: u32][body: body_len bytes]

Body layouts by kind:

    SetupRequest          dapp_id u32, n u16, n x sm_id u16
    SetupResponse         dapp_id u32, accepted u8, n u16, n x sm_id u16
    SubscriptionRequest   dapp_id u32, sm_id u16, period_slots u16
    SubscriptionResponse  dapp_id u32, sm_id u16, accepted u8
    Indication            sm_id u16, sequence u32, origin_ts_ns u64, payload_len u32, payload
    Control               sm_id u16, sequence u32, n_entries u16, n x prb u32
    Report                dapp_id u32, sm_id u16, payload_len u32, payload
    XAppControl           dapp_id u32, policy_key u16, payload_len u32, payload
"""

from __future__ import annotations

import enum
import operator
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">BBI")
HEADER_LEN = HEADER.size  # 6

U8 = 0xFF
U16 = 0xFFFF
U32 = 0xFFFFFFFF
U64 = 0xFFFFFFFFFFFFFFFF

SEQUENCE_MOD = 1 << 32


class E3CodecError(ValueError):
    pass


class FieldOutOfRange(E3CodecError):
    pass


class ListTooLong(E3CodecError):
    pass


class Truncated(E3CodecError):
    pass


class UnknownKind(E3CodecError):
    pass


class UnknownVersion(E3CodecError):
    pass


class MalformedBody(E3CodecError):
    pass


class PduKind(enum.IntEnum):
    SETUP_REQUEST = 1
    SETUP_RESPONSE = 2
    SUBSCRIPTION_REQUEST = 3
    SUBSCRIPTION_RESPONSE = 4
    INDICATION = 5
    CONTROL = 6
    REPORT = 7
    XAPP_CONTROL = 8


@dataclass(frozen=True)
class SetupRequestBody:
    dapp_id: int
    requested_sm_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "requested_sm_ids", tuple(self.requested_sm_ids))


@dataclass(frozen=True)
class SetupResponseBody:
    dapp_id: int
    accepted: bool
    sm_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sm_ids", tuple(self.sm_ids))


@dataclass(frozen=True)
class SubscriptionRequestBody:
    dapp_id: int
    sm_id: int
    period_slots: int = 1


@dataclass(frozen=True)
class SubscriptionResponseBody:
    dapp_id: int
    sm_id: int
    accepted: bool


@dataclass(frozen=True)
class IndicationBody:
    sm_id: int
    sequence: int
    origin_ts_ns: int
    payload: bytes = b""


@dataclass(frozen=True)
class ControlBody:
    sm_id: int
    sequence: int
    entries: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))


@dataclass(frozen=True)
class ReportBody:
    dapp_id: int
    sm_id: int
    payload: bytes = b""


@dataclass(frozen=True)
class XAppControlBody:
    dapp_id: int
    policy_key: int
    policy_value: bytes = b""


Body = Union[
    SetupRequestBody,
    SetupResponseBody,
    SubscriptionRequestBody,
    SubscriptionResponseBody,
    IndicationBody,
    ControlBody,
    ReportBody,
    XAppControlBody,
]

_KIND_OF: dict[type, PduKind] = {
    SetupRequestBody: PduKind.SETUP_REQUEST,
    SetupResponseBody: PduKind.SETUP_RESPONSE,
    SubscriptionRequestBody: PduKind.SUBSCRIPTION_REQUEST,
    SubscriptionResponseBody: PduKind.SUBSCRIPTION_RESPONSE,
    IndicationBody: PduKind.INDICATION,
    ControlBody: PduKind.CONTROL,
    ReportBody: PduKind.REPORT,
    XAppControlBody: PduKind.XAPP_CONTROL,
}


@dataclass(frozen=True)
class E3Pdu:
    body: Body
    version: int = field(default=PROTOCOL_VERSION)

    @property
    def kind(self) -> PduKind:
        return _KIND_OF[type(self.body)]


def _check(name: str, value: int, limit: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise FieldOutOfRange(f"{name} must be an int, got {type(value).__name__}")
    if value < 0 or value > limit:
        raise FieldOutOfRange(f"{name}={value} outside [0, {limit}]")
    return value


def _check_list(name: str, values, width_limit: int) -> list[int]:
    values = list(values)
    if len(values) > U16:
        raise ListTooLong(f"{name} has {len(values)} items, max {U16}")
    if not values or (set(map(type, values)) == {int} and min(values) >= 0 and max(values) <= width_limit):
        return values
    for i, v in enumerate(values):
        _check(f"{name}[{i}]", v, width_limit)
    return values


def _check_payload(name: str, payload) -> bytes:
    if not isinstance(payload, (bytes, bytearray, memoryview)):
        raise FieldOutOfRange(f"{name} must be bytes-like")
    payload = bytes(payload)
    if len(payload) > U32:
        raise ListTooLong(f"{name} is {len(payload)} bytes, max {U32}")
    return payload


def _check_sm_ids(values) -> list[int]:
    ids = _check_list("sm_ids", values, U16)
    if len(set(ids)) != len(ids):
        raise MalformedBody("duplicate sm_id")
    return ids


def _check_entries(values) -> list[int]:
    entries = _check_list("entries", values, U32)
    if any(map(operator.le, entries[1:], entries)):
        raise MalformedBody("control entries must be strictly increasing")
    return entries


def _encode_body(body: Body) -> bytes:
    if isinstance(body, SetupRequestBody):
        ids = _check_sm_ids(body.requested_sm_ids)
        if not ids:
            raise MalformedBody("requested_sm_ids must be non-empty")
        return struct.pack(f">IH{len(ids)}H", _check("dapp_id", body.dapp_id, U32), len(ids), *ids)
    if isinstance(body, SetupResponseBody):
        ids = _check_sm_ids(body.sm_ids)
        return struct.pack(
            f">IBH{len(ids)}H", _check("dapp_id", body.dapp_id, U32), 1 if body.accepted else 0, len(ids), *ids
        )
    if isinstance(body, SubscriptionRequestBody):
        return struct.pack(
            ">IHH",
            _check("dapp_id", body.dapp_id, U32),
            _check("sm_id", body.sm_id, U16),
            _check("period_slots", body.period_slots, U16),
        )
    if isinstance(body, SubscriptionResponseBody):
        return struct.pack(
            ">IHB", _check("dapp_id", body.dapp_id, U32), _check("sm_id", body.sm_id, U16), 1 if body.accepted else 0
        )
    if isinstance(body, IndicationBody):
        payload = _check_payload("payload", body.payload)
        head = struct.pack(
            ">HIQI",
            _check("sm_id", body.sm_id, U16),
            _check("sequence", body.sequence, U32),
            _check("origin_ts_ns", body.origin_ts_ns, U64),
            len(payload),
        )
        return head + payload
    if isinstance(body, ControlBody):
        entries = _check_entries(body.entries)
        return struct.pack(
            f">HIH{len(entries)}I",
            _check("sm_id", body.sm_id, U16),
            _check("sequence", body.sequence, U32),
            len(entries),
            *entries,
        )
    if isinstance(body, ReportBody):
        payload = _check_payload("payload", body.payload)
        head = struct.pack(">IHI", _check("dapp_id", body.dapp_id, U32), _check("sm_id", body.sm_id, U16), len(payload))
        return head + payload
    if isinstance(body, XAppControlBody):
        payload = _check_payload("policy_value", body.policy_value)
        head = struct.pack(
            ">IHI", _check("dapp_id", body.dapp_id, U32), _check("policy_key", body.policy_key, U16), len(payload)
        )
        return head + payload
    raise TypeError(f"not an E3 body: {type(body).__name__}")


def encode(pdu: E3Pdu) -> bytes:
    """Serialize one PDU into a self-delimiting frame."""
    if pdu.version != PROTOCOL_VERSION:
        raise UnknownVersion(f"cannot encode version {pdu.version}")
    body = _encode_body(pdu.body)
    if len(body) > U32:
        raise ListTooLong("body exceeds u32 length")
    return HEADER.pack(PROTOCOL_VERSION, pdu.kind, len(body)) + body


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: memoryview, start: int, end: int):
        self.buf = buf
        self.pos = start
        self.end = end

    def take(self, fmt: struct.Struct):
        if self.pos + fmt.size > self.end:
            raise MalformedBody("body shorter than its fields")
        out = fmt.unpack_from(self.buf, self.pos)
        self.pos += fmt.size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MalformedBody("declared length exceeds body")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def array(self, code: str, n: int) -> tuple[int, ...]:
        return self.take(struct.Struct(f">{n}{code}")) if n else ()


_S_I = struct.Struct(">I")
_S_H = struct.Struct(">H")
_S_IH = struct.Struct(">IH")
_S_IBH = struct.Struct(">IBH")
_S_IHH = struct.Struct(">IHH")
_S_IHB = struct.Struct(">IHB")
_S_HIQI = struct.Struct(">HIQI")
_S_HIH = struct.Struct(">HIH")
_S_IHI = struct.Struct(">IHI")


def _flag(v: int) -> bool:
    if v not in (0, 1):
        raise MalformedBody(f"accepted flag must be 0 or 1, got {v}")
    return bool(v)


def _decode_body(kind: PduKind, r: _Reader) -> Body:
    if kind is PduKind.SETUP_REQUEST:
        dapp_id, n = r.take(_S_IH)
        ids = r.array("H", n)
        if not ids or len(set(ids)) != n:
            raise MalformedBody("setup request needs non-empty, unique sm_ids")
        return SetupRequestBody(dapp_id, ids)
    if kind is PduKind.SETUP_RESPONSE:
        dapp_id, acc, n = r.take(_S_IBH)
        ids = r.array("H", n)
        if len(set(ids)) != n:
            raise MalformedBody("duplicate sm_id")
        return SetupResponseBody(dapp_id, _flag(acc), ids)
    if kind is PduKind.SUBSCRIPTION_REQUEST:
        return SubscriptionRequestBody(*r.take(_S_IHH))
    if kind is PduKind.SUBSCRIPTION_RESPONSE:
        dapp_id, sm_id, acc = r.take(_S_IHB)
        return SubscriptionResponseBody(dapp_id, sm_id, _flag(acc))
    if kind is PduKind.INDICATION:
        sm_id, seq, ts, n = r.take(_S_HIQI)
        return IndicationBody(sm_id, seq, ts, r.raw(n))
    if kind is PduKind.CONTROL:
        sm_id, seq, n = r.take(_S_HIH)
        entries = r.array("I", n)
        if any(map(operator.le, entries[1:], entries)):
            raise MalformedBody("control entries must be strictly increasing")
        return ControlBody(sm_id, seq, entries)
    if kind is PduKind.REPORT:
        dapp_id, sm_id, n = r.take(_S_IHI)
        return ReportBody(dapp_id, sm_id, r.raw(n))
    dapp_id, key, n = r.take(_S_IHI)
    return XAppControlBody(dapp_id, key, r.raw(n))


def frame_length(buf, offset: int = 0) -> int | None:
    """Total length of the frame starting at `offset`, or None if the header is incomplete."""
    if len(buf) - offset < HEADER_LEN:
        return None
    _, _, body_len = HEADER.unpack_from(buf, offset)
    return HEADER_LEN + body_len


def decode(buf, offset: int = 0) -> tuple[E3Pdu, int]:
    """Decode the frame at `offset`. Returns the PDU and the number of bytes consumed.

    Trailing bytes after the frame are left alone, so this can walk a stream buffer.
    """
    view = memoryview(buf)
    if len(view) - offset < HEADER_LEN:
        raise Truncated(f"need {HEADER_LEN} header bytes, have {len(view) - offset}")
    version, kind_raw, body_len = HEADER.unpack_from(view, offset)
    if version != PROTOCOL_VERSION:
        raise UnknownVersion(f"version {version}")
    try:
        kind = PduKind(kind_raw)
    except ValueError:
        raise UnknownKind(f"kind 0x{kind_raw:02x}") from None
    start = offset + HEADER_LEN
    end = start + body_len
    if end > len(view):
        raise Truncated(f"body_len={body_len} but only {len(view) - start} bytes available")
    r = _Reader(view, start, end)
    body = _decode_body(kind, r)
    if r.pos != end:
        raise MalformedBody(f"{end - r.pos} unparsed bytes in {kind.name} body")
    return E3Pdu(body, version), end - offset


def decode_all(buf) -> list[E3Pdu]:
    """Decode a buffer holding back-to-back complete frames."""
    out = []
    pos = 0
    while pos < len(buf):
        pdu, n = decode(buf, pos)
        out.append(pdu)
        pos += n
    return out


INDICATION_FIXED = _S_HIQI.size  # 18


def framing_overhead(payload_len: int) -> float:
    """(frame_len - payload_len) / payload_len for an Indication carrying `payload_len` bytes.

    Degenerate for tiny payloads (a 1-byte payload gives 24.0); this is not an error.
    """
    return float(framing_overhead_exact(payload_len))


def framing_overhead_exact(payload_len: int) -> Fraction:
    if payload_len <= 0:
        raise ValueError("payload_len must be positive")
    return Fraction(HEADER_LEN + INDICATION_FIXED, payload_len)


def header_overhead_exact(payload_len: int) -> Fraction:
    """Fixed-header bytes relative to the Indication body that carries `payload_len` bytes."""
    if payload_len < 0:
        raise ValueError("payload_len must be non-negative")
    return Fraction(HEADER_LEN, INDICATION_FIXED + payload_len)


def next_sequence(seq: int) -> int:
    return (seq + 1) % SEQUENCE_MOD
