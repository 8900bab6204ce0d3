"""Packet, frame and datagram codecs for the miniature QUIC-like protocol.

The protection used here is deliberately *not* secure.  It keeps the one
property that matters for the circumvention technique: anybody who sees an
Initial packet on the wire can derive its keystream from the destination
connection ID, while Handshake and short-header packets are protected with
a keystream that requires the Diffie-Hellman shared secret.

All integers are big-endian.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import NamedTuple, Optional, Tuple, Union

MAX_PACKET_SIZE = 1250
MAX_STREAM_CHUNK = 1200
MAX_KEYSTREAM = 65536
CID_LENGTH = 8
TAG_LENGTH = 8
VERSION = 1

DH_PRIME = 2**61 - 1
DH_GENERATOR = 3

INITIAL_LABEL = b"quicstep-lab-initial-v1"
SESSION_LABEL = b"qs-session-v1"

TUNNEL_MAGIC = b"\x74\x54"
DNS_MAGIC = b"\x44\x4e"
INNER_MAGIC = b"\x49\x50"


class WireError(ValueError):
    """Raised when bytes cannot be parsed or a value cannot be encoded."""


class EncodingError(WireError):
    pass


class OpaquePayloadError(WireError):
    """The header parsed but the payload did not decode under the keystream.

    ``header`` holds the header-only view that any observer can obtain.
    """

    def __init__(self, header: "PacketHeader", message: str = "undecodable payload"):
        super().__init__(message)
        self.header = header


class Address(NamedTuple):
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Address":
        host, sep, port = text.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise WireError(f"bad address {text!r}")
        return cls(host, int(port))


@dataclass(frozen=True)
class ConnectionId:
    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, (bytes, bytearray)) or len(self.value) != CID_LENGTH:
            raise ValueError("connection IDs are exactly 8 bytes")
        object.__setattr__(self, "value", bytes(self.value))

    @classmethod
    def random(cls, rng: random.Random) -> "ConnectionId":
        return cls(rng.getrandbits(64).to_bytes(CID_LENGTH, "big"))

    @classmethod
    def from_hex(cls, text: str) -> "ConnectionId":
        return cls(bytes.fromhex(text))

    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return self.hex()


class HeaderForm(Enum):
    LONG = "LONG"
    SHORT = "SHORT"


class LongType(IntEnum):
    INITIAL = 0x00
    HANDSHAKE = 0x01


class Direction(IntEnum):
    CLIENT_TO_SERVER = 0
    SERVER_TO_CLIENT = 1


class FrameType(IntEnum):
    ACK = 0x02
    CRYPTO = 0x06
    STREAM = 0x08
    NEW_CONNECTION_ID = 0x18
    PATH_CHALLENGE = 0x1A
    PATH_RESPONSE = 0x1B
    HANDSHAKE_DONE = 0x1E


# frames


@dataclass(frozen=True)
class CryptoFrame:
    offset: int
    data: bytes


@dataclass(frozen=True)
class StreamFrame:
    stream_id: int
    offset: int
    fin: bool
    data: bytes


@dataclass(frozen=True)
class AckFrame:
    largest_acked: int
    acked: Tuple[int, ...]


@dataclass(frozen=True)
class PathChallengeFrame:
    data: bytes


@dataclass(frozen=True)
class PathResponseFrame:
    data: bytes


@dataclass(frozen=True)
class HandshakeDoneFrame:
    pass


@dataclass(frozen=True)
class NewConnectionIdFrame:
    seq: int
    cid: ConnectionId


Frame = Union[
    CryptoFrame,
    StreamFrame,
    AckFrame,
    PathChallengeFrame,
    PathResponseFrame,
    HandshakeDoneFrame,
    NewConnectionIdFrame,
]

FRAME_TYPES = {
    CryptoFrame: FrameType.CRYPTO,
    StreamFrame: FrameType.STREAM,
    AckFrame: FrameType.ACK,
    PathChallengeFrame: FrameType.PATH_CHALLENGE,
    PathResponseFrame: FrameType.PATH_RESPONSE,
    HandshakeDoneFrame: FrameType.HANDSHAKE_DONE,
    NewConnectionIdFrame: FrameType.NEW_CONNECTION_ID,
}


def frame_type(frame: Frame) -> FrameType:
    return FRAME_TYPES[type(frame)]


# handshake messages carried in CRYPTO frames


class HandshakeType(IntEnum):
    CLIENT_HELLO = 0x01
    SERVER_HELLO = 0x02
    FINISHED = 0x14


@dataclass(frozen=True)
class ClientHello:
    sni: str
    client_random: bytes
    client_dh_pub: int
    disable_active_migration: bool = False

    def __post_init__(self) -> None:
        _check_hostname(self.sni)
        if len(self.client_random) != 8:
            raise ValueError("client_random is 8 bytes")


@dataclass(frozen=True)
class ServerHello:
    server_random: bytes
    server_dh_pub: int

    def __post_init__(self) -> None:
        if len(self.server_random) != 8:
            raise ValueError("server_random is 8 bytes")


@dataclass(frozen=True)
class Finished:
    verify: bytes

    def __post_init__(self) -> None:
        if len(self.verify) != 8:
            raise ValueError("verify data is 8 bytes")


HandshakeMessage = Union[ClientHello, ServerHello, Finished]


def _check_hostname(name: str) -> None:
    if not isinstance(name, str) or not name or len(name) > 253 or not name.isascii():
        raise ValueError(f"invalid hostname {name!r}")


def encode_handshake(msg: HandshakeMessage) -> bytes:
    if isinstance(msg, ClientHello):
        sni = msg.sni.encode("ascii")
        return (
            bytes([HandshakeType.CLIENT_HELLO, len(sni)])
            + sni
            + msg.client_random
            + msg.client_dh_pub.to_bytes(8, "big")
            + bytes([1 if msg.disable_active_migration else 0])
        )
    if isinstance(msg, ServerHello):
        return (
            bytes([HandshakeType.SERVER_HELLO])
            + msg.server_random
            + msg.server_dh_pub.to_bytes(8, "big")
        )
    if isinstance(msg, Finished):
        return bytes([HandshakeType.FINISHED]) + msg.verify
    raise EncodingError(f"not a handshake message: {msg!r}")


def decode_handshake(data: bytes) -> HandshakeMessage:
    if not data:
        raise WireError("empty handshake message")
    kind = data[0]
    try:
        if kind == HandshakeType.CLIENT_HELLO:
            n = data[1] if len(data) > 1 else -1
            if n < 1 or len(data) != 2 + n + 17:
                raise WireError("bad ClientHello length")
            sni = data[2 : 2 + n].decode("ascii")
            rest = data[2 + n :]
            if rest[16] > 1:
                raise WireError("bad ClientHello flags")
            return ClientHello(
                sni=sni,
                client_random=rest[:8],
                client_dh_pub=int.from_bytes(rest[8:16], "big"),
                disable_active_migration=bool(rest[16]),
            )
        if kind == HandshakeType.SERVER_HELLO:
            if len(data) != 17:
                raise WireError("bad ServerHello length")
            return ServerHello(data[1:9], int.from_bytes(data[9:17], "big"))
        if kind == HandshakeType.FINISHED:
            if len(data) != 9:
                raise WireError("bad Finished length")
            return Finished(data[1:9])
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, WireError):
            raise
        raise WireError(str(exc)) from exc
    raise WireError(f"unknown handshake type {kind:#x}")


# frame codec


def _u64(value: int) -> bytes:
    return value.to_bytes(8, "big")


def encode_frame(frame: Frame) -> bytes:
    if isinstance(frame, StreamFrame):
        return (
            b"\x08"
            + _u64(frame.stream_id)
            + _u64(frame.offset)
            + (b"\x01" if frame.fin else b"\x00")
            + len(frame.data).to_bytes(2, "big")
            + frame.data
        )
    if isinstance(frame, AckFrame):
        if not frame.acked or len(frame.acked) > 0xFFFF:
            raise EncodingError("ACK frame needs 1..65535 packet numbers")
        return (
            b"\x02"
            + _u64(frame.largest_acked)
            + len(frame.acked).to_bytes(2, "big")
            + b"".join(_u64(pn) for pn in frame.acked)
        )
    if isinstance(frame, CryptoFrame):
        return b"\x06" + _u64(frame.offset) + len(frame.data).to_bytes(2, "big") + frame.data
    if isinstance(frame, (PathChallengeFrame, PathResponseFrame)):
        if len(frame.data) != 8:
            raise EncodingError("path frames carry exactly 8 bytes")
        return bytes([frame_type(frame)]) + frame.data
    if isinstance(frame, HandshakeDoneFrame):
        return b"\x1e"
    if isinstance(frame, NewConnectionIdFrame):
        return b"\x18" + _u64(frame.seq) + frame.cid.value
    raise EncodingError(f"not a frame: {frame!r}")


def encode_frames(frames) -> bytes:
    return b"".join(encode_frame(f) for f in frames)


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise WireError("truncated")
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def uint(self, n: int) -> int:
        return int.from_bytes(self.take(n), "big")

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def decode_frames(data: bytes) -> Tuple[Frame, ...]:
    r = _Reader(data)
    frames = []
    while r.remaining:
        kind = r.uint(1)
        if kind == FrameType.STREAM:
            stream_id, offset = r.uint(8), r.uint(8)
            fin = r.uint(1)
            if fin > 1:
                raise WireError("bad fin flag")
            frames.append(StreamFrame(stream_id, offset, bool(fin), r.take(r.uint(2))))
        elif kind == FrameType.ACK:
            largest, count = r.uint(8), r.uint(2)
            acked = tuple(r.uint(8) for _ in range(count))
            if not acked or max(acked) != largest:
                raise WireError("inconsistent ACK frame")
            frames.append(AckFrame(largest, acked))
        elif kind == FrameType.CRYPTO:
            offset = r.uint(8)
            frames.append(CryptoFrame(offset, r.take(r.uint(2))))
        elif kind == FrameType.PATH_CHALLENGE:
            frames.append(PathChallengeFrame(r.take(8)))
        elif kind == FrameType.PATH_RESPONSE:
            frames.append(PathResponseFrame(r.take(8)))
        elif kind == FrameType.HANDSHAKE_DONE:
            frames.append(HandshakeDoneFrame())
        elif kind == FrameType.NEW_CONNECTION_ID:
            frames.append(NewConnectionIdFrame(r.uint(8), ConnectionId(r.take(8))))
        else:
            raise WireError(f"unknown frame type {kind:#x}")
    if not frames:
        raise WireError("empty payload")
    return tuple(frames)


# packets


@dataclass(frozen=True)
class Packet:
    header_form: HeaderForm
    dcid: ConnectionId
    packet_number: int
    payload: Tuple[Frame, ...]
    long_type: Optional[LongType] = None
    version: Optional[int] = None
    scid: Optional[ConnectionId] = None

    @classmethod
    def long(cls, long_type, dcid, scid, packet_number, payload) -> "Packet":
        return cls(HeaderForm.LONG, dcid, packet_number, tuple(payload), LongType(long_type), VERSION, scid)

    @classmethod
    def short(cls, dcid, packet_number, payload) -> "Packet":
        return cls(HeaderForm.SHORT, dcid, packet_number, tuple(payload))

    @property
    def is_long(self) -> bool:
        return self.header_form is HeaderForm.LONG


@dataclass(frozen=True)
class PacketHeader:
    """What any on-path observer sees without keys."""

    header_form: HeaderForm
    dcid: ConnectionId
    packet_number: int
    payload_length: int
    protected: bytes
    header_bytes: bytes
    long_type: Optional[LongType] = None
    version: Optional[int] = None
    scid: Optional[ConnectionId] = None

    @property
    def is_long(self) -> bool:
        return self.header_form is HeaderForm.LONG


def _validate_packet(p: Packet) -> None:
    if not p.payload:
        raise EncodingError("packet payload must be nonempty")
    if not 0 <= p.packet_number < 2**64:
        raise EncodingError("packet number out of range")
    if p.header_form is HeaderForm.SHORT:
        if p.scid is not None or p.version is not None or p.long_type is not None:
            raise EncodingError("short packets carry only a dcid")
    else:
        if p.scid is None or p.long_type is None or p.version != VERSION:
            raise EncodingError("long packets need type, version 1 and scid")


def _header(p: Packet, payload_length: int) -> bytes:
    tail = _u64(p.packet_number) + payload_length.to_bytes(2, "big")
    if p.header_form is HeaderForm.LONG:
        return (
            bytes([0x80 | p.long_type])
            + p.version.to_bytes(4, "big")
            + p.dcid.value
            + p.scid.value
            + tail
        )
    return b"\x40" + p.dcid.value + tail


def _tag(header: bytes, plaintext: bytes) -> bytes:
    return hashlib.sha256(b"qs-tag" + header + plaintext).digest()[:TAG_LENGTH]


def xor_bytes(data: bytes, keystream: bytes) -> bytes:
    n = len(data)
    if n == 0:
        return b""
    return (int.from_bytes(data, "big") ^ int.from_bytes(keystream[:n], "big")).to_bytes(n, "big")


def protected_length(frames) -> int:
    """Number of keystream bytes needed to protect ``frames``."""
    return len(encode_frames(frames)) + TAG_LENGTH


def encode_packet(p: Packet, protection: bytes) -> bytes:
    _validate_packet(p)
    plain = encode_frames(p.payload)
    length = len(plain) + TAG_LENGTH
    if len(protection) < length:
        raise EncodingError("keystream shorter than payload")
    header = _header(p, length)
    if len(header) + length > MAX_PACKET_SIZE:
        raise EncodingError(f"packet of {len(header) + length} bytes exceeds {MAX_PACKET_SIZE}")
    return header + xor_bytes(plain + _tag(header, plain), protection)


def parse_header(data: bytes) -> PacketHeader:
    """Header-only view; needs no keys."""
    r = _Reader(data)
    try:
        first = r.uint(1)
        if first & 0xC0 == 0x80 and first & 0x3F in (0, 1):
            version = r.uint(4)
            dcid, scid = ConnectionId(r.take(8)), ConnectionId(r.take(8))
            pn, length = r.uint(8), r.uint(2)
            header_bytes = data[: r.pos]
            protected = r.take(length)
            fields = dict(long_type=LongType(first & 0x3F), version=version, scid=scid)
            form = HeaderForm.LONG
        elif first == 0x40:
            dcid = ConnectionId(r.take(8))
            pn, length = r.uint(8), r.uint(2)
            header_bytes = data[: r.pos]
            protected = r.take(length)
            fields = {}
            form = HeaderForm.SHORT
        else:
            raise WireError(f"unknown header form byte {first:#x}")
    except WireError:
        raise
    if r.remaining:
        raise WireError("trailing bytes after packet")
    if length < TAG_LENGTH + 1:
        raise WireError("payload too short")
    return PacketHeader(form, dcid, pn, length, protected, header_bytes, **fields)


def decode_packet(data: bytes, protection: bytes) -> Packet:
    """Inverse of :func:`encode_packet`.

    Raises :class:`WireError` for a malformed header and
    :class:`OpaquePayloadError` (carrying the header view) when the payload
    does not decode under ``protection``.
    """
    h = parse_header(data)
    if len(protection) < h.payload_length:
        raise OpaquePayloadError(h, "keystream shorter than payload")
    clear = xor_bytes(h.protected, protection)
    plain, tag = clear[:-TAG_LENGTH], clear[-TAG_LENGTH:]
    if _tag(h.header_bytes, plain) != tag:
        raise OpaquePayloadError(h, "integrity tag mismatch")
    try:
        frames = decode_frames(plain)
    except WireError as exc:
        raise OpaquePayloadError(h, str(exc)) from exc
    return Packet(h.header_form, h.dcid, h.packet_number, frames, h.long_type, h.version, h.scid)


# keystreams


def _counter_keystream(prefix: bytes, length: int) -> bytes:
    base = hashlib.sha256(prefix)
    blocks = []
    for i in range((length + 31) // 32):
        h = base.copy()
        h.update(i.to_bytes(4, "big"))
        blocks.append(h.digest())
    return b"".join(blocks)[:length]


def initial_keystream(dcid: ConnectionId, length: int) -> bytes:
    if not 0 <= length <= MAX_KEYSTREAM:
        raise ValueError(f"keystream length must be within 0..{MAX_KEYSTREAM}")
    return _counter_keystream(INITIAL_LABEL + dcid.value, length)


def session_keystream(
    shared: int,
    client_random: bytes,
    server_random: bytes,
    direction: Direction,
    packet_number: int,
    length: int,
) -> bytes:
    if not 0 <= length <= MAX_KEYSTREAM:
        raise ValueError(f"keystream length must be within 0..{MAX_KEYSTREAM}")
    prefix = (
        SESSION_LABEL
        + shared.to_bytes(8, "big")
        + client_random
        + server_random
        + bytes([Direction(direction)])
        + packet_number.to_bytes(8, "big")
    )
    return _counter_keystream(prefix, length)


def dh_keypair(rng_seed: Union[int, random.Random]) -> Tuple[int, int]:
    """Toy Diffie-Hellman keypair over p = 2**61 - 1, g = 3.  Not secure."""
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    priv = rng.randint(2, DH_PRIME - 2)
    return priv, pow(DH_GENERATOR, priv, DH_PRIME)


def dh_shared(priv: int, peer_pub: int) -> int:
    if not 2 <= priv <= DH_PRIME - 2:
        raise ValueError("private key out of range")
    return pow(peer_pub, priv, DH_PRIME)


def finished_verify(shared: int, client_random: bytes, server_random: bytes, role: str) -> bytes:
    return hashlib.sha256(
        b"qs-finished-" + role.encode() + shared.to_bytes(8, "big") + client_random + server_random
    ).digest()[:8]


# DNS


class DnsKind(IntEnum):
    QUERY = 0
    RESPONSE = 1


@dataclass(frozen=True)
class DnsMessage:
    kind: DnsKind
    txid: int
    hostname: str
    answer_addr: Optional[Address] = None

    def __post_init__(self) -> None:
        _check_hostname(self.hostname)
        if not 0 <= self.txid <= 0xFFFF:
            raise ValueError("txid is 16 bits")
        if (self.kind is DnsKind.RESPONSE) != (self.answer_addr is not None):
            raise ValueError("answer_addr present exactly on responses")


def _encode_addr(addr: Address) -> bytes:
    raw = str(addr).encode("ascii")
    if len(raw) > 255:
        raise EncodingError("address too long")
    return bytes([len(raw)]) + raw


def _decode_addr(r: _Reader) -> Address:
    try:
        return Address.parse(r.take(r.uint(1)).decode("ascii"))
    except UnicodeDecodeError as exc:
        raise WireError("non-ascii address") from exc


def encode_dns(msg: DnsMessage) -> bytes:
    host = msg.hostname.encode("ascii")
    out = DNS_MAGIC + bytes([msg.kind]) + msg.txid.to_bytes(2, "big") + bytes([len(host)]) + host
    if msg.kind is DnsKind.RESPONSE:
        out += _encode_addr(msg.answer_addr)
    return out


def decode_dns(data: bytes) -> DnsMessage:
    r = _Reader(data)
    if r.take(2) != DNS_MAGIC:
        raise WireError("not a DNS message")
    kind = r.uint(1)
    if kind not in (0, 1):
        raise WireError("bad DNS kind")
    txid = r.uint(2)
    try:
        hostname = r.take(r.uint(1)).decode("ascii")
    except UnicodeDecodeError as exc:
        raise WireError("non-ascii hostname") from exc
    answer = _decode_addr(r) if kind == DnsKind.RESPONSE else None
    if r.remaining:
        raise WireError("trailing bytes after DNS message")
    try:
        return DnsMessage(DnsKind(kind), txid, hostname, answer)
    except ValueError as exc:
        raise WireError(str(exc)) from exc


# tunnel


@dataclass(frozen=True)
class TunnelDatagram:
    nonce: int
    opaque: bytes
    proxy_addr: Optional[Address] = None


def _tunnel_keystream(key: bytes, nonce: int, length: int) -> bytes:
    return _counter_keystream(key + nonce.to_bytes(8, "big"), length)


def tunnel_encap(inner: bytes, tunnel_key: bytes, nonce: int, proxy_addr: Optional[Address] = None) -> TunnelDatagram:
    if len(tunnel_key) != 32:
        raise ValueError("tunnel keys are 32 bytes")
    if len(inner) > 0xFFFF:
        raise EncodingError("inner datagram too large")
    return TunnelDatagram(nonce, xor_bytes(inner, _tunnel_keystream(tunnel_key, nonce, len(inner))), proxy_addr)


def tunnel_decap(td: TunnelDatagram, tunnel_key: bytes) -> bytes:
    """Undo :func:`tunnel_encap`.  A wrong key yields bytes that fail
    :func:`decode_inner`; callers must parse before forwarding."""
    return xor_bytes(td.opaque, _tunnel_keystream(tunnel_key, td.nonce, len(td.opaque)))


def encode_tunnel(td: TunnelDatagram) -> bytes:
    return TUNNEL_MAGIC + td.nonce.to_bytes(8, "big") + len(td.opaque).to_bytes(2, "big") + td.opaque


def decode_tunnel(data: bytes, proxy_addr: Optional[Address] = None) -> TunnelDatagram:
    r = _Reader(data)
    if r.take(2) != TUNNEL_MAGIC:
        raise WireError("not a tunnel datagram")
    nonce = r.uint(8)
    opaque = r.take(r.uint(2))
    if r.remaining:
        raise WireError("trailing bytes after tunnel datagram")
    return TunnelDatagram(nonce, opaque, proxy_addr)


@dataclass(frozen=True)
class InnerDatagram:
    """The addressed datagram carried inside a tunnel."""

    src: Address
    dst: Address
    payload: bytes


def encode_inner(inner: InnerDatagram) -> bytes:
    body = (
        INNER_MAGIC
        + _encode_addr(inner.src)
        + _encode_addr(inner.dst)
        + len(inner.payload).to_bytes(2, "big")
        + inner.payload
    )
    return body + hashlib.sha256(body).digest()[:TAG_LENGTH]


def decode_inner(data: bytes) -> InnerDatagram:
    if len(data) < TAG_LENGTH + 2:
        raise WireError("inner datagram too short")
    body, tag = data[:-TAG_LENGTH], data[-TAG_LENGTH:]
    if hashlib.sha256(body).digest()[:TAG_LENGTH] != tag:
        raise WireError("inner datagram check failed")
    r = _Reader(body)
    if r.take(2) != INNER_MAGIC:
        raise WireError("bad inner magic")
    src, dst = _decode_addr(r), _decode_addr(r)
    payload = r.take(r.uint(2))
    if r.remaining:
        raise WireError("trailing bytes in inner datagram")
    return InnerDatagram(src, dst, payload)


# classification helpers shared by the censor and the client policy


class DatagramKind(Enum):
    DNS_QUERY = "DNS_QUERY"
    DNS_RESPONSE = "DNS_RESPONSE"
    LONG_HEADER = "LONG_HEADER"
    SHORT_HEADER = "SHORT_HEADER"
    TUNNEL = "TUNNEL"
    OTHER = "OTHER"


def datagram_kind(data: bytes) -> DatagramKind:
    """Cheap first-byte classification, no keys and no full parse."""
    if data[:2] == TUNNEL_MAGIC:
        return DatagramKind.TUNNEL
    if data[:2] == DNS_MAGIC and len(data) > 2:
        return DatagramKind.DNS_QUERY if data[2] == DnsKind.QUERY else DatagramKind.DNS_RESPONSE
    if data[:1] in (b"\x80", b"\x81"):
        return DatagramKind.LONG_HEADER
    if data[:1] == b"\x40":
        return DatagramKind.SHORT_HEADER
    return DatagramKind.OTHER
