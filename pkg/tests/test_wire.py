import hashlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quicstep_lab.wire import (
    AckFrame,
    Address,
    ClientHello,
    ConnectionId,
    CryptoFrame,
    DatagramKind,
    Direction,
    DnsKind,
    DnsMessage,
    EncodingError,
    Finished,
    HandshakeDoneFrame,
    HeaderForm,
    InnerDatagram,
    LongType,
    NewConnectionIdFrame,
    OpaquePayloadError,
    Packet,
    PathChallengeFrame,
    PathResponseFrame,
    ServerHello,
    StreamFrame,
    WireError,
    datagram_kind,
    decode_dns,
    decode_handshake,
    decode_inner,
    decode_packet,
    decode_tunnel,
    dh_keypair,
    dh_shared,
    encode_dns,
    encode_handshake,
    encode_inner,
    encode_packet,
    encode_tunnel,
    initial_keystream,
    parse_header,
    protected_length,
    session_keystream,
    tunnel_decap,
    tunnel_encap,
)

DCID = ConnectionId(bytes.fromhex("1122334455667788"))
SCID = ConnectionId(bytes.fromhex("99aabbccddeeff00"))


def _oracle_initial(dcid: bytes, length: int) -> bytes:
    out = b""
    i = 0
    while len(out) < length:
        out += hashlib.sha256(b"quicstep-lab-initial-v1" + dcid + i.to_bytes(4, "big")).digest()
        i += 1
    return out[:length]


def _oracle_session(shared, cr, sr, direction, pn, length):
    out = b""
    i = 0
    while len(out) < length:
        out += hashlib.sha256(
            b"qs-session-v1" + shared.to_bytes(8, "big") + cr + sr + bytes([direction])
            + pn.to_bytes(8, "big") + i.to_bytes(4, "big")
        ).digest()
        i += 1
    return out[:length]


def _short(frames=(StreamFrame(0, 0, False, b"hello"),), pn=7):
    return Packet.short(DCID, pn, frames)


# byte layout


def test_short_header_layout_is_normative():
    p = _short()
    ks = bytes(range(1, 200))
    data = encode_packet(p, ks)
    length = protected_length(p.payload)
    assert data[:17] == b"\x40" + DCID.value + (7).to_bytes(8, "big")
    assert data[17:19] == length.to_bytes(2, "big")
    assert len(data) == 19 + length


def test_long_header_layout_is_normative():
    p = Packet.long(LongType.HANDSHAKE, DCID, SCID, 3, (CryptoFrame(0, b"abc"),))
    data = encode_packet(p, bytes(64))
    assert data[0] == 0x81
    assert data[1:5] == (1).to_bytes(4, "big")
    assert data[5:13] == DCID.value and data[13:21] == SCID.value
    assert data[21:29] == (3).to_bytes(8, "big")


def test_zero_keystream_exposes_frame_type_bytes():
    cases = [
        (CryptoFrame(0, b""), 0x06),
        (StreamFrame(1, 0, True, b""), 0x08),
        (AckFrame(1, (1,)), 0x02),
        (PathChallengeFrame(bytes(8)), 0x1A),
        (PathResponseFrame(bytes(8)), 0x1B),
        (HandshakeDoneFrame(), 0x1E),
        (NewConnectionIdFrame(1, SCID), 0x18),
    ]
    for frame, byte in cases:
        data = encode_packet(Packet.short(DCID, 0, (frame,)), bytes(2000))
        assert data[19] == byte


def test_tunnel_layout_is_normative():
    td = tunnel_encap(b"inner bytes", bytes(32), 5)
    data = encode_tunnel(td)
    assert data[:2] == b"\x74\x54"
    assert data[2:10] == (5).to_bytes(8, "big")
    assert data[10:12] == len(b"inner bytes").to_bytes(2, "big")
    assert decode_tunnel(data) == td


# packet codec


def test_payload_is_protected_and_header_is_not():
    p = _short()
    n = protected_length(p.payload)
    a = encode_packet(p, bytes([1]) * n)
    b = encode_packet(p, bytes([2]) * n)
    assert a[:19] == b[:19]
    assert a[19:] != b[19:]
    assert b"hello" not in a


def test_roundtrip_and_header_only_view():
    p = _short()
    ks = random.Random(1).randbytes(protected_length(p.payload))
    data = encode_packet(p, ks)
    assert decode_packet(data, ks) == p
    h = parse_header(data)
    assert h.header_form is HeaderForm.SHORT and h.dcid == DCID and h.packet_number == 7
    with pytest.raises(OpaquePayloadError) as err:
        decode_packet(data, bytes(len(ks)))
    assert err.value.header.dcid == DCID


def test_initial_under_zero_keystream_fails():
    p = Packet.long(LongType.INITIAL, DCID, SCID, 0, (CryptoFrame(0, b"client hello bytes"),))
    ks = initial_keystream(DCID, protected_length(p.payload))
    data = encode_packet(p, ks)
    assert decode_packet(data, initial_keystream(DCID, len(ks))) == p
    with pytest.raises(OpaquePayloadError):
        decode_packet(data, bytes(len(ks)))


def test_oversize_packet_rejected():
    p = _short((StreamFrame(0, 0, False, bytes(1200)), StreamFrame(0, 1200, False, bytes(100))))
    with pytest.raises(EncodingError):
        encode_packet(p, bytes(2000))


def test_full_stream_chunk_fits():
    p = _short((StreamFrame(0, 0, True, bytes(1200)),))
    assert len(encode_packet(p, bytes(2000))) <= 1250


def test_short_packets_carry_no_scid():
    with pytest.raises(EncodingError):
        encode_packet(Packet(HeaderForm.SHORT, DCID, 0, (HandshakeDoneFrame(),), scid=SCID), bytes(64))


def test_empty_payload_rejected():
    with pytest.raises(ValueError):
        encode_packet(Packet.short(DCID, 0, ()), bytes(64))


def test_malformed_headers():
    for data in (b"", b"\x40", b"\x90" + bytes(40), b"\x40" + bytes(17) + b"\xff\xff"):
        with pytest.raises(WireError):
            parse_header(data)


def test_connection_id_rules():
    assert DCID.hex() == "1122334455667788"
    assert ConnectionId.from_hex("1122334455667788") == DCID
    with pytest.raises(ValueError):
        ConnectionId(bytes(7))


# keystreams


def test_initial_keystream_matches_independent_construction():
    assert initial_keystream(DCID, 100) == _oracle_initial(DCID.value, 100)
    assert initial_keystream(DCID, 0) == b""
    other = ConnectionId(bytes.fromhex("1122334455667789"))
    assert initial_keystream(DCID, 32) != initial_keystream(other, 32)


def test_initial_keystream_length_bound():
    assert len(initial_keystream(DCID, 65536)) == 65536
    with pytest.raises(ValueError):
        initial_keystream(DCID, 65537)


def test_session_keystream_matches_independent_construction():
    cr, sr = b"c" * 8, b"s" * 8
    got = session_keystream(12345, cr, sr, Direction.CLIENT_TO_SERVER, 9, 70)
    assert got == _oracle_session(12345, cr, sr, 0, 9, 70)
    assert got != session_keystream(12345, cr, sr, Direction.CLIENT_TO_SERVER, 10, 70)
    assert got != session_keystream(12345, cr, sr, Direction.SERVER_TO_CLIENT, 9, 70)


def test_dh_agreement_and_range():
    a_priv, a_pub = dh_keypair(42)
    b_priv, b_pub = dh_keypair(43)
    assert dh_keypair(42) == (a_priv, a_pub)
    assert dh_shared(a_priv, b_pub) == dh_shared(b_priv, a_pub)
    p = 2**61 - 1
    assert 2 <= a_priv <= p - 2
    assert a_pub == pow(3, a_priv, p)


def test_wrong_shared_secret_cannot_decode():
    cr, sr = b"c" * 8, b"s" * 8
    p = _short()
    n = protected_length(p.payload)
    data = encode_packet(p, session_keystream(777, cr, sr, Direction.SERVER_TO_CLIENT, 7, n))
    with pytest.raises(OpaquePayloadError):
        decode_packet(data, session_keystream(778, cr, sr, Direction.SERVER_TO_CLIENT, 7, n))
    with pytest.raises(OpaquePayloadError):
        decode_packet(data, initial_keystream(DCID, n))


# handshake, DNS, tunnel


def test_handshake_messages_roundtrip():
    for msg in (ClientHello("example.com", b"r" * 8, 99, True), ServerHello(b"s" * 8, 5), Finished(b"f" * 8)):
        assert decode_handshake(encode_handshake(msg)) == msg


@pytest.mark.parametrize("sni", ["", "x" * 254, "café.example"])
def test_bad_sni_rejected(sni):
    with pytest.raises(ValueError):
        ClientHello(sni, b"r" * 8, 1)


def test_dns_roundtrip_and_kind():
    q = DnsMessage(DnsKind.QUERY, 513, "example.com")
    r = DnsMessage(DnsKind.RESPONSE, 513, "example.com", Address("server", 443))
    assert decode_dns(encode_dns(q)) == q and decode_dns(encode_dns(r)) == r
    assert b"example.com" in encode_dns(q)
    assert datagram_kind(encode_dns(q)) is DatagramKind.DNS_QUERY
    assert datagram_kind(encode_dns(r)) is DatagramKind.DNS_RESPONSE
    with pytest.raises(ValueError):
        DnsMessage(DnsKind.QUERY, 1, "a", Address("x", 1))


def test_tunnel_roundtrip_nonce_separation_and_wrong_key():
    key = bytes(range(32))
    inner = encode_inner(InnerDatagram(Address("tun0", 1), Address("server", 443), b"payload"))
    a, b = tunnel_encap(inner, key, 1), tunnel_encap(inner, key, 3)
    assert tunnel_decap(a, key) == inner
    assert a.opaque != b.opaque
    with pytest.raises(WireError):
        decode_inner(tunnel_decap(a, bytes(32)))
    with pytest.raises(ValueError):
        tunnel_encap(inner, b"short", 1)


def test_address_parse():
    assert Address.parse("server:443") == Address("server", 443)
    assert str(Address("a", 1)) == "a:1"
    with pytest.raises(WireError):
        Address.parse("nope")


# properties

cids = st.binary(min_size=8, max_size=8).map(ConnectionId)
pns = st.integers(0, 2**64 - 1)
short_frames = st.one_of(
    st.builds(StreamFrame, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), st.booleans(), st.binary(max_size=300)),
    st.lists(pns, min_size=1, max_size=5, unique=True).map(lambda xs: AckFrame(max(xs), tuple(sorted(xs)))),
    st.binary(min_size=8, max_size=8).map(PathChallengeFrame),
    st.binary(min_size=8, max_size=8).map(PathResponseFrame),
    st.just(HandshakeDoneFrame()),
    st.builds(NewConnectionIdFrame, st.integers(0, 2**64 - 1), cids),
)
long_frames = st.builds(CryptoFrame, st.integers(0, 2**64 - 1), st.binary(max_size=300))


@st.composite
def packets(draw):
    if draw(st.booleans()):
        frames = tuple(draw(st.lists(short_frames, min_size=1, max_size=3)))
        return Packet.short(draw(cids), draw(pns), frames)
    frames = tuple(draw(st.lists(long_frames, min_size=1, max_size=3)))
    return Packet.long(draw(st.sampled_from(list(LongType))), draw(cids), draw(cids), draw(pns), frames)


@settings(max_examples=300, deadline=None)
@given(packets(), st.randoms(use_true_random=False))
def test_codec_roundtrip_property(p, rng):
    ks = rng.randbytes(protected_length(p.payload))
    data = encode_packet(p, ks)
    assert decode_packet(data, ks) == p
    h = parse_header(data)
    assert (h.dcid, h.packet_number, h.header_form) == (p.dcid, p.packet_number, p.header_form)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_parse_header_total(data):
    try:
        parse_header(data)
    except WireError:
        pass


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=500), st.binary(min_size=32, max_size=32), st.integers(0, 2**64 - 1))
def test_tunnel_roundtrip_property(inner, key, nonce):
    td = tunnel_encap(inner, key, nonce)
    assert decode_tunnel(encode_tunnel(td)) == td
    assert tunnel_decap(td, key) == inner
