import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quicstep_lab.middlebox import (
    Action,
    CensorConfig,
    CensorMode,
    CensorState,
    NotInitialError,
    PolicyError,
    ProxyState,
    Reason,
    Verdict,
    dns_query_hostname,
    extract_sni,
    inspect,
    load_policy,
    parse_policy_lines,
    proxy_forward,
)
from quicstep_lab.netsim import Datagram
from quicstep_lab.transport import TransportConfig, client_connect
from quicstep_lab.wire import (
    Address,
    ConnectionId,
    CryptoFrame,
    DnsKind,
    DnsMessage,
    HandshakeDoneFrame,
    InnerDatagram,
    LongType,
    Packet,
    ServerHello,
    decode_inner,
    decode_tunnel,
    encode_dns,
    encode_handshake,
    encode_inner,
    encode_packet,
    encode_tunnel,
    initial_keystream,
    protected_length,
    tunnel_decap,
    tunnel_encap,
)

S = Address("server", 443)
PROXY = Address("proxy", 51820)


def censor(*modes, sni=(), dns=(), capacity=65536):
    return CensorConfig(frozenset(modes), frozenset(sni), frozenset(dns), capacity)


def client_initial(host="blocked.example", seed=1):
    _, out = client_connect(host, S, TransportConfig(seed=seed), 0)
    return out[0].data


def short(dcid: ConnectionId):
    p = Packet.short(dcid, 1, (HandshakeDoneFrame(),))
    return encode_packet(p, bytes(protected_length(p.payload)))


def long(long_type, dcid, scid):
    p = Packet.long(long_type, dcid, scid, 0, (CryptoFrame(0, b"x"),))
    return encode_packet(p, bytes(protected_length(p.payload)))


def wrap(data):
    inner = encode_inner(InnerDatagram(Address("tun0", 1), S, data))
    return encode_tunnel(tunnel_encap(inner, bytes(32), 1))


CID_A = ConnectionId(b"AAAAAAAA")
CID_B = ConnectionId(b"BBBBBBBB")


def test_sni_blocklist_drops_matching_initial():
    cfg = censor(CensorMode.SNI_BLOCKLIST, sni=["Blocked.Example"])
    verdict, state = inspect(cfg, CensorState(), client_initial("blocked.example"))
    assert verdict == Verdict(Action.DROP, Reason.SNI_MATCH, "blocked.example")
    verdict, _ = inspect(cfg, CensorState(), client_initial("allowed.example"))
    assert verdict.action is Action.FORWARD
    # case-insensitive, but no suffix or wildcard matching
    verdict, _ = inspect(cfg, CensorState(), client_initial("BLOCKED.example"))
    assert verdict.action is Action.DROP
    verdict, _ = inspect(cfg, CensorState(), client_initial("www.blocked.example"))
    assert verdict.action is Action.FORWARD


def test_sni_mode_chains_followup_packets_of_flagged_connection():
    cfg = censor(CensorMode.SNI_BLOCKLIST, sni=["blocked.example"])
    state = CensorState()
    conn, out = client_connect("blocked.example", S, TransportConfig(seed=5), 0)
    inspect(cfg, state, out[0].data)
    followup = long(LongType.HANDSHAKE, ConnectionId(b"zzzzzzzz"), conn.local_cids[0])
    verdict, _ = inspect(cfg, state, followup)
    assert verdict.reason is Reason.SNI_MATCH


def test_tunnel_always_forwarded():
    cfg = censor(CensorMode.SNI_BLOCKLIST, CensorMode.DROP_ALL_HANDSHAKE, CensorMode.MIGRATION_BLOCK,
                 CensorMode.DNS_FILTER, sni=["blocked.example"], dns=["blocked.example"])
    for payload in (client_initial(), encode_dns(DnsMessage(DnsKind.QUERY, 1, "blocked.example")), short(CID_A)):
        assert inspect(cfg, CensorState(), wrap(payload))[0].action is Action.FORWARD


def test_drop_all_handshake_both_directions():
    cfg = censor(CensorMode.DROP_ALL_HANDSHAKE)
    for data in (client_initial(), long(LongType.HANDSHAKE, CID_A, CID_B), long(LongType.INITIAL, CID_B, CID_A)):
        assert inspect(cfg, CensorState(), data)[0].reason is Reason.HANDSHAKE_PACKET
    assert inspect(cfg, CensorState(), short(CID_A))[0].action is Action.FORWARD


def test_dns_filter_drops_queries_only():
    cfg = censor(CensorMode.DNS_FILTER, dns=["blocked.example"])
    query = encode_dns(DnsMessage(DnsKind.QUERY, 1, "blocked.example"))
    answer = encode_dns(DnsMessage(DnsKind.RESPONSE, 1, "blocked.example", S))
    assert inspect(cfg, CensorState(), query)[0] == Verdict(Action.DROP, Reason.DNS_MATCH, "blocked.example")
    assert inspect(cfg, CensorState(), answer)[0].action is Action.FORWARD
    assert dns_query_hostname(query) == "blocked.example" and dns_query_hostname(answer) is None


def test_migration_block_tracks_both_cids():
    cfg = censor(CensorMode.MIGRATION_BLOCK)
    state = CensorState()
    assert inspect(cfg, state, short(CID_A))[0].reason is Reason.UNKNOWN_CID_MIGRATION
    inspect(cfg, state, long(LongType.INITIAL, CID_A, CID_B))
    assert inspect(cfg, state, short(CID_A))[0].action is Action.FORWARD
    assert inspect(cfg, state, short(CID_B))[0].action is Action.FORWARD


def test_migration_block_state_is_lru_bounded():
    cfg = censor(CensorMode.MIGRATION_BLOCK, capacity=4)
    state = CensorState()
    cids = [ConnectionId(bytes([i]) * 8) for i in range(6)]
    for a, b in zip(cids[::2], cids[1::2]):
        inspect(cfg, state, long(LongType.INITIAL, a, b))
    assert len(state.seen_cids) == 4 and state.evictions == 2
    assert inspect(cfg, state, short(cids[0]))[0].action is Action.DROP
    assert inspect(cfg, state, short(cids[5]))[0].action is Action.FORWARD


def test_off_forwards_everything_and_counts():
    state = CensorState()
    for data in (client_initial(), short(CID_A), b"", b"junk"):
        assert inspect(CensorConfig(), state, data)[0].action is Action.FORWARD
    assert state.total == 4 and state.counters["FORWARD"] == 4


def test_extract_sni_cases():
    assert extract_sni(client_initial("example.com")).hostname == "example.com"
    server_init = Packet.long(LongType.INITIAL, CID_A, CID_B, 0,
                              (CryptoFrame(0, encode_handshake(ServerHello(b"s" * 8, 3))),))
    data = encode_packet(server_init, initial_keystream(CID_A, protected_length(server_init.payload)))
    assert extract_sni(data).hostname is None
    flipped = bytearray(client_initial())
    flipped[-3] ^= 0x10
    result = extract_sni(bytes(flipped))
    assert result.hostname is None and result.diagnostic
    with pytest.raises(NotInitialError):
        extract_sni(short(CID_A))
    with pytest.raises(NotInitialError):
        extract_sni(long(LongType.HANDSHAKE, CID_A, CID_B))
    with pytest.raises(NotInitialError):
        extract_sni(wrap(client_initial()))


def test_stateless_modes_are_order_independent():
    rng = random.Random(4)
    datagrams = [client_initial("blocked.example", s) for s in range(3)] + [short(CID_A), long(LongType.HANDSHAKE, CID_A, CID_B)]
    cfg = censor(CensorMode.DROP_ALL_HANDSHAKE)
    base = [inspect(cfg, CensorState(), d)[0] for d in datagrams]
    for _ in range(5):
        order = list(range(len(datagrams)))
        rng.shuffle(order)
        state = CensorState()
        verdicts = {i: inspect(cfg, state, datagrams[i])[0] for i in order}
        assert [verdicts[i] for i in range(len(datagrams))] == base


def test_verdict_invariant():
    with pytest.raises(ValueError):
        Verdict(Action.FORWARD, Reason.SNI_MATCH)
    with pytest.raises(ValueError):
        Verdict(Action.DROP)


def test_policy_file(tmp_path):
    path = tmp_path / "policy.txt"
    path.write_text("# censor\nmode SNI_BLOCKLIST\nmode migration_block\nsni blocked.example\ncapacity 10\n")
    cfg = load_policy(path)
    assert cfg.modes == {CensorMode.SNI_BLOCKLIST, CensorMode.MIGRATION_BLOCK}
    assert cfg.sni_blocklist == {"blocked.example"} and cfg.state_capacity == 10
    assert parse_policy_lines(cfg.to_lines()) == cfg
    assert parse_policy_lines([]).modes == {CensorMode.OFF}
    for bad in (["mode NOPE"], ["mode SNI_BLOCKLIST"], ["capacity x"], ["speed 3"], ["sni"]):
        with pytest.raises(PolicyError):
            parse_policy_lines(bad)


# proxy


def client_tunnel(payload, nonce, key=bytes(32), src=Address("tun0", 40000), dst=S):
    inner = encode_inner(InnerDatagram(src, dst, payload))
    return Datagram(Address("client", 51820), PROXY, encode_tunnel(tunnel_encap(inner, key, nonce)))


def test_proxy_forwards_and_returns_through_tunnel():
    state = ProxyState(PROXY, {"client": bytes(32)})
    out = proxy_forward(state, client_tunnel(b"initial", 1), 0)
    assert len(out) == 1 and out[0].dst == S and out[0].payload == b"initial" and out[0].src.host == "proxy"
    reply = proxy_forward(state, Datagram(S, out[0].src, b"reply"), 1)
    assert len(reply) == 1 and reply[0].dst == Address("client", 51820)
    td = decode_tunnel(reply[0].payload)
    assert td.nonce % 2 == 0
    inner = decode_inner(tunnel_decap(td, bytes(32)))
    assert inner.payload == b"reply" and inner.src == S and inner.dst == Address("tun0", 40000)


def test_proxy_drops_unknown_flows_bad_keys_and_replays():
    state = ProxyState(PROXY, {"client": bytes(32)})
    assert proxy_forward(state, Datagram(S, Address("proxy", 20000), b"x"), 0) == []
    assert proxy_forward(state, client_tunnel(b"x", 1, key=b"\x01" * 32), 0) == []
    assert proxy_forward(state, client_tunnel(b"x", 3), 0)
    assert proxy_forward(state, client_tunnel(b"x", 3), 0) == []
    assert len(state.diagnostics) == 3


def test_proxy_demultiplexes_two_flows():
    state = ProxyState(PROXY, {"client": bytes(32)})
    a = proxy_forward(state, client_tunnel(b"a", 1, src=Address("tun0", 1)), 0)[0]
    b = proxy_forward(state, client_tunnel(b"b", 3, src=Address("tun0", 2)), 0)[0]
    assert a.src != b.src
    back_b = proxy_forward(state, Datagram(S, b.src, b"to-b"), 1)[0]
    back_a = proxy_forward(state, Datagram(S, a.src, b"to-a"), 2)[0]
    assert decode_inner(tunnel_decap(decode_tunnel(back_b.payload), bytes(32))).dst == Address("tun0", 2)
    assert decode_inner(tunnel_decap(decode_tunnel(back_a.payload), bytes(32))).dst == Address("tun0", 1)


ALL_MODES = censor(CensorMode.DROP_ALL_HANDSHAKE, CensorMode.SNI_BLOCKLIST, CensorMode.DNS_FILTER,
                   CensorMode.MIGRATION_BLOCK, sni=["a.example"], dns=["a.example"])


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=300))
def test_inspect_is_total(data):
    state = CensorState()
    verdict, _ = inspect(ALL_MODES, state, data)
    assert isinstance(verdict, Verdict) and state.total == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2000))
def test_bit_flipped_initials_never_crash(seed, index):
    data = bytearray(client_initial(seed=seed))
    data[index % len(data)] ^= 1 << (seed % 8)
    verdict, _ = inspect(ALL_MODES, CensorState(), bytes(data))
    assert isinstance(verdict, Verdict)
