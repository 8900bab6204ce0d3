"""The on-path censor and the tunnel proxy."""

from __future__ import annotations

import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

from .netsim import Datagram, Simulator
from .wire import (
    Address,
    ClientHello,
    ConnectionId,
    CryptoFrame,
    DatagramKind,
    DnsKind,
    InnerDatagram,
    LongType,
    OpaquePayloadError,
    WireError,
    datagram_kind,
    decode_dns,
    decode_handshake,
    decode_inner,
    decode_packet,
    decode_tunnel,
    encode_inner,
    encode_tunnel,
    initial_keystream,
    parse_header,
    tunnel_decap,
    tunnel_encap,
)

logger = logging.getLogger(__name__)


class CensorMode(Enum):
    OFF = "OFF"
    DROP_ALL_HANDSHAKE = "DROP_ALL_HANDSHAKE"
    SNI_BLOCKLIST = "SNI_BLOCKLIST"
    DNS_FILTER = "DNS_FILTER"
    MIGRATION_BLOCK = "MIGRATION_BLOCK"


class Action(Enum):
    FORWARD = "FORWARD"
    DROP = "DROP"


class Reason(Enum):
    NONE = "NONE"
    HANDSHAKE_PACKET = "HANDSHAKE_PACKET"
    SNI_MATCH = "SNI_MATCH"
    DNS_MATCH = "DNS_MATCH"
    UNKNOWN_CID_MIGRATION = "UNKNOWN_CID_MIGRATION"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    action: Action
    reason: Reason = Reason.NONE
    hostname: Optional[str] = None

    def __post_init__(self) -> None:
        if (self.action is Action.FORWARD) != (self.reason is Reason.NONE):
            raise ValueError("FORWARD pairs only with reason NONE")

    @property
    def label(self) -> str:
        if self.action is Action.FORWARD:
            return "FORWARD"
        return f"DROP:{self.reason.value}"


FORWARD = Verdict(Action.FORWARD)


@dataclass(frozen=True)
class CensorConfig:
    modes: FrozenSet[CensorMode] = frozenset({CensorMode.OFF})
    sni_blocklist: FrozenSet[str] = frozenset()
    dns_blocklist: FrozenSet[str] = frozenset()
    state_capacity: int = 65536

    def __post_init__(self) -> None:
        object.__setattr__(self, "modes", frozenset(CensorMode(m) for m in self.modes))
        object.__setattr__(self, "sni_blocklist", frozenset(h.lower() for h in self.sni_blocklist))
        object.__setattr__(self, "dns_blocklist", frozenset(h.lower() for h in self.dns_blocklist))
        if CensorMode.SNI_BLOCKLIST in self.modes and not self.sni_blocklist:
            raise PolicyError("SNI_BLOCKLIST mode needs at least one sni entry")
        if CensorMode.DNS_FILTER in self.modes and not self.dns_blocklist:
            raise PolicyError("DNS_FILTER mode needs at least one dns entry")
        if self.state_capacity < 1:
            raise PolicyError("capacity must be positive")

    def has(self, mode: CensorMode) -> bool:
        return mode in self.modes

    def to_lines(self) -> List[str]:
        lines = [f"mode {m.value}" for m in sorted(self.modes, key=lambda m: m.value)]
        lines += [f"sni {h}" for h in sorted(self.sni_blocklist)]
        lines += [f"dns {h}" for h in sorted(self.dns_blocklist)]
        lines.append(f"capacity {self.state_capacity}")
        return lines


def parse_policy_lines(lines: Iterable[str]) -> CensorConfig:
    """Parse ``mode``/``sni``/``dns``/``capacity`` lines; other keys are an error."""
    modes, sni, dns = set(), set(), set()
    capacity = 65536
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        value = value.strip()
        if not value:
            raise PolicyError(f"missing value in {raw!r}")
        if key == "mode":
            try:
                modes.add(CensorMode(value.upper()))
            except ValueError:
                raise PolicyError(f"unknown censor mode {value!r}") from None
        elif key == "sni":
            sni.add(value)
        elif key == "dns":
            dns.add(value)
        elif key == "capacity":
            if not value.isdigit():
                raise PolicyError(f"capacity must be an integer, got {value!r}")
            capacity = int(value)
        else:
            raise PolicyError(f"unknown policy key {key!r}")
    return CensorConfig(frozenset(modes) or frozenset({CensorMode.OFF}), frozenset(sni), frozenset(dns), capacity)


def load_policy(path) -> CensorConfig:
    with open(path) as fh:
        return parse_policy_lines(fh)


@dataclass
class CensorState:
    seen_cids: "OrderedDict[ConnectionId, None]" = field(default_factory=OrderedDict)
    flagged_cids: "OrderedDict[ConnectionId, str]" = field(default_factory=OrderedDict)
    counters: Counter = field(default_factory=Counter)
    evictions: int = 0

    @property
    def total(self) -> int:
        return sum(self.counters.values())


class NotInitialError(ValueError):
    """``extract_sni`` was handed something that is not an Initial packet."""


@dataclass(frozen=True)
class SniResult:
    hostname: Optional[str]
    diagnostic: Optional[str] = None


def extract_sni(initial_packet_bytes: bytes) -> SniResult:
    """Decrypt a client Initial the way an on-path observer can.

    Returns the ClientHello SNI, or ``hostname=None`` with a diagnostic when
    the payload does not parse or carries no ClientHello.
    """
    try:
        header = parse_header(initial_packet_bytes)
    except WireError as exc:
        raise NotInitialError(f"not a QUIC packet: {exc}") from exc
    if header.long_type is not LongType.INITIAL:
        raise NotInitialError("not an Initial packet")
    try:
        packet = decode_packet(initial_packet_bytes, initial_keystream(header.dcid, header.payload_length))
    except OpaquePayloadError as exc:
        return SniResult(None, f"payload does not parse: {exc}")
    for frame in packet.payload:
        if isinstance(frame, CryptoFrame):
            try:
                msg = decode_handshake(frame.data)
            except WireError as exc:
                return SniResult(None, f"bad handshake message: {exc}")
            if isinstance(msg, ClientHello):
                return SniResult(msg.sni)
    return SniResult(None)


def dns_query_hostname(data: bytes) -> Optional[str]:
    """Hostname of a cleartext DNS query, or None."""
    try:
        msg = decode_dns(data)
    except WireError:
        return None
    return msg.hostname if msg.kind is DnsKind.QUERY else None


def _remember(state: CensorState, cid: ConnectionId, capacity: int) -> None:
    if cid in state.seen_cids:
        state.seen_cids.move_to_end(cid)
        return
    state.seen_cids[cid] = None
    while len(state.seen_cids) > capacity:
        state.seen_cids.popitem(last=False)
        state.evictions += 1


def _decide(cfg: CensorConfig, state: CensorState, data: bytes) -> Verdict:
    kind = datagram_kind(data)
    if kind is DatagramKind.TUNNEL:
        return FORWARD
    if kind is DatagramKind.DNS_QUERY:
        if cfg.has(CensorMode.DNS_FILTER):
            host = dns_query_hostname(data)
            if host is not None and host.lower() in cfg.dns_blocklist:
                return Verdict(Action.DROP, Reason.DNS_MATCH, host)
        return FORWARD
    if kind not in (DatagramKind.LONG_HEADER, DatagramKind.SHORT_HEADER):
        return FORWARD
    try:
        header = parse_header(data)
    except WireError:
        return FORWARD

    if header.is_long:
        if cfg.has(CensorMode.MIGRATION_BLOCK):
            _remember(state, header.dcid, cfg.state_capacity)
            _remember(state, header.scid, cfg.state_capacity)
        if cfg.has(CensorMode.DROP_ALL_HANDSHAKE):
            return Verdict(Action.DROP, Reason.HANDSHAKE_PACKET)
        if cfg.has(CensorMode.SNI_BLOCKLIST):
            for cid in (header.dcid, header.scid):
                if cid in state.flagged_cids:
                    return Verdict(Action.DROP, Reason.SNI_MATCH, state.flagged_cids[cid])
            if header.long_type is LongType.INITIAL:
                sni = extract_sni(data).hostname
                if sni is not None and sni.lower() in cfg.sni_blocklist:
                    for cid in (header.dcid, header.scid):
                        state.flagged_cids[cid] = sni
                        while len(state.flagged_cids) > cfg.state_capacity:
                            state.flagged_cids.popitem(last=False)
                    return Verdict(Action.DROP, Reason.SNI_MATCH, sni)
        return FORWARD

    if cfg.has(CensorMode.MIGRATION_BLOCK) and header.dcid not in state.seen_cids:
        return Verdict(Action.DROP, Reason.UNKNOWN_CID_MIGRATION)
    return FORWARD


def inspect(cfg: CensorConfig, state: CensorState, datagram: bytes) -> Tuple[Verdict, CensorState]:
    """Classify one datagram.  Total: every input yields a verdict.

    ``state`` is updated in place and returned, so callers must serialize
    calls per censor instance.
    """
    if cfg.modes == {CensorMode.OFF}:
        verdict = FORWARD
    else:
        verdict = _decide(cfg, state, datagram)
    state.counters[verdict.label] += 1
    return verdict, state


class CensorNode:
    """Adapter that runs :func:`inspect` on every datagram transiting a node."""

    def __init__(self, cfg: CensorConfig):
        self.cfg = cfg
        self.state = CensorState()

    def transit(self, sim: Simulator, node: str, dgram: Datagram) -> Tuple[bool, str]:
        verdict, self.state = inspect(self.cfg, self.state, dgram.payload)
        return verdict.action is Action.FORWARD, verdict.label


# proxy


@dataclass
class _Flow:
    tunnel_endpoint: Address  # outer client address
    inner_src: Address
    inner_dst: Address


@dataclass
class ProxyState:
    address: Address
    keys: Dict[str, bytes]  # client host -> tunnel key
    next_port: int = 20000
    nat: Dict[Tuple[Address, Address, Address], int] = field(default_factory=dict)
    flows: Dict[int, _Flow] = field(default_factory=dict)
    tx_nonce: Dict[str, int] = field(default_factory=dict)
    rx_nonce: Dict[str, int] = field(default_factory=dict)
    diagnostics: List[str] = field(default_factory=list)


def proxy_forward(state: ProxyState, dgram: Datagram, now: int) -> List[Datagram]:
    """Decapsulate client tunnel traffic toward its destination and wrap
    replies from a mapped flow back into the tunnel."""
    if datagram_kind(dgram.payload) is DatagramKind.TUNNEL and dgram.dst == state.address:
        key = state.keys.get(dgram.src.host)
        if key is None:
            state.diagnostics.append(f"{now}: no tunnel key for {dgram.src}")
            return []
        try:
            td = decode_tunnel(dgram.payload, state.address)
            if td.nonce <= state.rx_nonce.get(dgram.src.host, -1):
                raise WireError(f"replayed nonce {td.nonce}")
            inner = decode_inner(tunnel_decap(td, key))
        except WireError as exc:
            state.diagnostics.append(f"{now}: decap failed from {dgram.src}: {exc}")
            return []
        state.rx_nonce[dgram.src.host] = td.nonce
        flow_key = (dgram.src, inner.src, inner.dst)
        port = state.nat.get(flow_key)
        if port is None:
            port = state.next_port
            state.next_port += 1
            state.nat[flow_key] = port
            state.flows[port] = _Flow(dgram.src, inner.src, inner.dst)
        return [Datagram(Address(state.address.host, port), inner.dst, inner.payload)]

    flow = state.flows.get(dgram.dst.port)
    if flow is None or dgram.src != flow.inner_dst:
        state.diagnostics.append(f"{now}: no flow for {dgram.src}->{dgram.dst}")
        return []
    host = flow.tunnel_endpoint.host
    # proxy-to-client nonces are even, client-to-proxy nonces odd
    nonce = state.tx_nonce.get(host, 0) + 2
    state.tx_nonce[host] = nonce
    inner = encode_inner(InnerDatagram(dgram.src, flow.inner_src, dgram.payload))
    td = tunnel_encap(inner, state.keys[host], nonce)
    return [Datagram(state.address, flow.tunnel_endpoint, encode_tunnel(td))]


class ProxyHost:
    def __init__(self, address: Address, keys: Dict[str, bytes]):
        self.state = ProxyState(address, dict(keys))

    def on_datagram(self, sim: Simulator, node: str, dgram: Datagram) -> None:
        for out in proxy_forward(self.state, dgram, sim.now):
            sim.send(node, out)

    def on_timer(self, sim: Simulator, node: str, token: object) -> None:
        pass
