"""The dual-path client: DNS and handshake through the tunnel, the rest direct.

:class:`ClientHost` plays the role the firewall rules play on a real host.
It classifies every datagram leaving the QUIC stack and either wraps it for
the tunnel or sends it on the direct interface, and after the handshake it
moves the connection onto the direct path exactly once.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

from .hosts import TimerSlots
from .netsim import Datagram, Simulator
from .transport import (
    ConnectionFailed,
    ConnectionState,
    HandshakeComplete,
    Migrated,
    Outgoing,
    PreconditionError,
    StreamDelivered,
    TransportConfig,
    client_connect,
)
from .wire import (
    Address,
    DatagramKind,
    DnsKind,
    DnsMessage,
    InnerDatagram,
    WireError,
    datagram_kind,
    decode_dns,
    decode_inner,
    decode_tunnel,
    encode_dns,
    encode_inner,
    encode_tunnel,
    tunnel_decap,
    tunnel_encap,
)

logger = logging.getLogger(__name__)

REQUEST_STREAM = 0
DNS_PORT = 53000


class PolicyMode(Enum):
    QUICSTEP = "quicstep"
    NATIVE = "native"
    FULL_TUNNEL = "tunnel"


class PathChoice(Enum):
    TUNNEL = "TUNNEL"
    DIRECT = "DIRECT"


def classify(policy_mode: PolicyMode, kind: DatagramKind) -> PathChoice:
    if policy_mode is PolicyMode.NATIVE:
        return PathChoice.DIRECT
    if policy_mode is PolicyMode.FULL_TUNNEL:
        return PathChoice.TUNNEL
    if kind is DatagramKind.SHORT_HEADER:
        return PathChoice.DIRECT
    # DNS, long headers and anything unrecognised stay hidden
    return PathChoice.TUNNEL


@dataclass
class TunnelEndpoint:
    proxy_addr: Address
    key: bytes
    outer_addr: Address  # client socket that talks to the proxy
    inner_addr: Address  # address of the client's tunnel interface
    tx_nonce: int = -1
    rx_nonce: int = -1

    def wrap(self, dst: Address, payload: bytes) -> Datagram:
        # client-to-proxy nonces are odd
        self.tx_nonce += 2
        inner = encode_inner(InnerDatagram(self.inner_addr, dst, payload))
        td = tunnel_encap(inner, self.key, self.tx_nonce, self.proxy_addr)
        return Datagram(self.outer_addr, self.proxy_addr, encode_tunnel(td))

    def unwrap(self, dgram: Datagram) -> InnerDatagram:
        td = decode_tunnel(dgram.payload, self.proxy_addr)
        if td.nonce <= self.rx_nonce:
            raise WireError(f"replayed tunnel nonce {td.nonce}")
        inner = decode_inner(tunnel_decap(td, self.key))
        self.rx_nonce = td.nonce
        return inner


@dataclass
class PathPolicy:
    policy_mode: PolicyMode
    tunnel: Optional[TunnelEndpoint] = None
    direct_addr_map: Dict[str, Address] = field(default_factory=dict)
    rotate_cid_on_migration: bool = True

    def __post_init__(self) -> None:
        if self.policy_mode is not PolicyMode.NATIVE and self.tunnel is None:
            raise ValueError(f"{self.policy_mode.value} needs a tunnel endpoint")


@dataclass
class FetchOutcome:
    success: bool
    first_byte_time: Optional[int] = None
    completion_time: Optional[int] = None
    reason: Optional[str] = None
    response: bytes = b""
    migrations: int = 0
    dns_attempts: int = 0
    handshake_attempts: int = 0


class ClientHost:
    """Client node handler.  One fetch per instance."""

    def __init__(self, policy: PathPolicy, direct_addr: Address, resolver_addr: Address,
                 transport_cfg: TransportConfig, extra_interfaces: Optional[List[Address]] = None):
        self.policy = policy
        self.direct_addr = direct_addr
        self.resolver_addr = resolver_addr
        self.cfg = transport_cfg
        self.interfaces = {direct_addr.host: direct_addr}
        for addr in extra_interfaces or []:
            self.interfaces[addr.host] = addr
        if policy.tunnel is not None:
            self.interfaces.setdefault(policy.tunnel.outer_addr.host, policy.tunnel.outer_addr)
        self.down: set = set()
        self.conn: Optional[ConnectionState] = None
        self.events: list = []
        self.done = False
        self.outcome: Optional[FetchOutcome] = None
        self.timers = TimerSlots(direct_addr.host)
        self._rng = random.Random(transport_cfg.seed ^ 0x5EED)
        self._hostname = ""
        self._request = b""
        self._server_addr: Optional[Address] = None
        self._start = 0
        self._response = bytearray()
        self._first_byte: Optional[int] = None
        self._txid: Optional[int] = None
        self._dns_attempts = 0
        self._migrations = 0
        self._pending_migration: Optional[tuple] = None

    def attach(self, sim: Simulator) -> None:
        for host in self.interfaces:
            sim.attach(host, self)

    # fetch lifecycle

    def start_fetch(self, sim: Simulator, hostname: str, request: bytes,
                    server_addr: Optional[Address] = None) -> None:
        self._hostname = hostname
        self._request = request
        self._start = sim.now
        self.policy.direct_addr_map.clear()
        if server_addr is not None:
            self.policy.direct_addr_map[hostname] = server_addr
            self._connect(sim, server_addr)
        else:
            self._txid = self._rng.getrandbits(16)
            self._send_dns(sim)

    def schedule_migration(self, sim: Simulator, at: int, new_local: Address,
                           interface_down: Optional[str] = None) -> None:
        """Move the connection to ``new_local`` at ``at``, as a roaming host would."""
        self._pending_migration = (new_local, interface_down)
        self.timers.arm(sim, "migrate", at)

    def _finish(self, success: bool, now: int, reason: Optional[str] = None) -> None:
        if self.done:
            return
        self.done = True
        self.outcome = FetchOutcome(
            success=success,
            first_byte_time=None if self._first_byte is None else self._first_byte - self._start,
            completion_time=now - self._start if success else None,
            reason=reason,
            response=bytes(self._response),
            migrations=self._migrations,
            dns_attempts=self._dns_attempts,
            handshake_attempts=0 if self.conn is None else self.conn.handshake_retries + 1,
        )

    def fail_deadline(self, now: int) -> None:
        self._finish(False, now, "DEADLINE")

    # DNS

    def _send_dns(self, sim: Simulator) -> None:
        self._dns_attempts += 1
        query = encode_dns(DnsMessage(DnsKind.QUERY, self._txid, self._hostname))
        self._egress(sim, query, (Address(self.direct_addr.host, DNS_PORT), self.resolver_addr), "DNS_QUERY")
        self.timers.arm(sim, "dns", sim.now + self.cfg.handshake_timeout_us)

    def _on_dns(self, sim: Simulator, payload: bytes) -> None:
        try:
            msg = decode_dns(payload)
        except WireError:
            return
        if msg.kind is not DnsKind.RESPONSE or msg.txid != self._txid or self._server_addr is not None:
            return
        self.timers.arm(sim, "dns", None)
        self.policy.direct_addr_map[msg.hostname] = msg.answer_addr
        self._connect(sim, msg.answer_addr)

    # QUIC

    def _local_for_handshake(self) -> Address:
        if self.policy.policy_mode is PolicyMode.NATIVE:
            return self.direct_addr
        return self.policy.tunnel.inner_addr

    def _connect(self, sim: Simulator, server_addr: Address) -> None:
        self._server_addr = server_addr
        self.conn, out = client_connect(self._hostname, server_addr, self.cfg, sim.now,
                                        local_addr=self._local_for_handshake())
        self._after(sim, [], out)

    def _after(self, sim: Simulator, events: list, out: List[Outgoing]) -> None:
        now = sim.now
        queue = list(events)
        while queue:
            ev = queue.pop(0)
            self.events.append(ev)
            if isinstance(ev, HandshakeComplete):
                if self.policy.policy_mode is PolicyMode.QUICSTEP:
                    more, extra = self.conn.migrate_active_path(
                        (self.direct_addr, self._server_addr), self.policy.rotate_cid_on_migration, now)
                    queue.extend(more)
                    out = out + extra
                out = out + self.conn.send_stream(REQUEST_STREAM, self._request, True, now)
            elif isinstance(ev, Migrated):
                self._migrations += 1
            elif isinstance(ev, StreamDelivered) and ev.stream_id == REQUEST_STREAM:
                if ev.data and self._first_byte is None:
                    self._first_byte = now
                self._response += ev.data
                if ev.fin:
                    self._finish(True, now)
            elif isinstance(ev, ConnectionFailed):
                self._finish(False, now, ev.reason.value)
        for item in out:
            self._egress(sim, item.data, item.path, "+".join(item.frames))
        if self.conn is not None:
            self.timers.arm(sim, "conn", None if self.done else self.conn.next_timer())

    def _egress(self, sim: Simulator, data: bytes, path, note: str) -> None:
        local, remote = path
        choice = classify(self.policy.policy_mode, datagram_kind(data))
        if choice is PathChoice.TUNNEL:
            tunnel = self.policy.tunnel
            sim.send(tunnel.outer_addr.host, tunnel.wrap(remote, data), note=f"TUN[{note}]")
            return
        if local is None or local.host not in self.interfaces:
            local = Address(self.direct_addr.host, local.port if local is not None else self.direct_addr.port)
        if local.host in self.down:
            return
        sim.send(local.host, Datagram(local, remote, data), note=note)

    # simulator callbacks

    def on_datagram(self, sim: Simulator, node: str, dgram: Datagram) -> None:
        if node in self.down or self.done:
            return
        tunnel = self.policy.tunnel
        if tunnel is not None and dgram.src == tunnel.proxy_addr and datagram_kind(dgram.payload) is DatagramKind.TUNNEL:
            try:
                inner = tunnel.unwrap(dgram)
            except WireError as exc:
                logger.debug("tunnel decap failed: %s", exc)
                return
            payload, path = inner.payload, (inner.dst, inner.src)
        else:
            payload, path = dgram.payload, (dgram.dst, dgram.src)
        if datagram_kind(payload) is DatagramKind.DNS_RESPONSE:
            self._on_dns(sim, payload)
            return
        if self.conn is None:
            return
        events, out = self.conn.handle_datagram(payload, path, sim.now)
        self._after(sim, events, out)

    def on_timer(self, sim: Simulator, node: str, token: object) -> None:
        if self.done or not self.timers.fire(sim, token):
            return
        if token == "dns":
            if self._dns_attempts > self.cfg.max_retries:
                self._finish(False, sim.now, "TIMEOUT")
            else:
                self._send_dns(sim)
        elif token == "migrate":
            new_local, down = self._pending_migration
            if down is not None:
                self.down.add(down)
            try:
                events, out = self.conn.migrate_active_path((new_local, self._server_addr),
                                                            self.policy.rotate_cid_on_migration, sim.now,
                                                            probe=True)
            except (PreconditionError, AttributeError):
                return
            self._after(sim, events, out)
        elif token == "conn" and self.conn is not None:
            events, out = self.conn.on_timer(sim.now)
            self._after(sim, events, out)


def fetch(client: ClientHost, sim: Simulator, hostname: str, request: bytes,
          deadline_us: int = 60_000_000, server_addr: Optional[Address] = None) -> FetchOutcome:
    """Run one request to completion, failure or deadline."""
    client.start_fetch(sim, hostname, request, server_addr)
    sim.run_until(lambda s: client.done, sim.now + deadline_us)
    if not client.done:
        client.fail_deadline(sim.now)
    return client.outcome
