"""Simulator node handlers for the QUIC server and the DNS resolver."""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Dict, Hashable, List, Optional

from .netsim import Datagram, Simulator
from .transport import (
    ConnectionFailed,
    ConnectionState,
    HandshakeComplete,
    Migrated,
    Outgoing,
    PathValidated,
    Phase,
    StreamDelivered,
    TransportConfig,
    server_accept,
)
from .wire import Address, DnsKind, DnsMessage, LongType, WireError, decode_dns, encode_dns, parse_header

logger = logging.getLogger(__name__)

App = Callable[[str, bytes], bytes]


class TimerSlots:
    """Keeps at most one live simulator timer per key.

    A timer that fires at a time other than the one recorded for its key
    has been superseded and is ignored.
    """

    def __init__(self, node: str):
        self.node = node
        self._at: Dict[Hashable, int] = {}

    def arm(self, sim: Simulator, key: Hashable, deadline: Optional[int]) -> None:
        if deadline is None:
            self._at.pop(key, None)
            return
        current = self._at.get(key)
        if current is None or deadline < current or current < sim.now:
            deadline = max(deadline, sim.now)
            self._at[key] = deadline
            sim.set_timer(self.node, deadline, key)

    def fire(self, sim: Simulator, key: Hashable) -> bool:
        if self._at.get(key) != sim.now:
            return False
        del self._at[key]
        return True


def send_outgoing(sim: Simulator, node: str, items: List[Outgoing]) -> None:
    for item in items:
        local, remote = item.path
        sim.send(node, Datagram(local, remote, item.data), note="+".join(item.frames))


def static_file_app(content: bytes) -> App:
    def app(server_name: str, request: bytes) -> bytes:
        return content if request.startswith(b"GET") else b""
    return app


class ServerHost:
    def __init__(self, address: Address, app: App, cfg: TransportConfig):
        self.address = address
        self.app = app
        self.cfg = cfg
        self.timers = TimerSlots(address.host)
        self.by_cid: Dict[object, ConnectionState] = {}
        self.connections: List[ConnectionState] = []
        self.events: List[tuple] = []  # (conn index, event)
        self._requests: Dict[tuple, bytearray] = {}

    def on_datagram(self, sim: Simulator, node: str, dgram: Datagram) -> None:
        try:
            header = parse_header(dgram.payload)
        except WireError:
            return
        conn = self.by_cid.get(header.dcid)
        if conn is None:
            if header.long_type is not LongType.INITIAL:
                return
            cfg = dataclasses.replace(self.cfg, seed=self.cfg.seed + len(self.connections))
            conn = server_accept(header.dcid, cfg, dgram.dst, dgram.src, sim.now)
            self.connections.append(conn)
        events, out = conn.handle_datagram(dgram.payload, (dgram.dst, dgram.src), sim.now)
        if conn.phase is not Phase.IDLE:
            for cid in conn.local_cids.values():
                self.by_cid[cid] = conn
        self._process(sim, node, conn, events, out)

    def on_timer(self, sim: Simulator, node: str, token: object) -> None:
        if not self.timers.fire(sim, token):
            return
        conn = self.connections[token]
        events, out = conn.on_timer(sim.now)
        self._process(sim, node, conn, events, out)

    def _process(self, sim: Simulator, node: str, conn: ConnectionState, events: list, out: List[Outgoing]) -> None:
        index = self.connections.index(conn)
        for ev in events:
            self.events.append((index, ev))
            if isinstance(ev, StreamDelivered):
                buf = self._requests.setdefault((index, ev.stream_id), bytearray())
                buf += ev.data
                if ev.fin:
                    response = self.app(conn.server_name or "", bytes(buf))
                    out = out + conn.send_stream(ev.stream_id, response, True, sim.now)
        send_outgoing(sim, node, out)
        self.timers.arm(sim, index, conn.next_timer())


class ResolverHost:
    def __init__(self, address: Address, records: Dict[str, Address]):
        self.address = address
        self.records = {k.lower(): v for k, v in records.items()}
        self.queries: List[str] = []

    def on_datagram(self, sim: Simulator, node: str, dgram: Datagram) -> None:
        try:
            msg = decode_dns(dgram.payload)
        except WireError:
            return
        if msg.kind is not DnsKind.QUERY:
            return
        self.queries.append(msg.hostname)
        answer = self.records.get(msg.hostname.lower())
        if answer is None:
            return
        reply = DnsMessage(DnsKind.RESPONSE, msg.txid, msg.hostname, answer)
        sim.send(node, Datagram(dgram.dst, dgram.src, encode_dns(reply)), note="DNS_RESPONSE")

    def on_timer(self, sim: Simulator, node: str, token: object) -> None:
        pass
