"""Deterministic discrete-event network simulator.

Time is an integer count of microseconds.  Links are unidirectional,
store-and-forward, FIFO, with propagation delay, optional serialization
bandwidth and optional loss.  The seeded RNG is the only source of
randomness, and loss draws happen in scheduling order, so a given
(topology, seed, scenario) always produces the same trace.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Protocol, Tuple

import networkx as nx

from .wire import Address, DatagramKind, WireError, datagram_kind, parse_header

logger = logging.getLogger(__name__)

TRACE_HEADER = "time_us,node,direction,form,long_type,dcid_hex,pn,size,verdict"


class ConfigurationError(ValueError):
    pass


class RoutingError(ValueError):
    pass


class NodeRole(Enum):
    CLIENT = "CLIENT"
    SERVER = "SERVER"
    CENSOR = "CENSOR"
    PROXY = "PROXY"
    DNS_RESOLVER = "DNS_RESOLVER"


class TraceDirection(Enum):
    SEND = "SEND"
    RECV = "RECV"
    DROP = "DROP"
    # transit through a middlebox that let the datagram pass
    FWD = "FWD"


@dataclass(frozen=True)
class LinkSpec:
    src: str
    dst: str
    one_way_delay: int
    bandwidth: int = 0  # bytes per second, 0 means infinite
    loss_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.one_way_delay < 0:
            raise ConfigurationError("link delay must be >= 0")
        if self.bandwidth < 0:
            raise ConfigurationError("bandwidth must be >= 0")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ConfigurationError("loss_rate must be within [0, 1]")

    def serialization_us(self, size: int) -> int:
        if not self.bandwidth:
            return 0
        return -(-size * 1_000_000 // self.bandwidth)


def duplex(a: str, b: str, delay: int, bandwidth: int = 0, loss_rate: float = 0.0) -> List[LinkSpec]:
    return [LinkSpec(a, b, delay, bandwidth, loss_rate), LinkSpec(b, a, delay, bandwidth, loss_rate)]


@dataclass
class Topology:
    nodes: Dict[str, NodeRole]
    links: List[LinkSpec]
    # explicit next-hop overrides; everything else follows minimum delay
    routes: Dict[Tuple[str, str], str] = field(default_factory=dict)
    # client-role nodes deliberately attached outside the censored network
    uncensored: FrozenSet[str] = frozenset()

    def nodes_with(self, role: NodeRole) -> List[str]:
        return sorted(n for n, r in self.nodes.items() if r is role)


@dataclass(frozen=True)
class Datagram:
    src: Address
    dst: Address
    payload: bytes

    @property
    def size(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class TraceRecord:
    time: int
    node: str
    direction: TraceDirection
    size: int
    form: str = "-"
    long_type: str = "-"
    dcid_hex: str = "-"
    pn: str = "-"
    verdict: str = "-"
    src: Optional[Address] = None
    dst: Optional[Address] = None
    # frame kinds supplied by the sending endpoint, for trace assertions
    note: str = ""
    payload: bytes = field(default=b"", repr=False)
    uid: int = 0

    def export(self) -> str:
        return ",".join(
            (str(self.time), self.node, self.direction.value, self.form, self.long_type,
             self.dcid_hex, self.pn, str(self.size), self.verdict)
        )


def parse_trace_line(line: str) -> dict:
    parts = line.rstrip("\n").split(",")
    if len(parts) != 9:
        raise ValueError(f"expected 9 fields, got {len(parts)}")
    names = TRACE_HEADER.split(",")
    rec = dict(zip(names, parts))
    rec["time_us"] = int(rec["time_us"])
    rec["size"] = int(rec["size"])
    if rec["direction"] not in {d.value for d in TraceDirection}:
        raise ValueError(f"bad direction {rec['direction']!r}")
    return rec


def summarize(payload: bytes) -> Dict[str, str]:
    kind = datagram_kind(payload)
    if kind is DatagramKind.TUNNEL:
        return {"form": "TUNNEL"}
    if kind in (DatagramKind.DNS_QUERY, DatagramKind.DNS_RESPONSE):
        return {"form": "DNS"}
    if kind in (DatagramKind.LONG_HEADER, DatagramKind.SHORT_HEADER):
        try:
            h = parse_header(payload)
        except WireError:
            return {"form": "OTHER"}
        return {
            "form": h.header_form.value,
            "long_type": h.long_type.name if h.long_type is not None else "-",
            "dcid_hex": h.dcid.hex(),
            "pn": str(h.packet_number),
        }
    return {"form": "OTHER"}


class Handler(Protocol):
    def on_datagram(self, sim: "Simulator", node: str, dgram: Datagram) -> None: ...

    def on_timer(self, sim: "Simulator", node: str, token: object) -> None: ...


class Middlebox(Protocol):
    def transit(self, sim: "Simulator", node: str, dgram: Datagram) -> Tuple[bool, str]:
        """Return (forward, verdict label)."""


@dataclass
class RunResult:
    trace: List[TraceRecord]
    time: int
    timed_out: bool


_DELIVER, _TIMER = 0, 1


class Simulator:
    def __init__(self, topology: Topology, seed: int):
        self.topology = topology
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0
        self.trace: List[TraceRecord] = []
        self._queue: list = []
        self._seq = 0
        self._uid = 0
        self._links: Dict[Tuple[str, str], LinkSpec] = {}
        self._busy_until: Dict[Tuple[str, str], int] = {}
        self._handlers: Dict[str, Handler] = {}
        self._middleboxes: Dict[str, Middlebox] = {}
        self._next_hop: Dict[Tuple[str, str], str] = {}
        self._setup()

    # construction

    def _setup(self) -> None:
        topo = self.topology
        if len(topo.nodes) < 2:
            raise ConfigurationError("topology needs at least two nodes")
        graph = nx.DiGraph()
        graph.add_nodes_from(sorted(topo.nodes))
        for link in topo.links:
            if link.src not in topo.nodes or link.dst not in topo.nodes:
                raise ConfigurationError(f"link {link.src}->{link.dst} references unknown node")
            if (link.src, link.dst) in self._links:
                raise ConfigurationError(f"duplicate link {link.src}->{link.dst}")
            self._links[(link.src, link.dst)] = link
            self._busy_until[(link.src, link.dst)] = 0
            graph.add_edge(link.src, link.dst, weight=link.one_way_delay)
        for src, paths in nx.all_pairs_dijkstra_path(graph, weight="weight"):
            for dst, path in paths.items():
                if len(path) > 1:
                    self._next_hop[(src, dst)] = path[1]
        for (src, dst), hop in topo.routes.items():
            if (src, hop) not in self._links:
                raise ConfigurationError(f"route {src}->{dst} via {hop} has no link")
            self._next_hop[(src, dst)] = hop
        self._check_threat_model()

    def path(self, src: str, dst: str) -> List[str]:
        """Node sequence from ``src`` to ``dst`` under the routing table."""
        hops = [src]
        while hops[-1] != dst:
            nxt = self._next_hop.get((hops[-1], dst))
            if nxt is None:
                raise RoutingError(f"no route from {src} to {dst}")
            if nxt in hops:
                raise RoutingError(f"routing loop between {src} and {dst}")
            hops.append(nxt)
        return hops

    def _check_threat_model(self) -> None:
        topo = self.topology
        censors = set(topo.nodes_with(NodeRole.CENSOR))
        remote = [n for n, r in topo.nodes.items() if r in (NodeRole.SERVER, NodeRole.PROXY, NodeRole.DNS_RESOLVER)]
        for client in topo.nodes_with(NodeRole.CLIENT):
            for other in remote:
                for a, b in ((client, other), (other, client)):
                    try:
                        hops = self.path(a, b)
                    except RoutingError as exc:
                        raise ConfigurationError(str(exc)) from exc
                    if client not in topo.uncensored and not censors.intersection(hops[1:-1]):
                        raise ConfigurationError(
                            f"route {a}->{b} bypasses the censor ({'->'.join(hops)})"
                        )

    def attach(self, node: str, handler: Handler) -> None:
        if node not in self.topology.nodes:
            raise ConfigurationError(f"unknown node {node}")
        self._handlers[node] = handler

    def attach_middlebox(self, node: str, box: Middlebox) -> None:
        if node not in self.topology.nodes:
            raise ConfigurationError(f"unknown node {node}")
        self._middleboxes[node] = box

    def link(self, src: str, dst: str) -> LinkSpec:
        return self._links[(src, dst)]

    # scheduling

    def _push(self, time: int, prio: int, item: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (time, prio, self._seq, item))

    def _record(self, node: str, direction: TraceDirection, dgram: Datagram, uid: int,
                verdict: str = "-", note: str = "") -> None:
        self.trace.append(
            TraceRecord(self.now, node, direction, dgram.size, verdict=verdict, src=dgram.src,
                        dst=dgram.dst, note=note, payload=dgram.payload, uid=uid,
                        **summarize(dgram.payload))
        )

    def send(self, from_node: str, dgram: Datagram, note: str = "") -> None:
        """Inject ``dgram`` at ``from_node`` at the current time."""
        if dgram.dst.host not in self.topology.nodes:
            raise RoutingError(f"unroutable destination {dgram.dst}")
        self.path(from_node, dgram.dst.host)
        self._uid += 1
        uid = self._uid
        self._record(from_node, TraceDirection.SEND, dgram, uid, note=note)
        self._forward(from_node, dgram, uid, note)

    def _forward(self, node: str, dgram: Datagram, uid: int, note: str) -> None:
        hop = self._next_hop[(node, dgram.dst.host)]
        key = (node, hop)
        link = self._links[key]
        depart = max(self.now, self._busy_until[key]) + link.serialization_us(dgram.size)
        self._busy_until[key] = depart
        if link.loss_rate and self.rng.random() < link.loss_rate:
            self._record(node, TraceDirection.DROP, dgram, uid, verdict="LOSS", note=note)
            return
        self._push(depart + link.one_way_delay, _DELIVER, (hop, dgram, uid, note))

    def set_timer(self, node: str, at: int, token: object = None) -> None:
        self._push(max(at, self.now), _TIMER, (node, token))

    # running

    def step(self) -> bool:
        if not self._queue:
            return False
        time, prio, _, item = heapq.heappop(self._queue)
        self.now = time
        if prio == _DELIVER:
            node, dgram, uid, note = item
            if node == dgram.dst.host:
                self._record(node, TraceDirection.RECV, dgram, uid, note=note)
                handler = self._handlers.get(node)
                if handler is not None:
                    handler.on_datagram(self, node, dgram)
                return True
            box = self._middleboxes.get(node)
            if box is not None:
                forward, verdict = box.transit(self, node, dgram)
                if not forward:
                    self._record(node, TraceDirection.DROP, dgram, uid, verdict=verdict, note=note)
                    return True
                self._record(node, TraceDirection.FWD, dgram, uid, verdict=verdict, note=note)
            self._forward(node, dgram, uid, note)
        else:
            node, token = item
            handler = self._handlers.get(node)
            if handler is not None:
                handler.on_timer(self, node, token)
        return True

    def run_until(self, predicate: Callable[["Simulator"], bool], deadline: int) -> RunResult:
        while not predicate(self):
            if not self._queue or self._queue[0][0] > deadline:
                self.now = max(self.now, deadline)
                return RunResult(self.trace, self.now, True)
            self.step()
        return RunResult(self.trace, self.now, False)


def build(topology: Topology, seed: int) -> Simulator:
    return Simulator(topology, seed)


def export_trace(trace: Iterable[TraceRecord]) -> str:
    return "\n".join([TRACE_HEADER] + [r.export() for r in trace]) + "\n"


def trace_digest(trace: Iterable[TraceRecord]) -> str:
    return hashlib.sha256(export_trace(trace).encode()).hexdigest()
