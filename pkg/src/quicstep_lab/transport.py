"""Client and server endpoint state machines.

A :class:`ConnectionState` never reads a clock: every entry point takes
``now`` in microseconds and returns the packets to put on the wire.  The
caller owns delivery and timers (see :meth:`ConnectionState.next_timer`).

Paths are ``(local_addr, remote_addr)`` pairs of opaque hashable values.
Connections are identified by connection IDs only; remote addresses are
read for path bookkeeping and nothing else.
"""

from __future__ import annotations

import logging
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

from .wire import (
    MAX_STREAM_CHUNK,
    AckFrame,
    ClientHello,
    ConnectionId,
    CryptoFrame,
    Direction,
    Finished,
    Frame,
    HandshakeDoneFrame,
    HeaderForm,
    LongType,
    NewConnectionIdFrame,
    OpaquePayloadError,
    Packet,
    PathChallengeFrame,
    PathResponseFrame,
    ServerHello,
    StreamFrame,
    WireError,
    decode_handshake,
    decode_packet,
    dh_keypair,
    dh_shared,
    encode_handshake,
    encode_packet,
    finished_verify,
    frame_type,
    initial_keystream,
    parse_header,
    protected_length,
    session_keystream,
)

logger = logging.getLogger(__name__)

PathKey = Tuple[Hashable, Hashable]

# frames allowed per packet type
_ALLOWED = {
    LongType.INITIAL: (CryptoFrame, AckFrame),
    LongType.HANDSHAKE: (CryptoFrame, AckFrame, NewConnectionIdFrame),
    None: (StreamFrame, AckFrame, PathChallengeFrame, PathResponseFrame, HandshakeDoneFrame, NewConnectionIdFrame),
}
_NOT_ACK_ELICITING = (AckFrame, PathResponseFrame)


class Role(Enum):
    CLIENT = "CLIENT"
    SERVER = "SERVER"


class Phase(Enum):
    IDLE = "IDLE"
    HANDSHAKING = "HANDSHAKING"
    ESTABLISHED = "ESTABLISHED"
    FAILED = "FAILED"
    CLOSED = "CLOSED"


class PathStatus(Enum):
    UNVALIDATED = "UNVALIDATED"
    VALIDATING = "VALIDATING"
    VALIDATED = "VALIDATED"


class FailureReason(Enum):
    TIMEOUT = "TIMEOUT"
    PROTOCOL = "PROTOCOL"


class TransportError(Exception):
    pass


class ProtocolViolation(TransportError):
    pass


class PreconditionError(TransportError):
    """An operation was invoked in a phase that does not allow it."""


# events


@dataclass(frozen=True)
class HandshakeComplete:
    time: int


@dataclass(frozen=True)
class PathValidated:
    path_id: int
    time: int


@dataclass(frozen=True)
class StreamDelivered:
    stream_id: int
    data: bytes
    fin: bool


@dataclass(frozen=True)
class ConnectionFailed:
    reason: FailureReason
    time: int = 0


@dataclass(frozen=True)
class Migrated:
    old_path: int
    new_path: int
    time: int


@dataclass
class TransportConfig:
    seed: int = 0
    window: int = 64
    rtt_estimate_us: int = 333_000
    max_retries: int = 4
    idle_timeout_us: int = 10_000_000
    disable_active_migration: bool = False

    @property
    def handshake_timeout_us(self) -> int:
        return 3 * self.rtt_estimate_us


@dataclass
class PathState:
    path_id: int
    local_addr: Hashable
    remote_addr: Hashable
    status: PathStatus = PathStatus.UNVALIDATED
    pending_challenge: Optional[bytes] = None
    challenge_sent_at: Optional[int] = None
    rtt_sample: Optional[int] = None

    @property
    def key(self) -> PathKey:
        return (self.local_addr, self.remote_addr)


@dataclass(frozen=True)
class Outgoing:
    data: bytes
    path: PathKey
    header_form: HeaderForm
    frames: Tuple[str, ...]

    @property
    def carries_stream(self) -> bool:
        return "STREAM" in self.frames


@dataclass
class _SentRecord:
    pn: int
    frames: Tuple[Frame, ...]
    sent_at: int
    path_id: int
    stream_bearing: bool


@dataclass
class _SendStream:
    data: bytearray = field(default_factory=bytearray)
    base: int = 0  # stream offset of data[0]
    fin: bool = False
    fin_sent: bool = False

    @property
    def next_offset(self) -> int:
        return self.base

    def pending(self) -> bool:
        return bool(self.data) or (self.fin and not self.fin_sent)


@dataclass
class _RecvStream:
    next_offset: int = 0
    chunks: Dict[int, bytes] = field(default_factory=dict)
    fin_offset: Optional[int] = None
    finished: bool = False


class ConnectionState:
    def __init__(self, role: Role, cfg: TransportConfig, local_addr: Hashable, remote_addr: Hashable, now: int):
        self.role = role
        self.cfg = cfg
        self.phase = Phase.IDLE
        self.rng = random.Random(cfg.seed)
        self.local_cids: "OrderedDict[int, ConnectionId]" = OrderedDict()
        self.remote_cids: "OrderedDict[int, ConnectionId]" = OrderedDict()
        self.remote_cid: Optional[ConnectionId] = None
        self.original_dcid: Optional[ConnectionId] = None
        self.server_name: Optional[str] = None
        self.peer_disable_active_migration = False
        self.dh_priv: Optional[int] = None
        self.dh_pub: Optional[int] = None
        self.shared_secret: Optional[int] = None
        self.client_random: Optional[bytes] = None
        self.server_random: Optional[bytes] = None
        self.handshake_confirmed = False
        self.paths: Dict[int, PathState] = {}
        self._path_index: Dict[PathKey, int] = {}
        self.active_path = self._path(local_addr, remote_addr).path_id
        self.handshake_path = self.active_path
        self.streams_out: Dict[int, _SendStream] = {}
        self.streams_in: Dict[int, _RecvStream] = {}
        self.sent: Dict[int, _SentRecord] = {}
        self.next_pn = 0
        self.largest_received: Optional[int] = None
        self.latest_rtt: Optional[int] = None
        self.retransmissions = 0
        self.handshake_retries = 0
        self.handshake_deadline: Optional[int] = None
        self._handshake_sent_at: Optional[int] = None
        self._handshake_flight: List[Tuple[LongType, Tuple[Frame, ...]]] = []
        self._control: List[Frame] = []
        self._retransmit: List[Frame] = []
        self._last_rx = now
        self._server_hello: Optional[ServerHello] = None
        self._server_finished_ok = False

    # bookkeeping helpers

    @property
    def local_cid_set(self) -> set:
        return set(self.local_cids.values())

    @property
    def migration_pending(self) -> bool:
        return any(p.status is PathStatus.VALIDATING for p in self.paths.values())

    @property
    def inflight_stream_packets(self) -> int:
        return sum(1 for r in self.sent.values() if r.stream_bearing)

    def path_by_key(self, key: PathKey) -> Optional[PathState]:
        pid = self._path_index.get(key)
        return self.paths[pid] if pid is not None else None

    def _path(self, local_addr, remote_addr) -> PathState:
        key = (local_addr, remote_addr)
        pid = self._path_index.get(key)
        if pid is None:
            pid = len(self.paths)
            self.paths[pid] = PathState(pid, local_addr, remote_addr)
            self._path_index[key] = pid
        return self.paths[pid]

    def _rto(self, path_id: int) -> int:
        sample = self.paths[path_id].rtt_sample or self.latest_rtt or 0
        return 3 * max(self.cfg.rtt_estimate_us, sample)

    def _fail(self, reason: FailureReason, now: int, events: list) -> None:
        if self.phase in (Phase.FAILED, Phase.CLOSED):
            return
        logger.debug("%s connection failed: %s", self.role.value, reason.value)
        self.phase = Phase.FAILED
        self.sent.clear()
        events.append(ConnectionFailed(reason, now))

    def next_timer(self) -> Optional[int]:
        if self.phase in (Phase.FAILED, Phase.CLOSED, Phase.IDLE):
            return None
        deadlines = []
        if self.phase is Phase.HANDSHAKING and self.handshake_deadline is not None:
            deadlines.append(self.handshake_deadline)
        if self.phase is Phase.ESTABLISHED:
            deadlines.append(self._last_rx + self.cfg.idle_timeout_us)
        deadlines.extend(r.sent_at + self._rto(r.path_id) for r in self.sent.values())
        return min(deadlines) if deadlines else None

    # keys

    def _direction(self, outbound: bool) -> Direction:
        client_sends = (self.role is Role.CLIENT) == outbound
        return Direction.CLIENT_TO_SERVER if client_sends else Direction.SERVER_TO_CLIENT

    def _keystream(self, long_type: Optional[LongType], dcid: ConnectionId, pn: int, length: int,
                   outbound: bool) -> Optional[bytes]:
        if long_type is LongType.INITIAL:
            return initial_keystream(dcid, length)
        if self.shared_secret is None:
            return None
        return session_keystream(self.shared_secret, self.client_random, self.server_random,
                                 self._direction(outbound), pn, length)

    # packet construction

    def _build(self, frames: Sequence[Frame], path: PathState, now: int,
               long_type: Optional[LongType] = None) -> Outgoing:
        frames = tuple(frames)
        pn = self.next_pn
        self.next_pn += 1
        if long_type is None:
            packet = Packet.short(self.remote_cid, pn, frames)
        else:
            packet = Packet.long(long_type, self.remote_cid, self.local_cids[0], pn, frames)
        ks = self._keystream(long_type, self.remote_cid, pn, protected_length(frames), outbound=True)
        data = encode_packet(packet, ks)
        if long_type is None and not all(isinstance(f, _NOT_ACK_ELICITING) for f in frames):
            tracked = tuple(f for f in frames if not isinstance(f, _NOT_ACK_ELICITING))
            self.sent[pn] = _SentRecord(pn, tracked, now, path.path_id,
                                        any(isinstance(f, StreamFrame) for f in frames))
        form = HeaderForm.SHORT if long_type is None else HeaderForm.LONG
        return Outgoing(data, path.key, form, tuple(frame_type(f).name for f in frames))

    def _send_handshake_flight(self, now: int) -> List[Outgoing]:
        path = self.paths[self.handshake_path]
        out = [self._build(frames, path, now, long_type) for long_type, frames in self._handshake_flight]
        self._handshake_sent_at = now
        self.handshake_deadline = now + self.cfg.handshake_timeout_us
        return out

    def _can_send_app(self) -> bool:
        if self.phase is not Phase.ESTABLISHED:
            return False
        if self.role is Role.SERVER:
            if self.migration_pending:
                return False
            return self.paths[self.active_path].status is PathStatus.VALIDATED
        return True

    def _flush(self, now: int) -> List[Outgoing]:
        out: List[Outgoing] = []
        if self.phase is not Phase.ESTABLISHED:
            return out
        path = self.paths[self.active_path]
        if self._control:
            out.append(self._build(self._control, path, now))
            self._control = []
        if not self._can_send_app():
            return out
        while self._retransmit:
            frame = self._retransmit.pop(0)
            out.append(self._build([frame], path, now))
        for stream_id in sorted(self.streams_out):
            stream = self.streams_out[stream_id]
            while stream.pending() and self.inflight_stream_packets < self.cfg.window:
                chunk = bytes(stream.data[:MAX_STREAM_CHUNK])
                del stream.data[:MAX_STREAM_CHUNK]
                offset = stream.base
                stream.base += len(chunk)
                fin = stream.fin and not stream.data
                if fin:
                    stream.fin_sent = True
                out.append(self._build([StreamFrame(stream_id, offset, fin, chunk)], path, now))
        return out

    # public operations

    def send_stream(self, stream_id: int, payload: bytes, fin: bool, now: int) -> List[Outgoing]:
        """Queue application data and emit as much as the window allows."""
        if self.phase is not Phase.ESTABLISHED:
            raise PreconditionError(f"cannot send stream data while {self.phase.value}")
        stream = self.streams_out.setdefault(stream_id, _SendStream())
        if stream.fin:
            raise PreconditionError(f"stream {stream_id} already finished")
        stream.data += payload
        stream.fin = fin
        return self._flush(now)

    def migrate_active_path(self, new_path: PathKey, rotate_cid: bool, now: int, probe: bool = False):
        """Switch egress to ``new_path``.  Returns ``(events, outgoing)``.

        With ``probe`` set and nothing else queued, an ACK-only packet is
        sent so that the peer learns the new path.
        """
        if self.phase is not Phase.ESTABLISHED:
            raise PreconditionError("migration requires an established connection")
        old = self.active_path
        path = self._path(*new_path)
        self.active_path = path.path_id
        if rotate_cid:
            unused = [seq for seq, cid in self.remote_cids.items() if cid != self.remote_cid and seq > 0]
            if unused:
                self.remote_cid = self.remote_cids[unused[0]]
        events = [Migrated(old, path.path_id, now)] if old != path.path_id else []
        out = self._flush(now)
        if probe and not out and self.largest_received is not None:
            out.append(self._build([AckFrame(self.largest_received, (self.largest_received,))], path, now))
        return events, out

    def on_timer(self, now: int):
        events: list = []
        out: List[Outgoing] = []
        if self.phase in (Phase.FAILED, Phase.CLOSED, Phase.IDLE):
            return events, out
        if self.phase is Phase.HANDSHAKING and self.handshake_deadline is not None and now >= self.handshake_deadline:
            if self.handshake_retries >= self.cfg.max_retries:
                self._fail(FailureReason.TIMEOUT, now, events)
                return events, out
            self.handshake_retries += 1
            out.extend(self._send_handshake_flight(now))
        if self.phase is Phase.ESTABLISHED and now >= self._last_rx + self.cfg.idle_timeout_us:
            self._fail(FailureReason.TIMEOUT, now, events)
            return events, out
        expired = sorted(pn for pn, r in self.sent.items() if now >= r.sent_at + self._rto(r.path_id))
        for pn in expired:
            record = self.sent.pop(pn)
            self.retransmissions += 1
            for frame in record.frames:
                if isinstance(frame, PathChallengeFrame):
                    path = next((p for p in self.paths.values() if p.pending_challenge == frame.data), None)
                    if path is not None and path.status is PathStatus.VALIDATING:
                        out.append(self._build([frame], path, now))
                elif isinstance(frame, StreamFrame):
                    self._retransmit.append(frame)
                else:
                    self._control.append(frame)
        if expired:
            out.extend(self._flush(now))
        return events, out

    def handle_datagram(self, data: bytes, arrival_path: PathKey, now: int):
        """Process one datagram.  Returns ``(events, outgoing)``."""
        events: list = []
        out: List[Outgoing] = []
        if self.phase in (Phase.FAILED, Phase.CLOSED):
            return events, out
        try:
            header = parse_header(data)
        except WireError:
            return events, out
        if header.dcid not in self.local_cid_set:
            return events, out
        ks = self._keystream(header.long_type, header.dcid, header.packet_number,
                             header.payload_length, outbound=False)
        if ks is None:
            return events, out
        try:
            packet = decode_packet(data, ks)
        except OpaquePayloadError:
            return events, out
        self._last_rx = now
        path = self._path(*arrival_path)
        try:
            for frame in packet.payload:
                if not isinstance(frame, _ALLOWED[packet.long_type]):
                    raise ProtocolViolation(f"{frame_type(frame).name} not allowed in {packet.long_type}")
            if packet.is_long:
                out.extend(self._on_long(packet, path, now, events))
            else:
                out.extend(self._on_short(packet, path, now, events))
        except ProtocolViolation as exc:
            logger.debug("protocol violation: %s", exc)
            self._fail(FailureReason.PROTOCOL, now, events)
            return events, []
        if self.phase is Phase.ESTABLISHED:
            out.extend(self._flush(now))
        return events, out

    # long header handling

    def _on_long(self, packet: Packet, path: PathState, now: int, events: list) -> List[Outgoing]:
        out: List[Outgoing] = []
        for frame in packet.payload:
            if isinstance(frame, AckFrame):
                self._on_ack(frame, now)
            elif isinstance(frame, NewConnectionIdFrame):
                if self.role is Role.SERVER:
                    raise ProtocolViolation("client issued NEW_CONNECTION_ID")
                self.remote_cids.setdefault(frame.seq, frame.cid)
            elif isinstance(frame, CryptoFrame):
                try:
                    msg = decode_handshake(frame.data)
                except WireError as exc:
                    raise ProtocolViolation(str(exc)) from exc
                if self.role is Role.SERVER:
                    out.extend(self._server_on_handshake(msg, packet, path, now, events))
                else:
                    out.extend(self._client_on_handshake(msg, packet, path, now, events))
        return out

    def _server_on_handshake(self, msg, packet: Packet, path: PathState, now: int, events: list) -> List[Outgoing]:
        if isinstance(msg, ClientHello):
            if packet.long_type is not LongType.INITIAL:
                raise ProtocolViolation("ClientHello outside an Initial packet")
            if self.shared_secret is None:
                self.server_name = msg.sni
                self.peer_disable_active_migration = msg.disable_active_migration
                self.client_random = msg.client_random
                self.remote_cid = packet.scid
                self.server_random = self.rng.getrandbits(64).to_bytes(8, "big")
                self.dh_priv, self.dh_pub = dh_keypair(self.rng)
                self.shared_secret = dh_shared(self.dh_priv, msg.client_dh_pub)
                issued = ConnectionId.random(self.rng)
                self.local_cids[2] = issued
                verify = finished_verify(self.shared_secret, self.client_random, self.server_random, "server")
                self._handshake_flight = [
                    (LongType.INITIAL, (CryptoFrame(0, encode_handshake(ServerHello(self.server_random, self.dh_pub))),)),
                    (LongType.HANDSHAKE, (CryptoFrame(0, encode_handshake(Finished(verify))),
                                          NewConnectionIdFrame(1, issued))),
                ]
                self.phase = Phase.HANDSHAKING
            elif self.phase is not Phase.HANDSHAKING:
                return []
            return self._send_handshake_flight(now)
        if isinstance(msg, Finished):
            if packet.long_type is not LongType.HANDSHAKE:
                raise ProtocolViolation("Finished outside a Handshake packet")
            expected = finished_verify(self.shared_secret, self.client_random, self.server_random, "client")
            if msg.verify != expected:
                raise ProtocolViolation("bad client Finished")
            if self.phase is Phase.HANDSHAKING:
                self._server_establish(path, now, events)
            return []
        raise ProtocolViolation("server received a ServerHello")

    def _server_establish(self, path: PathState, now: int, events: list) -> None:
        # Reached on the client's Finished, or on the first 1-RTT packet the
        # client protected with session keys, whichever arrives first.
        self.phase = Phase.ESTABLISHED
        self.handshake_deadline = None
        hs_path = self.paths[self.handshake_path]
        hs_path.status = PathStatus.VALIDATED
        if self._handshake_sent_at is not None and hs_path.rtt_sample is None and path is hs_path:
            hs_path.rtt_sample = now - self._handshake_sent_at
            self.latest_rtt = hs_path.rtt_sample
        self._control.append(HandshakeDoneFrame())
        events.append(HandshakeComplete(now))

    def _client_on_handshake(self, msg, packet: Packet, path: PathState, now: int, events: list) -> List[Outgoing]:
        if isinstance(msg, ServerHello):
            if packet.long_type is not LongType.INITIAL:
                raise ProtocolViolation("ServerHello outside an Initial packet")
            if self._server_hello is None:
                self._server_hello = msg
                self.server_random = msg.server_random
                self.remote_cid = packet.scid
                self.remote_cids[0] = packet.scid
                self.shared_secret = dh_shared(self.dh_priv, msg.server_dh_pub)
                if self._handshake_sent_at is not None:
                    path.rtt_sample = now - self._handshake_sent_at
                    self.latest_rtt = path.rtt_sample
            return []
        if isinstance(msg, Finished):
            if packet.long_type is not LongType.HANDSHAKE:
                raise ProtocolViolation("Finished outside a Handshake packet")
            expected = finished_verify(self.shared_secret, self.client_random, self.server_random, "server")
            if msg.verify != expected:
                raise ProtocolViolation("bad server Finished")
            verify = finished_verify(self.shared_secret, self.client_random, self.server_random, "client")
            flight = (LongType.HANDSHAKE, (CryptoFrame(0, encode_handshake(Finished(verify))),))
            if self.phase is Phase.HANDSHAKING:
                self._server_finished_ok = True
                self.phase = Phase.ESTABLISHED
                self.handshake_deadline = None
                self.paths[self.handshake_path].status = PathStatus.VALIDATED
                self._handshake_flight = [flight]
                events.append(HandshakeComplete(now))
            # a repeated server flight means our Finished was lost
            return [self._build(flight[1], self.paths[self.handshake_path], now, LongType.HANDSHAKE)]
        raise ProtocolViolation("client received a ClientHello")

    # short header handling

    def _on_short(self, packet: Packet, path: PathState, now: int, events: list) -> List[Outgoing]:
        out: List[Outgoing] = []
        if self.role is Role.SERVER and self.phase is Phase.HANDSHAKING:
            self._server_establish(path, now, events)
        if self.phase is not Phase.ESTABLISHED:
            return out
        response: Optional[PathResponseFrame] = None
        if self.largest_received is None or packet.packet_number > self.largest_received:
            self.largest_received = packet.packet_number
        for frame in packet.payload:
            if isinstance(frame, AckFrame):
                self._on_ack(frame, now)
            elif isinstance(frame, StreamFrame):
                events.extend(self._on_stream(frame))
            elif isinstance(frame, PathChallengeFrame):
                response = PathResponseFrame(frame.data)
            elif isinstance(frame, PathResponseFrame):
                self._on_path_response(frame, now, events)
            elif isinstance(frame, HandshakeDoneFrame):
                if self.role is Role.SERVER:
                    raise ProtocolViolation("server received HANDSHAKE_DONE")
                self.handshake_confirmed = True
            elif isinstance(frame, NewConnectionIdFrame):
                if self.role is Role.SERVER:
                    raise ProtocolViolation("client issued NEW_CONNECTION_ID")
                self.remote_cids.setdefault(frame.seq, frame.cid)

        reply: List[Frame] = []
        if any(not isinstance(f, _NOT_ACK_ELICITING) for f in packet.payload):
            reply.append(AckFrame(packet.packet_number, (packet.packet_number,)))
        if response is not None:
            reply.append(response)
        if (self.role is Role.SERVER and path.path_id != self.active_path
                and path.status is PathStatus.UNVALIDATED):
            path.pending_challenge = self.rng.getrandbits(64).to_bytes(8, "big")
            path.challenge_sent_at = now
            path.status = PathStatus.VALIDATING
            reply.append(PathChallengeFrame(path.pending_challenge))
        elif path.status is PathStatus.UNVALIDATED and self.role is Role.CLIENT:
            path.status = PathStatus.VALIDATED
        if reply:
            out.append(self._build(reply, path, now))
        return out

    def _on_ack(self, frame: AckFrame, now: int) -> None:
        for pn in frame.acked:
            record = self.sent.pop(pn, None)
            if record is None:
                continue
            sample = now - record.sent_at
            self.paths[record.path_id].rtt_sample = sample
            self.latest_rtt = sample

    def _on_path_response(self, frame: PathResponseFrame, now: int, events: list) -> None:
        path = next((p for p in self.paths.values()
                     if p.status is PathStatus.VALIDATING and p.pending_challenge == frame.data), None)
        if path is None:
            return
        path.status = PathStatus.VALIDATED
        path.pending_challenge = None
        path.rtt_sample = now - path.challenge_sent_at
        self.latest_rtt = path.rtt_sample
        for pn in [pn for pn, r in self.sent.items()
                   if any(isinstance(f, PathChallengeFrame) and f.data == frame.data for f in r.frames)]:
            del self.sent[pn]
        old = self.active_path
        self.active_path = path.path_id
        events.append(PathValidated(path.path_id, now))
        if old != path.path_id:
            events.append(Migrated(old, path.path_id, now))

    def _on_stream(self, frame: StreamFrame) -> List[StreamDelivered]:
        stream = self.streams_in.setdefault(frame.stream_id, _RecvStream())
        if stream.finished:
            return []
        end = frame.offset + len(frame.data)
        if frame.fin:
            if stream.fin_offset is not None and stream.fin_offset != end:
                raise ProtocolViolation("conflicting final size")
            stream.fin_offset = end
        if frame.offset >= stream.next_offset:
            stream.chunks.setdefault(frame.offset, frame.data)
        elif end > stream.next_offset:
            stream.chunks.setdefault(stream.next_offset, frame.data[stream.next_offset - frame.offset:])
        delivered = bytearray()
        while stream.next_offset in stream.chunks:
            chunk = stream.chunks.pop(stream.next_offset)
            if not chunk:
                break
            delivered += chunk
            stream.next_offset += len(chunk)
        fin = stream.fin_offset == stream.next_offset
        if delivered or fin:
            stream.finished = fin
            if fin:
                stream.chunks.clear()
            return [StreamDelivered(frame.stream_id, bytes(delivered), fin)]
        return []

    def close(self) -> None:
        if self.phase is not Phase.FAILED:
            self.phase = Phase.CLOSED


def client_connect(server_name: str, server_addr: Hashable, cfg: TransportConfig, now: int,
                   local_addr: Hashable = None):
    """Start a client handshake.  Returns ``(conn, outgoing)``."""
    conn = ConnectionState(Role.CLIENT, cfg, local_addr, server_addr, now)
    conn.server_name = server_name
    conn.original_dcid = ConnectionId.random(conn.rng)
    conn.local_cids[0] = ConnectionId.random(conn.rng)
    conn.remote_cid = conn.original_dcid
    conn.client_random = conn.rng.getrandbits(64).to_bytes(8, "big")
    conn.dh_priv, conn.dh_pub = dh_keypair(conn.rng)
    hello = ClientHello(server_name, conn.client_random, conn.dh_pub, cfg.disable_active_migration)
    conn._handshake_flight = [(LongType.INITIAL, (CryptoFrame(0, encode_handshake(hello)),))]
    conn.phase = Phase.HANDSHAKING
    return conn, conn._send_handshake_flight(now)


def server_accept(original_dcid: ConnectionId, cfg: TransportConfig, local_addr: Hashable,
                  remote_addr: Hashable, now: int) -> ConnectionState:
    """Create server state for a new Initial addressed to ``original_dcid``."""
    conn = ConnectionState(Role.SERVER, cfg, local_addr, remote_addr, now)
    conn.original_dcid = original_dcid
    conn.local_cids[0] = ConnectionId.random(conn.rng)
    conn.local_cids[1] = original_dcid
    return conn
