import heapq
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quicstep_lab.middlebox import extract_sni
from quicstep_lab.transport import (
    ConnectionFailed,
    FailureReason,
    HandshakeComplete,
    Migrated,
    PathStatus,
    PathValidated,
    Phase,
    PreconditionError,
    StreamDelivered,
    TransportConfig,
    client_connect,
    server_accept,
)
from quicstep_lab.wire import (
    Address,
    ClientHello,
    HeaderForm,
    LongType,
    PathResponseFrame,
    decode_handshake,
    decode_packet,
    initial_keystream,
    parse_header,
)

C1, C2, S = Address("c", 1), Address("c", 2), Address("s", 443)
D = 5_000  # one-way delay


class Loop:
    """Two endpoints joined by fixed-delay paths, with optional drops."""

    def __init__(self, cfg=None, delay=D, drop=None, delays=None):
        self.cfg = cfg or TransportConfig(seed=7)
        self.delay, self.delays = delay, delays or {}
        self.drop = drop or (lambda who, item, now: False)
        self.now = 0
        self.q, self.seq = [], 0
        self.log = []  # (time, sender, Outgoing)
        self.arrivals = []  # (time, receiver, Outgoing)
        self.events = {"client": [], "server": []}
        self.server = None
        self.client, out = client_connect("example.com", S, self.cfg, 0, local_addr=C1)
        self._emit("client", out)

    def _emit(self, who, items):
        for item in items:
            self.log.append((self.now, who, item))
            if self.drop(who, item, self.now):
                continue
            local = item.path[0] if who == "client" else item.path[1]
            self.seq += 1
            heapq.heappush(self.q, (self.now + self.delays.get(local, self.delay), self.seq, who, item))

    def conns(self):
        return [("client", self.client)] + ([("server", self.server)] if self.server else [])

    def run(self, until=60_000_000, stop=None):
        while not (stop and stop(self)):
            timers = [(c.next_timer(), name) for name, c in self.conns() if c.next_timer() is not None]
            t_timer = min(timers) if timers else None
            t_arr = self.q[0][0] if self.q else None
            if t_arr is not None and (t_timer is None or t_arr <= t_timer[0]):
                if t_arr > until:
                    break
                self.now, _, who, item = heapq.heappop(self.q)
                self._deliver(who, item)
            elif t_timer is not None and t_timer[0] <= until:
                self.now = max(self.now, t_timer[0])
                name = t_timer[1]
                conn = self.client if name == "client" else self.server
                events, out = conn.on_timer(self.now)
                self.events[name] += events
                self._emit(name, out)
            else:
                break
        return self

    def _deliver(self, sender, item):
        local, remote = item.path
        if sender == "client":
            if self.server is None:
                header = parse_header(item.data)
                self.server = server_accept(header.dcid, TransportConfig(seed=99, window=self.cfg.window),
                                            remote, local, self.now)
            receiver, name, arrival = self.server, "server", (remote, local)
        else:
            receiver, name, arrival = self.client, "client", (remote, local)
        self.arrivals.append((self.now, name, item))
        events, out = receiver.handle_datagram(item.data, arrival, self.now)
        self.events[name] += events
        for ev in events:
            if name == "server" and isinstance(ev, StreamDelivered) and ev.fin and self.response is not None:
                out = out + self.server.send_stream(ev.stream_id, self.response, True, self.now)
        self._emit(name, out)

    response = None

    def delivered(self, who="client", stream=0):
        return b"".join(e.data for e in self.events[who] if isinstance(e, StreamDelivered) and e.stream_id == stream)

    def established(self):
        return self.run(stop=lambda l: any(isinstance(e, HandshakeComplete) for e in l.events["client"]))


def frames_sent(loop, who, name):
    return [(t, item) for t, w, item in loop.log if w == who and name in item.frames]


def test_connect_emits_one_initial_with_sni():
    conn, out = client_connect("example.com", S, TransportConfig(seed=1), 0)
    assert len(out) == 1
    assert parse_header(out[0].data).long_type is LongType.INITIAL
    assert extract_sni(out[0].data).hostname == "example.com"
    assert conn.phase is Phase.HANDSHAKING
    again, out2 = client_connect("example.com", S, TransportConfig(seed=1), 0)
    assert again.remote_cid == conn.remote_cid and again.client_random == conn.client_random
    assert out2[0].data == out[0].data


def test_disable_active_migration_flag_in_client_hello():
    _, out = client_connect("example.com", S, TransportConfig(seed=1, disable_active_migration=True), 0)
    h = parse_header(out[0].data)
    packet = decode_packet(out[0].data, initial_keystream(h.dcid, h.payload_length))
    hello = decode_handshake(packet.payload[0].data)
    assert isinstance(hello, ClientHello) and hello.disable_active_migration


def test_handshake_takes_one_round_trip():
    loop = Loop().established()
    done = [e for e in loop.events["client"] if isinstance(e, HandshakeComplete)]
    assert done == [HandshakeComplete(2 * D)]
    loop.run(until=100_000)
    assert loop.server.phase is Phase.ESTABLISHED
    assert frames_sent(loop, "server", "HANDSHAKE_DONE")


def test_preconditions_during_handshake():
    conn, _ = client_connect("example.com", S, TransportConfig(), 0)
    with pytest.raises(PreconditionError):
        conn.send_stream(0, b"GET", True, 0)
    with pytest.raises(PreconditionError):
        conn.migrate_active_path((C2, S), True, 0)


def test_small_request_is_one_packet():
    loop = Loop().established()
    out = loop.client.send_stream(0, b"GET /file", True, loop.now)
    assert len(out) == 1 and out[0].header_form is HeaderForm.SHORT and out[0].frames == ("STREAM",)
    empty = loop.client.send_stream(4, b"", True, loop.now)
    assert len(empty) == 1 and empty[0].frames == ("STREAM",)


def _fetch(loop, size, seed=0):
    loop.response = random.Random(seed).randbytes(size)
    loop.established()
    loop._emit("client", loop.client.send_stream(0, b"GET /file", True, loop.now))
    loop.run(stop=lambda l: any(isinstance(e, StreamDelivered) and e.fin for e in l.events["client"]))
    return loop


def test_one_megabyte_uses_834_stream_frames_without_retransmission():
    loop = _fetch(Loop(), 1_000_000)
    assert loop.delivered() == loop.response
    assert len(frames_sent(loop, "server", "STREAM")) == 834
    assert loop.server.retransmissions == 0 and loop.client.retransmissions == 0


def test_window_paces_one_round_per_rtt():
    loop = _fetch(Loop(), 64 * 1200 * 3)
    sends = sorted({t for t, _ in frames_sent(loop, "server", "STREAM")})
    # request arrives at 3d, then one window per round trip
    assert sends == [3 * D, 5 * D, 7 * D]


def test_all_initials_dropped_times_out_after_max_retries():
    cfg = TransportConfig(seed=3)
    loop = Loop(cfg, drop=lambda who, item, now: who == "client").run()
    initials = [i for _, w, i in loop.log if w == "client" and parse_header(i.data).long_type is LongType.INITIAL]
    assert len(initials) == cfg.max_retries + 1
    assert [e.reason for e in loop.events["client"] if isinstance(e, ConnectionFailed)] == [FailureReason.TIMEOUT]
    assert loop.client.phase is Phase.FAILED


def test_single_loss_is_repaired_once():
    dropped = []

    def drop(who, item, now):
        if who == "server" and "STREAM" in item.frames and not dropped:
            dropped.append(item)
            return True
        return False

    loop = _fetch(Loop(drop=drop), 50_000)
    assert loop.delivered() == loop.response
    assert loop.server.retransmissions == 1


def test_idle_timeout():
    cfg = TransportConfig(seed=4)
    loop = Loop(cfg).established()
    loop.drop = lambda who, item, now: True
    loop.run()
    failed = [e for e in loop.events["client"] if isinstance(e, ConnectionFailed)]
    assert failed and failed[0].reason is FailureReason.TIMEOUT
    assert failed[0].time >= cfg.idle_timeout_us


def _migrating_fetch(rotate, size=200_000, direct_delay=2_000):
    loop = Loop(delays={C2: direct_delay})
    loop.response = random.Random(1).randbytes(size)
    loop.established()
    events, out = loop.client.migrate_active_path((C2, S), rotate, loop.now)
    loop.events["client"] += events
    loop._emit("client", out)
    loop._emit("client", loop.client.send_stream(0, b"GET /file", True, loop.now))
    loop.run(stop=lambda l: any(isinstance(e, StreamDelivered) and e.fin for e in l.events["client"]))
    return loop


def test_migration_validates_new_path_before_data():
    loop = _migrating_fetch(rotate=True)
    assert loop.delivered() == loop.response
    new_path_sends = [(t, i) for t, w, i in loop.log if w == "server" and i.path[1] == C2]
    first_stream = next(t for t, i in new_path_sends if "STREAM" in i.frames)
    first_challenge = next(t for t, i in new_path_sends if "PATH_CHALLENGE" in i.frames)
    first_arrival = next(t for t, who, i in loop.arrivals if who == "server" and i.path[0] == C2)
    assert first_challenge == first_arrival < first_stream
    assert first_stream - first_arrival == 2 * 2_000
    assert any(isinstance(e, PathValidated) for e in loop.events["server"])
    assert [type(e) for e in loop.events["client"] if isinstance(e, Migrated)] == [Migrated]
    assert loop.server.paths[loop.server.active_path].remote_addr == C2


def test_rotate_cid_changes_dcid_on_new_path():
    rotated = _migrating_fetch(rotate=True)
    kept = _migrating_fetch(rotate=False)

    def dcids(loop):
        hs = {parse_header(i.data).dcid for _, w, i in loop.log if w == "client" and i.header_form is HeaderForm.LONG}
        new = {parse_header(i.data).dcid for _, w, i in loop.log if w == "client" and i.path[0] == C2}
        return hs, new

    hs, new = dcids(rotated)
    assert not hs & new
    hs, new = dcids(kept)
    assert new <= hs
    assert rotated.delivered() == kept.delivered()


def test_mismatched_path_response_is_ignored():
    loop = Loop(delays={C2: 2_000}).established()
    loop.run(until=loop.now + 3 * D)
    loop.client.migrate_active_path((C2, S), False, loop.now)
    # hold the client's genuine PATH_RESPONSE back
    loop.drop = lambda who, item, now: who == "client" and "PATH_RESPONSE" in item.frames
    loop._emit("client", loop.client.send_stream(0, b"GET /file", True, loop.now))
    loop.run(until=loop.now + 10_000)
    path = loop.server.path_by_key((S, C2))
    assert path.status is PathStatus.VALIDATING
    forged = loop.client._build([PathResponseFrame(b"\x00" * 8)], loop.client.paths[loop.client.active_path], loop.now)
    loop.server.handle_datagram(forged.data, (S, C2), loop.now)
    assert path.status is PathStatus.VALIDATING


def test_wrong_frame_for_packet_type_is_protocol_failure():
    loop = Loop().established()
    loop.run(until=loop.now + 3 * D)
    bad = loop.server._build([PathResponseFrame(b"x" * 8)], loop.server.paths[0], loop.now, long_type=LongType.HANDSHAKE)
    events, out = loop.client.handle_datagram(bad.data, (C1, S), loop.now)
    assert [e.reason for e in events if isinstance(e, ConnectionFailed)] == [FailureReason.PROTOCOL]


def test_garbage_is_discarded_silently():
    loop = Loop().established()
    for junk in (b"", b"\x40" + bytes(30), bytes(100)):
        assert loop.client.handle_datagram(junk, (C1, S), loop.now) == ([], [])
    assert loop.client.phase is Phase.ESTABLISHED


@settings(max_examples=30, deadline=None)
@given(size=st.integers(0, 60_000), seed=st.integers(0, 2**32), loss=st.floats(0.0, 0.05),
       window=st.sampled_from([1, 4, 64]))
def test_stream_integrity_under_loss(size, seed, loss, window):
    rng = random.Random(seed)
    loop = Loop(TransportConfig(seed=seed, window=window), drop=lambda who, item, now: rng.random() < loss)
    loop.response = random.Random(seed).randbytes(size)
    loop.run(stop=lambda l: l.client.phase is not Phase.HANDSHAKING)
    if loop.client.phase is not Phase.ESTABLISHED:
        return  # handshake itself lost five times in a row
    loop._emit("client", loop.client.send_stream(0, b"GET", True, loop.now))
    loop.run(stop=lambda l: any(isinstance(e, StreamDelivered) and e.fin for e in l.events["client"]))
    assert loop.delivered() == loop.response
