"""Executable acceptance criteria.

Each ``criterion_*`` function runs its own scenarios and returns a
:class:`CriterionResult`.  The ``check`` command and the test suite both
call :func:`run_all`.
"""

from __future__ import annotations

import dataclasses
import logging
import random
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

from .harness import (
    CLIENT_ADDR,
    PROFILES,
    SERVER_ADDR,
    ExperimentConfig,
    Scenario,
    analytic_latency,
    build_roamer_scenario,
    build_scenario,
)
from .middlebox import CensorConfig, CensorMode, CensorState, NotInitialError, dns_query_hostname, extract_sni, inspect
from .netsim import ConfigurationError, TraceDirection, trace_digest
from .quicstep import FetchOutcome, PolicyMode, fetch
from .transport import TransportConfig
from .wire import (
    AckFrame,
    Address,
    ConnectionId,
    CryptoFrame,
    DnsKind,
    DnsMessage,
    HandshakeDoneFrame,
    InnerDatagram,
    LongType,
    NewConnectionIdFrame,
    Packet,
    PathChallengeFrame,
    PathResponseFrame,
    StreamFrame,
    WireError,
    decode_packet,
    encode_dns,
    encode_inner,
    encode_packet,
    encode_tunnel,
    protected_length,
    tunnel_encap,
)

logger = logging.getLogger(__name__)

REQUEST = b"GET /file"
SMALL_FILE = 100_000


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} [{self.number}] {self.name}: {self.detail}"


def _censor(*modes: CensorMode, sni=(), dns=()) -> CensorConfig:
    return CensorConfig(frozenset(modes), frozenset(sni), frozenset(dns))


def run_fetch(cfg: ExperimentConfig, policy: PolicyMode, trial: int = 0,
              hostname: Optional[str] = None) -> Tuple[Scenario, FetchOutcome]:
    hostname = hostname or cfg.hostname
    if hostname != cfg.hostname:
        cfg = dataclasses.replace(cfg, hostname=hostname)
    sc = build_scenario(cfg, policy, trial)
    outcome = fetch(sc.client, sc.sim, hostname, REQUEST, cfg.deadline_us)
    if outcome.success and outcome.response != sc.body:
        outcome = dataclasses.replace(outcome, success=False, reason="CORRUPT_RESPONSE")
    return sc, outcome


def censor_visible_hostnames(sc: Scenario) -> List[str]:
    """Hostnames the censor's own parsers recover from traffic crossing it."""
    found = []
    for rec in sc.sim.trace:
        if rec.node != "censor" or rec.direction not in (TraceDirection.FWD, TraceDirection.DROP):
            continue
        host = dns_query_hostname(rec.payload)
        if host is not None:
            found.append(host)
        try:
            sni = extract_sni(rec.payload).hostname
        except NotInitialError:
            sni = None
        if sni is not None:
            found.append(sni)
    return found


# 1-7: scenario criteria


def criterion_feasibility(base: ExperimentConfig, trials: int = 50) -> CriterionResult:
    cfg = dataclasses.replace(base, censor=_censor(CensorMode.DROP_ALL_HANDSHAKE), file_size=SMALL_FILE)
    native = [run_fetch(cfg, PolicyMode.NATIVE, t)[1] for t in range(trials)]
    quic = [run_fetch(cfg, PolicyMode.QUICSTEP, t)[1] for t in range(trials)]
    n_ok = sum(o.success for o in native)
    n_timeout = sum(o.reason == "TIMEOUT" for o in native)
    attempts = {o.handshake_attempts for o in native}
    q_ok = sum(o.success for o in quic)
    expected_attempts = TransportConfig().max_retries + 1
    passed = n_ok == 0 and n_timeout == trials and q_ok == trials and attempts == {expected_attempts}
    return CriterionResult(
        1, "feasibility under DROP_ALL_HANDSHAKE", passed,
        f"native {n_ok}/{trials} (TIMEOUT {n_timeout}, initial attempts {sorted(attempts)}), quicstep {q_ok}/{trials}",
    )


def criterion_sni(base: ExperimentConfig) -> CriterionResult:
    cfg = dataclasses.replace(base, censor=_censor(CensorMode.SNI_BLOCKLIST, sni=["blocked.example"]),
                              file_size=SMALL_FILE)
    _, blocked = run_fetch(cfg, PolicyMode.NATIVE, hostname="blocked.example")
    _, allowed = run_fetch(cfg, PolicyMode.NATIVE, hostname="allowed.example")
    _, quic = run_fetch(cfg, PolicyMode.QUICSTEP, hostname="blocked.example")
    passed = not blocked.success and allowed.success and quic.success
    return CriterionResult(
        2, "SNI blocklist feasibility", passed,
        f"native blocked.example success={blocked.success} ({blocked.reason}), "
        f"native allowed.example success={allowed.success}, quicstep blocked.example success={quic.success}",
    )


def criterion_visibility(base: ExperimentConfig, trials: int = 5) -> CriterionResult:
    censors = [
        _censor(CensorMode.OFF),
        _censor(CensorMode.DROP_ALL_HANDSHAKE),
        _censor(CensorMode.SNI_BLOCKLIST, sni=["blocked.example"]),
        _censor(CensorMode.DNS_FILTER, dns=["blocked.example"]),
        _censor(CensorMode.MIGRATION_BLOCK),
    ]
    leaked, traces, crossings = [], 0, 0
    for censor in censors:
        for host in ("blocked.example", "allowed.example"):
            cfg = dataclasses.replace(base, censor=censor, file_size=SMALL_FILE, hostname=host)
            for t in range(trials):
                sc, _ = run_fetch(cfg, PolicyMode.QUICSTEP, t)
                traces += 1
                crossings += sum(1 for r in sc.sim.trace if r.node == "censor")
                leaked += censor_visible_hostnames(sc)
    # the same audit on native traffic proves the parsers do see plaintext
    sc, _ = run_fetch(dataclasses.replace(base, file_size=SMALL_FILE), PolicyMode.NATIVE)
    control = censor_visible_hostnames(sc)
    passed = not leaked and bool(control)
    return CriterionResult(
        3, "censor visibility audit", passed,
        f"{traces} quicstep traces, {crossings} censor crossings, hostnames recovered {len(leaked)}; "
        f"native control recovered {sorted(set(control))}",
    )


def criterion_validation_cost(base: ExperimentConfig, trials: int = 5) -> CriterionResult:
    gaps = []
    for t in range(trials):
        cfg = dataclasses.replace(base, file_size=SMALL_FILE, loss_rate=0.0)
        sc, outcome = run_fetch(cfg, PolicyMode.QUICSTEP, t)
        trace = sc.sim.trace
        first_arrival = next(r.time for r in trace if r.node == "server" and r.direction is TraceDirection.RECV
                             and r.src == CLIENT_ADDR)
        first_data = next(r.time for r in trace if r.node == "server" and r.direction is TraceDirection.SEND
                          and r.dst == CLIENT_ADDR and "STREAM" in r.note.split("+"))
        gaps.append((first_data - first_arrival, sc.legs.direct_rtt, outcome.success))
    passed = all(ok and abs(gap - rtt) <= 1 for gap, rtt, ok in gaps)
    shown = ", ".join(f"{gap}us vs {rtt}us" for gap, rtt, _ in gaps)
    return CriterionResult(4, "one direct RTT of path validation", passed, f"first data - first direct arrival: {shown}")


def _within(value: float, target: float, rel: float = 0.01) -> bool:
    return abs(value - target) <= rel * abs(target)


def _simulated(cfg: ExperimentConfig, policy: PolicyMode) -> int:
    _, outcome = run_fetch(cfg, policy)
    if not outcome.success:
        raise RuntimeError(f"{policy.value} fetch failed: {outcome.reason}")
    return outcome.completion_time


def criterion_amortization(base: ExperimentConfig) -> CriterionResult:
    sim, oracle = {}, {}
    for size in (1_000_000, 10_000_000):
        cfg = dataclasses.replace(base, file_size=size, jitter_pct=0, loss_rate=0.0, bandwidth=0,
                                  legs=PROFILES["ohio"], censor=CensorConfig())
        for policy in (PolicyMode.NATIVE, PolicyMode.QUICSTEP, PolicyMode.FULL_TUNNEL):
            sim[size, policy] = _simulated(cfg, policy)
            oracle[size, policy] = analytic_latency(policy, cfg)
    agree = all(_within(sim[k], oracle[k]) for k in sim)
    q1 = sim[1_000_000, PolicyMode.QUICSTEP] - sim[1_000_000, PolicyMode.NATIVE]
    q10 = sim[10_000_000, PolicyMode.QUICSTEP] - sim[10_000_000, PolicyMode.NATIVE]
    t1 = sim[1_000_000, PolicyMode.FULL_TUNNEL] - sim[1_000_000, PolicyMode.NATIVE]
    t10 = sim[10_000_000, PolicyMode.FULL_TUNNEL] - sim[10_000_000, PolicyMode.NATIVE]
    passed = agree and _within(q10, q1) and t10 >= 5 * t1
    worst = max(abs(sim[k] - oracle[k]) / oracle[k] for k in sim)
    return CriterionResult(
        5, "amortization", passed,
        f"quicstep overhead 1MB {q1}us, 10MB {q10}us; tunnel overhead 1MB {t1}us, 10MB {t10}us "
        f"(x{t10 / t1:.2f}); worst oracle deviation {worst:.4%}",
    )


def criterion_proxy_distance(base: ExperimentConfig) -> CriterionResult:
    results = {}
    for name in ("ohio", "oregon"):
        cfg = dataclasses.replace(base, file_size=1_000_000, jitter_pct=0, loss_rate=0.0, bandwidth=0,
                                  legs=PROFILES[name], censor=CensorConfig())
        for policy in (PolicyMode.NATIVE, PolicyMode.QUICSTEP):
            results[name, policy] = _simulated(cfg, policy)
    delta_t = PROFILES["oregon"].tunnel_rtt - PROFILES["ohio"].tunnel_rtt
    dq = results["oregon", PolicyMode.QUICSTEP] - results["ohio", PolicyMode.QUICSTEP]
    dn = results["oregon", PolicyMode.NATIVE] - results["ohio", PolicyMode.NATIVE]
    passed = _within(dq, 2 * delta_t) and dn == 0
    return CriterionResult(
        6, "proxy distance sensitivity", passed,
        f"tunnel RTT +{delta_t}us: quicstep +{dq}us (expected {2 * delta_t}us), native +{dn}us",
    )


def criterion_migration_block(base: ExperimentConfig, trials: int = 5) -> CriterionResult:
    censor = _censor(CensorMode.MIGRATION_BLOCK)
    cfg = dataclasses.replace(base, censor=censor, file_size=SMALL_FILE)
    quic_ok, quic_drops = 0, 0
    for t in range(trials):
        sc, outcome = run_fetch(cfg, PolicyMode.QUICSTEP, t)
        quic_ok += outcome.success
        quic_drops += sc.censor.state.counters["DROP:UNKNOWN_CID_MIGRATION"]
    roam_cfg = dataclasses.replace(cfg, file_size=300_000)
    sc = build_roamer_scenario(roam_cfg)
    roam = fetch(sc.client, sc.sim, roam_cfg.hostname, REQUEST, roam_cfg.deadline_us)
    roam_drops = [r for r in sc.sim.trace if r.node == "censor" and r.verdict == "DROP:UNKNOWN_CID_MIGRATION"
                  and r.src.host == "client"]
    # without the censor policy the same roamer completes
    clean = build_roamer_scenario(dataclasses.replace(roam_cfg, censor=CensorConfig()))
    clean_outcome = fetch(clean.client, clean.sim, roam_cfg.hostname, REQUEST, roam_cfg.deadline_us)
    passed = quic_ok == 0 and quic_drops > 0 and not roam.success and bool(roam_drops) and clean_outcome.success
    return CriterionResult(
        7, "migration blocking", passed,
        f"quicstep {quic_ok}/{trials} succeeded, {quic_drops} UNKNOWN_CID_MIGRATION drops; "
        f"roamer success={roam.success} with {len(roam_drops)} drops (uncensored control success={clean_outcome.success})",
    )


# 8: property suites


def random_frame(rng: random.Random, long_form: bool):
    if long_form:
        choice = rng.choice(("crypto", "ack", "ncid"))
    else:
        choice = rng.choice(("stream", "ack", "challenge", "response", "done", "ncid"))
    if choice == "crypto":
        return CryptoFrame(rng.randrange(1 << 20), rng.randbytes(rng.randrange(0, 300)))
    if choice == "stream":
        return StreamFrame(rng.randrange(1 << 16), rng.randrange(1 << 40), rng.random() < 0.2,
                           rng.randbytes(rng.randrange(0, 1200)))
    if choice == "ack":
        acked = sorted(rng.sample(range(1 << 20), rng.randint(1, 6)))
        return AckFrame(acked[-1], tuple(acked))
    if choice == "challenge":
        return PathChallengeFrame(rng.randbytes(8))
    if choice == "response":
        return PathResponseFrame(rng.randbytes(8))
    if choice == "done":
        return HandshakeDoneFrame()
    return NewConnectionIdFrame(rng.randrange(1 << 16), ConnectionId.random(rng))


def random_packet(rng: random.Random) -> Packet:
    long_form = rng.random() < 0.4
    frames, size = [], 0
    for _ in range(rng.randint(1, 4)):
        frame = random_frame(rng, long_form)
        frames.append(frame)
        if protected_length(frames) + 40 > 1250:
            frames.pop()
            break
    if not frames:
        frames = [HandshakeDoneFrame()] if not long_form else [CryptoFrame(0, b"x")]
    pn = rng.randrange(1 << 62)
    if long_form:
        return Packet.long(rng.choice(list(LongType)), ConnectionId.random(rng), ConnectionId.random(rng), pn, frames)
    return Packet.short(ConnectionId.random(rng), pn, frames)


def codec_roundtrips(count: int, seed: int) -> int:
    rng = random.Random(seed)
    failures = 0
    for _ in range(count):
        packet = random_packet(rng)
        keystream = rng.randbytes(protected_length(packet.payload))
        decoded = decode_packet(encode_packet(packet, keystream), keystream)
        failures += decoded != packet
    return failures


def lossy_transfers(count: int, seed: int, base: ExperimentConfig) -> List[str]:
    rng = random.Random(seed)
    problems = []
    for i in range(count):
        cfg = dataclasses.replace(
            base, seed=rng.randrange(1 << 30), file_size=rng.randint(1, 40_000),
            loss_rate=rng.uniform(0.0, 0.05), jitter_pct=rng.uniform(0, 10), censor=CensorConfig(),
            window=rng.choice((4, 16, 64)),
        )
        policy = rng.choice((PolicyMode.NATIVE, PolicyMode.QUICSTEP, PolicyMode.FULL_TUNNEL))
        sc, outcome = run_fetch(cfg, policy)
        if not outcome.success:
            problems.append(f"#{i} {policy.value} loss={cfg.loss_rate:.3f}: {outcome.reason}")
    return problems


def determinism(count: int, seed: int, base: ExperimentConfig) -> List[str]:
    rng = random.Random(seed)
    modes = [CensorConfig(), _censor(CensorMode.DROP_ALL_HANDSHAKE), _censor(CensorMode.MIGRATION_BLOCK),
             _censor(CensorMode.SNI_BLOCKLIST, sni=[base.hostname])]
    mismatches = []
    for i in range(count):
        cfg = dataclasses.replace(
            base, seed=rng.randrange(1 << 30), file_size=rng.randint(1, 30_000),
            loss_rate=rng.choice((0.0, 0.02, 0.05)), jitter_pct=rng.uniform(0, 10),
            censor=rng.choice(modes),
        )
        policy = rng.choice(list(PolicyMode))
        digests = {trace_digest(run_fetch(cfg, policy)[0].sim.trace) for _ in range(2)}
        if len(digests) != 1:
            mismatches.append(f"#{i} {policy.value}")
    return mismatches


def fuzz_corpus(seed: int) -> List[bytes]:
    rng = random.Random(seed)
    corpus = [encode_packet(p, rng.randbytes(protected_length(p.payload))) for p in
              (random_packet(rng) for _ in range(20))]
    corpus.append(encode_dns(DnsMessage(DnsKind.QUERY, 7, "blocked.example")))
    corpus.append(encode_dns(DnsMessage(DnsKind.RESPONSE, 7, "blocked.example", SERVER_ADDR)))
    inner = encode_inner(InnerDatagram(Address("tun0", 1), SERVER_ADDR, corpus[0]))
    corpus.append(encode_tunnel(tunnel_encap(inner, bytes(32), 1)))
    return corpus


def mutate(rng: random.Random, data: bytes) -> bytes:
    buf = bytearray(data)
    op = rng.randrange(5)
    if op == 0 and buf:
        for _ in range(rng.randint(1, 4)):
            buf[rng.randrange(len(buf))] ^= 1 << rng.randrange(8)
    elif op == 1:
        buf = buf[: rng.randrange(len(buf) + 1)]
    elif op == 2:
        buf += rng.randbytes(rng.randint(1, 16))
    elif op == 3 and buf:
        buf[0] = rng.randrange(256)
    else:
        buf = bytearray(rng.randbytes(rng.randint(0, 64)))
    return bytes(buf)


def censor_fuzz(count: int, seed: int) -> Tuple[int, List[str]]:
    rng = random.Random(seed)
    corpus = fuzz_corpus(seed)
    configs = [
        CensorConfig(),
        _censor(CensorMode.DROP_ALL_HANDSHAKE, CensorMode.SNI_BLOCKLIST, CensorMode.DNS_FILTER,
                CensorMode.MIGRATION_BLOCK, sni=["blocked.example"], dns=["blocked.example"]),
        _censor(CensorMode.SNI_BLOCKLIST, CensorMode.MIGRATION_BLOCK, sni=["blocked.example"]),
    ]
    states = [CensorState() for _ in configs]
    verdicts, errors = 0, []
    for i in range(count):
        data = mutate(rng, rng.choice(corpus))
        for cfg, state in zip(configs, states):
            try:
                verdict, _ = inspect(cfg, state, data)
                verdicts += verdict is not None
            except Exception as exc:  # totality is the property under test
                errors.append(f"#{i} {type(exc).__name__}: {exc}")
    complete = all(state.total == count for state in states)
    if not complete:
        errors.append("counters do not sum to datagrams seen")
    return verdicts, errors


def criterion_properties(base: ExperimentConfig, roundtrips: int = 10_000, transfers: int = 200,
                         scenarios: int = 20, fuzz: int = 10_000) -> CriterionResult:
    seed = base.seed
    codec_fail = codec_roundtrips(roundtrips, seed)
    loss_fail = lossy_transfers(transfers, seed + 1, base)
    det_fail = determinism(scenarios, seed + 2, base)
    verdicts, fuzz_errors = censor_fuzz(fuzz, seed + 3)
    passed = not codec_fail and not loss_fail and not det_fail and not fuzz_errors and verdicts == 3 * fuzz
    detail = (f"codec {roundtrips - codec_fail}/{roundtrips}, lossy transfers {transfers - len(loss_fail)}/{transfers}, "
              f"determinism {scenarios - len(det_fail)}/{scenarios}, fuzz verdicts {verdicts}/{3 * fuzz}")
    if loss_fail or det_fail or fuzz_errors:
        detail += "; first problems: " + "; ".join((loss_fail + det_fail + fuzz_errors)[:3])
    return CriterionResult(8, "property suites", passed, detail)


CRITERIA: Sequence[Callable[[ExperimentConfig], CriterionResult]] = (
    criterion_feasibility,
    criterion_sni,
    criterion_visibility,
    criterion_validation_cost,
    criterion_amortization,
    criterion_proxy_distance,
    criterion_migration_block,
    criterion_properties,
)


def run_criterion(fn: Callable[[ExperimentConfig], CriterionResult], base: ExperimentConfig) -> CriterionResult:
    start = time.perf_counter()
    try:
        result = fn(base)
    except (ConfigurationError, WireError, RuntimeError) as exc:
        number = CRITERIA.index(fn) + 1 if fn in CRITERIA else 0
        result = CriterionResult(number, fn.__name__, False, f"error: {exc}")
    result.seconds = time.perf_counter() - start
    return result


def run_all(base: Optional[ExperimentConfig] = None) -> List[CriterionResult]:
    base = base or ExperimentConfig()
    return [run_criterion(fn, base) for fn in CRITERIA]
