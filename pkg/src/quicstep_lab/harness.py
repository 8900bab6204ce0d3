"""Scenario construction, batch experiments, analytic expectations and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import os
import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .hosts import ResolverHost, ServerHost, static_file_app
from .middlebox import CensorConfig, CensorMode, CensorNode, PolicyError, ProxyHost, parse_policy_lines
from .netsim import ConfigurationError, NodeRole, Simulator, Topology, TraceRecord, duplex, export_trace, trace_digest
from .quicstep import ClientHost, FetchOutcome, PathPolicy, PolicyMode, TunnelEndpoint, fetch
from .transport import TransportConfig
from .wire import MAX_STREAM_CHUNK, Address

logger = logging.getLogger(__name__)

MS = 1000
POLICY_ORDER = (PolicyMode.NATIVE, PolicyMode.FULL_TUNNEL, PolicyMode.QUICSTEP)
SERVER_ADDR = Address("server", 443)
PROXY_ADDR = Address("proxy", 51820)
RESOLVER_ADDR = Address("resolver", 53)
CLIENT_ADDR = Address("client", 40000)
TUNNEL_OUTER = Address("client", 51820)
TUNNEL_INNER = Address("tun0", 40000)


@dataclass(frozen=True)
class LegDelays:
    """One-way delays in microseconds for each leg of the default topology."""

    client_censor: int = 1 * MS
    censor_server: int = 9 * MS
    censor_proxy: int = 34 * MS
    proxy_server: int = 5 * MS
    censor_resolver: int = 9 * MS
    proxy_resolver: int = 5 * MS

    @property
    def direct_rtt(self) -> int:
        return 2 * (self.client_censor + self.censor_server)

    @property
    def tunnel_rtt(self) -> int:
        return 2 * (self.client_censor + self.censor_proxy + self.proxy_server)

    @property
    def direct_dns_rtt(self) -> int:
        return 2 * (self.client_censor + self.censor_resolver)

    @property
    def tunnel_dns_rtt(self) -> int:
        return 2 * (self.client_censor + self.censor_proxy + self.proxy_resolver)

    def jittered(self, pct: float, rng: random.Random) -> "LegDelays":
        if pct <= 0:
            return self
        changes = {}
        for f in dataclasses.fields(self):
            base = getattr(self, f.name)
            span = base * pct / 100.0
            changes[f.name] = max(0, round(base + rng.uniform(-span, span)))
        return dataclasses.replace(self, **changes)


PROFILES: Dict[str, LegDelays] = {
    "ohio": LegDelays(),
    "oregon": LegDelays(censor_proxy=60 * MS),
}


@dataclass
class ExperimentConfig:
    legs: LegDelays = field(default_factory=LegDelays)
    bandwidth: int = 0  # bytes/s per link, 0 = unlimited
    loss_rate: float = 0.0
    jitter_pct: float = 10.0
    file_size: int = 1_000_000
    trials: int = 250
    policies: Tuple[PolicyMode, ...] = POLICY_ORDER
    censor: CensorConfig = field(default_factory=CensorConfig)
    seed: int = 1
    window: int = 64
    hostname: str = "example.com"
    deadline_us: int = 60_000_000
    out_dir: Optional[str] = None
    trace: bool = False
    workers: int = 1

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.file_size < 1:
            raise ConfigurationError("file_size must be >= 1")
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")
        if not self.policies:
            raise ConfigurationError("at least one policy is required")
        if self.jitter_pct < 0:
            raise ConfigurationError("jitter must be >= 0")


_POLICY_NAMES = {p.value: p for p in PolicyMode}
_CENSOR_KEYS = {"mode", "sni", "dns", "capacity"}
_INT_KEYS = {"bandwidth", "file_size", "trials", "seed", "window", "deadline_us", "workers"}


def parse_policy_name(name: str) -> PolicyMode:
    try:
        return _POLICY_NAMES[name.strip().lower()]
    except KeyError:
        raise ConfigurationError(f"unknown policy {name!r} (expected native, tunnel or quicstep)") from None


def parse_config_lines(lines: Iterable[str]) -> ExperimentConfig:
    """Read ``key value`` lines.  Censor policy lines may be mixed in."""
    cfg = ExperimentConfig()
    censor_lines: List[str] = []
    legs: Dict[str, int] = {}
    policies: List[PolicyMode] = []
    leg_names = {f.name for f in dataclasses.fields(LegDelays)}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        value = value.strip()
        if not value:
            raise ConfigurationError(f"missing value in {raw.strip()!r}")
        try:
            if key in _CENSOR_KEYS:
                censor_lines.append(line)
            elif key == "profile":
                if value.lower() not in PROFILES:
                    raise ConfigurationError(f"unknown profile {value!r}")
                cfg.legs = PROFILES[value.lower()]
            elif key.endswith("_us") and key[:-3] in leg_names:
                legs[key[:-3]] = int(value)
            elif key.endswith("_ms") and key[:-3] in leg_names:
                legs[key[:-3]] = round(float(value) * MS)
            elif key == "policy":
                policies.append(parse_policy_name(value))
            elif key in _INT_KEYS:
                setattr(cfg, key, int(value))
            elif key == "loss":
                cfg.loss_rate = float(value)
            elif key == "jitter":
                cfg.jitter_pct = float(value)
            elif key == "hostname":
                cfg.hostname = value
            elif key == "out":
                cfg.out_dir = value
            elif key == "trace":
                cfg.trace = value.lower() in ("1", "true", "yes", "on")
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"bad value for {key}: {value!r}") from None
    if legs:
        cfg.legs = dataclasses.replace(cfg.legs, **legs)
    if policies:
        cfg.policies = tuple(dict.fromkeys(policies))
    try:
        cfg.censor = parse_policy_lines(censor_lines)
    except PolicyError as exc:
        raise ConfigurationError(str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config_lines(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None


# scenario construction


def default_topology(legs: LegDelays, bandwidth: int = 0, loss_rate: float = 0.0) -> Topology:
    nodes = {
        "client": NodeRole.CLIENT,
        "censor": NodeRole.CENSOR,
        "server": NodeRole.SERVER,
        "proxy": NodeRole.PROXY,
        "resolver": NodeRole.DNS_RESOLVER,
    }
    links = []
    for a, b, delay in (
        ("client", "censor", legs.client_censor),
        ("censor", "server", legs.censor_server),
        ("censor", "proxy", legs.censor_proxy),
        ("proxy", "server", legs.proxy_server),
        ("censor", "resolver", legs.censor_resolver),
        ("proxy", "resolver", legs.proxy_resolver),
    ):
        links += duplex(a, b, delay, bandwidth, loss_rate)
    # the legs need not obey the triangle inequality; pin the tunnel to
    # the censor-proxy leg rather than a shorter detour via the server
    routes = {
        ("censor", "proxy"): "proxy",
        ("proxy", "censor"): "censor",
        ("proxy", "client"): "censor",
    }
    return Topology(nodes, links, routes)


def trial_seed(seed: int, trial: int) -> int:
    return seed ^ trial


def derive_seed(base: int, label: str) -> int:
    digest = hashlib.sha256(f"{base}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def tunnel_key(seed: int) -> bytes:
    return hashlib.sha256(f"tunnel-key:{seed}".encode()).digest()


def response_body(seed: int, size: int) -> bytes:
    return random.Random(derive_seed(seed, "body")).randbytes(size)


@dataclass
class Scenario:
    sim: Simulator
    client: ClientHost
    server: ServerHost
    resolver: ResolverHost
    proxy: ProxyHost
    censor: CensorNode
    legs: LegDelays
    body: bytes


def build_scenario(cfg: ExperimentConfig, policy: PolicyMode, trial: int,
                   body: Optional[bytes] = None) -> Scenario:
    seed = trial_seed(cfg.seed, trial)
    legs = cfg.legs.jittered(cfg.jitter_pct, random.Random(derive_seed(seed, "jitter")))
    sim = Simulator(default_topology(legs, cfg.bandwidth, cfg.loss_rate), seed)
    key = tunnel_key(seed)
    if body is None:
        body = response_body(seed, cfg.file_size)

    censor = CensorNode(cfg.censor)
    sim.attach_middlebox("censor", censor)
    proxy = ProxyHost(PROXY_ADDR, {TUNNEL_OUTER.host: key})
    sim.attach("proxy", proxy)
    resolver = ResolverHost(RESOLVER_ADDR, {cfg.hostname: SERVER_ADDR})
    sim.attach("resolver", resolver)
    server = ServerHost(SERVER_ADDR, static_file_app(body),
                        TransportConfig(seed=derive_seed(seed, "server"), window=cfg.window))
    sim.attach("server", server)

    tunnel = None
    if policy is not PolicyMode.NATIVE:
        tunnel = TunnelEndpoint(PROXY_ADDR, key, TUNNEL_OUTER, TUNNEL_INNER)
    client = ClientHost(PathPolicy(policy, tunnel), CLIENT_ADDR, RESOLVER_ADDR,
                        TransportConfig(seed=derive_seed(seed, "client"), window=cfg.window))
    client.attach(sim)
    return Scenario(sim, client, server, resolver, proxy, censor, legs, body)


ROAMER_ADDR = Address("lte", 40000)


def build_roamer_scenario(cfg: ExperimentConfig, trial: int = 0, migrate_at: Optional[int] = None) -> Scenario:
    """A non-circumventing client that handshakes over an uncensored access
    link, then moves onto the censored network mid-transfer."""
    scenario = build_scenario(cfg, PolicyMode.NATIVE, trial)
    legs = scenario.legs
    topo = default_topology(legs, cfg.bandwidth, cfg.loss_rate)
    topo.nodes["lte"] = NodeRole.CLIENT
    topo.links += duplex("lte", "server", legs.client_censor + legs.censor_server, cfg.bandwidth, cfg.loss_rate)
    topo.links += duplex("lte", "resolver", legs.client_censor + legs.censor_resolver, cfg.bandwidth, cfg.loss_rate)
    topo.uncensored = frozenset({"lte"})
    sim = Simulator(topo, trial_seed(cfg.seed, trial))
    sim.attach_middlebox("censor", scenario.censor)
    sim.attach("proxy", scenario.proxy)
    sim.attach("resolver", scenario.resolver)
    sim.attach("server", scenario.server)
    client = ClientHost(PathPolicy(PolicyMode.NATIVE), ROAMER_ADDR, RESOLVER_ADDR, scenario.client.cfg,
                        extra_interfaces=[CLIENT_ADDR])
    client.attach(sim)
    if migrate_at is None:
        # after DNS and the handshake, while the response is still in flight
        migrate_at = legs.direct_dns_rtt + 2 * legs.direct_rtt + legs.direct_rtt // 2
    client.schedule_migration(sim, migrate_at, CLIENT_ADDR, interface_down="lte")
    return dataclasses.replace(scenario, sim=sim, client=client)


# running


@dataclass(frozen=True)
class LatencySample:
    policy: PolicyMode
    trial: int
    success: bool
    completion_us: Optional[int]
    first_byte_us: Optional[int]
    reason: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.success and self.completion_us is not None:
            raise ValueError("failed samples carry no completion time")


@dataclass
class TrialResult:
    sample: LatencySample
    counters: Counter
    digest: str
    trace_text: Optional[str] = None
    outcome: Optional[FetchOutcome] = None


def run_trial(cfg: ExperimentConfig, policy: PolicyMode, trial: int, keep_trace: bool = False) -> TrialResult:
    sc = build_scenario(cfg, policy, trial)
    outcome = fetch(sc.client, sc.sim, cfg.hostname, b"GET /file", cfg.deadline_us)
    if outcome.success and outcome.response != sc.body:
        outcome = dataclasses.replace(outcome, success=False, completion_time=None, reason="CORRUPT_RESPONSE")
    sample = LatencySample(policy, trial, outcome.success, outcome.completion_time,
                           outcome.first_byte_time, outcome.reason)
    trace_text = export_trace(sc.sim.trace) if keep_trace else None
    return TrialResult(sample, Counter(sc.censor.state.counters), trace_digest(sc.sim.trace), trace_text,
                       dataclasses.replace(outcome, response=b""))


def _run_trial_args(args) -> TrialResult:
    return run_trial(*args)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    samples: List[LatencySample]
    counters: Counter
    digests: Dict[Tuple[str, int], str]
    traces: Dict[Tuple[str, int], str] = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    cfg.validate()
    for policy in cfg.policies:
        # surfaces topology and policy errors before any trial runs
        build_scenario(cfg, policy, 0, body=b"")
    jobs = [(cfg, p, t, cfg.trace) for p in cfg.policies for t in range(cfg.trials)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_trial_args, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers))))
    else:
        results = [_run_trial_args(job) for job in jobs]
    order = {p: i for i, p in enumerate(POLICY_ORDER)}
    results.sort(key=lambda r: (order[r.sample.policy], r.sample.trial))
    counters: Counter = Counter()
    for r in results:
        counters.update(r.counters)
    return ExperimentResult(
        cfg,
        [r.sample for r in results],
        counters,
        {(r.sample.policy.value, r.sample.trial): r.digest for r in results},
        {(r.sample.policy.value, r.sample.trial): r.trace_text for r in results if r.trace_text is not None},
    )


# analysis


def window_rounds(file_size: int, window: int) -> int:
    packets = max(1, math.ceil(file_size / MAX_STREAM_CHUNK))
    return math.ceil(packets / window)


def analytic_latency(policy: PolicyMode, cfg: ExperimentConfig, legs: Optional[LegDelays] = None) -> int:
    """Closed-form completion time in microseconds for a lossless fetch.

    Setup costs two round trips (DNS and handshake) on the path the policy
    uses for them; QUICSTEP adds one direct round trip for path validation.
    The request round and each further window round cost one data-path
    round trip.  With finite bandwidth each window round costs at least the
    time to serialize a full window.
    """
    legs = legs or cfg.legs
    rtt_d, rtt_t = legs.direct_rtt, legs.tunnel_rtt
    rounds = window_rounds(cfg.file_size, cfg.window)
    if policy is PolicyMode.NATIVE:
        setup, data_rtt = legs.direct_dns_rtt + rtt_d, rtt_d
    elif policy is PolicyMode.FULL_TUNNEL:
        setup, data_rtt = legs.tunnel_dns_rtt + rtt_t, rtt_t
    else:
        setup, data_rtt = legs.tunnel_dns_rtt + rtt_t + rtt_d, rtt_d
    if not cfg.bandwidth:
        return setup + rounds * data_rtt
    return setup + _bandwidth_limited_transfer(cfg, data_rtt, rounds)


# bytes on the wire for a full data packet: header, frame overhead, tag
_FULL_PACKET_WIRE = MAX_STREAM_CHUNK + 50


def _bandwidth_limited_transfer(cfg: ExperimentConfig, data_rtt: int, rounds: int) -> int:
    per_packet = math.ceil(_FULL_PACKET_WIRE * 1_000_000 / cfg.bandwidth)
    packets = max(1, math.ceil(cfg.file_size / MAX_STREAM_CHUNK))
    window_time = cfg.window * per_packet
    full_rounds = rounds - 1
    last_round = packets - full_rounds * cfg.window
    return full_rounds * max(data_rtt, window_time) + data_rtt + last_round * per_packet


@dataclass(frozen=True)
class CdfSeries:
    policy: PolicyMode
    completion_us: Tuple[int, ...]
    fractions: Tuple[float, ...]
    failures: int

    @property
    def empty(self) -> bool:
        return not self.completion_us


def compute_cdf(samples: Sequence[LatencySample]) -> Dict[PolicyMode, CdfSeries]:
    by_policy: Dict[PolicyMode, List[LatencySample]] = {}
    for s in samples:
        by_policy.setdefault(s.policy, []).append(s)
    out = {}
    for policy, group in by_policy.items():
        times = np.array([s.completion_us for s in group if s.success], dtype=np.int64)
        failures = sum(1 for s in group if not s.success)
        if times.size == 0:
            out[policy] = CdfSeries(policy, (), (), failures)
            continue
        values, counts = np.unique(times, return_counts=True)
        fractions = np.cumsum(counts) / times.size
        fractions[-1] = 1.0
        out[policy] = CdfSeries(policy, tuple(int(v) for v in values), tuple(float(f) for f in fractions), failures)
    return out


SAMPLES_HEADER = ["policy", "trial", "success", "completion_us", "first_byte_us", "reason"]


def _opt(v) -> str:
    return "" if v is None else str(v)


def write_samples(samples: Sequence[LatencySample], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLES_HEADER)
        for s in samples:
            w.writerow([s.policy.value, s.trial, int(s.success), _opt(s.completion_us),
                        _opt(s.first_byte_us), _opt(s.reason)])


def read_samples(path) -> List[LatencySample]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LatencySample(
            parse_policy_name(r["policy"]), int(r["trial"]), r["success"] == "1",
            int(r["completion_us"]) if r["completion_us"] else None,
            int(r["first_byte_us"]) if r["first_byte_us"] else None,
            r["reason"] or None,
        )
        for r in rows
    ]


def summarize_samples(result: ExperimentResult) -> List[str]:
    cfg = result.config
    lines = [f"trials {cfg.trials} file_size {cfg.file_size} seed {cfg.seed} jitter_pct {cfg.jitter_pct}"]
    for policy in cfg.policies:
        group = [s for s in result.samples if s.policy is policy]
        ok = np.array([s.completion_us for s in group if s.success], dtype=np.int64)
        expected = analytic_latency(policy, cfg)
        line = f"{policy.value}: success {ok.size}/{len(group)}"
        if ok.size:
            median = float(np.median(ok))
            p90 = float(np.percentile(ok, 90))
            line += f" median_us {median:.1f} p90_us {p90:.1f} oracle_us {expected} oracle_delta_us {median - expected:.1f}"
        failures = Counter(s.reason for s in group if not s.success)
        if failures:
            line += " failures " + " ".join(f"{k}={v}" for k, v in sorted(failures.items()))
        lines.append(line)
    lines.append("censor " + (" ".join(f"{k}={v}" for k, v in sorted(result.counters.items())) or "none"))
    return lines


def prepare_out_dir(out_dir) -> Path:
    path = Path(out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {out_dir}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise ConfigurationError(f"output directory {out_dir} is not writable")
    return path


def emit(result: ExperimentResult, out_dir) -> List[Path]:
    path = prepare_out_dir(out_dir)
    written = [path / "samples.csv"]
    write_samples(result.samples, written[0])
    for policy, series in compute_cdf(result.samples).items():
        target = path / f"cdf_{policy.value}.csv"
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["completion_us", "fraction"])
            for t, f in zip(series.completion_us, series.fractions):
                w.writerow([t, repr(f)])
        written.append(target)
    summary = path / "summary.txt"
    summary.write_text("\n".join(summarize_samples(result)) + "\n")
    written.append(summary)
    for (policy, trial), text in sorted(result.traces.items()):
        target = path / f"trace_{policy}_{trial}.log"
        target.write_text(text)
        written.append(target)
    return written
