"""Discrete-event simulation of hosts, relays, user load, and attack policies.

The simulator owns a single logical timeline. Scanner threads are simulated
entities that pull targets from a shared per-round queue (work stealing);
each download is one event, so concurrent measurements see each other's
contention through the shared FlowState. Bandwidth allocation per host is
max-min fair: equal split among active flows with redistribution of any
share a flow cannot use, never exceeding capacity times efficiency.

Policy semantics on a detected measurement:
  honest           nothing changes, the measurement is one more flow
  drop_on_measure  the relay's own user flows pause for the duration
  cotormult_member every user flow on the cluster host pauses; measured
                   members split the whole host
  detormult_member the measurement is served by the shared dedicated server;
                   user flows keep running on the cluster host

A measurement the detector misses (false negative) is allocated exactly like
a user flow. False positives are modeled coarsely: once per consensus epoch
each host with adversarial relays may spuriously drop its user flows for
that epoch.
"""

import heapq
import random
from dataclasses import dataclass, field, replace
from typing import Optional

from .core import (
    ConfigError,
    ConsensusSnapshot,
    MeasurementRecord,
    SimulationError,
    Topology,
    aggregate_consensus,
)
from .scanner import MeasurementPlan, ScannerConfig, measurement_steps, plan_round
from . import scanner as _scanner

_EPS = 1e-9


@dataclass(frozen=True)
class DetectorModel:
    mode: str = "ip_filter"
    detection_delay_packets: Optional[int] = None
    false_negative_rate: float = 0.0
    false_positive_rate: float = 0.0
    per_packet_latency: float = 0.0005

    def __post_init__(self):
        if self.mode not in ("ip_filter", "parametric"):
            raise ConfigError("unknown detector mode %r" % (self.mode,))
        if self.detection_delay_packets is None:
            object.__setattr__(
                self, "detection_delay_packets",
                0 if self.mode == "ip_filter" else 5,
            )
        if self.detection_delay_packets < 0:
            raise ConfigError("detection delay must be >= 0")
        for rate in (self.false_negative_rate, self.false_positive_rate):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError("detector rates must be in [0, 1]")

    @property
    def detection_delay(self) -> float:
        return self.detection_delay_packets * self.per_packet_latency


@dataclass(frozen=True)
class SimConfig:
    topology: Topology
    scanners: tuple
    user_load: dict = field(default_factory=dict)
    detector: DetectorModel = field(default_factory=DetectorModel)
    duration: float = 3600.0
    seed: int = 0
    consensus_interval: float = 3600.0
    activation_times: dict = field(default_factory=dict)
    time_compression: float = 1.0

    def __post_init__(self):
        if self.duration < self.consensus_interval:
            raise ConfigError("duration must cover at least one consensus interval")
        if self.time_compression <= 0:
            raise ConfigError("time_compression must be > 0")
        ba_ids = [s.ba_id for s in self.scanners]
        if len(ba_ids) != len(set(ba_ids)):
            raise ConfigError("scanner ba_ids must be unique")
        for relay_id, load in self.user_load.items():
            if relay_id not in self.topology.relays:
                raise ConfigError("user_load for unknown relay %r" % (relay_id,))
            if load < 0:
                raise ConfigError("user_load for %s must be >= 0" % relay_id)
        for relay_id in self.activation_times:
            if relay_id not in self.topology.relays:
                raise ConfigError("activation time for unknown relay %r" % (relay_id,))

    def activation_of(self, relay_id: str) -> float:
        return self.activation_times.get(relay_id, 0.0) / self.time_compression


@dataclass
class MeasurementFlow:
    relay_id: str
    ba_id: str
    detected: bool
    detect_time: float
    start_time: float


class FlowState:
    """Active flows plus the topology needed to allocate them."""

    def __init__(self, topology: Topology, user_load: dict):
        self.topology = topology
        self.user_load = dict(user_load)
        self.flows = {}  # (relay_id, ba_id) -> MeasurementFlow
        self.fp_suppressed_hosts = set()

    def add_flow(self, flow: MeasurementFlow):
        key = (flow.relay_id, flow.ba_id)
        if key in self.flows:
            raise SimulationError("duplicate measurement flow %s" % (key,))
        self.flows[key] = flow

    def remove_flow(self, relay_id: str, ba_id: str):
        del self.flows[(relay_id, ba_id)]

    # -- allocation ---------------------------------------------------------

    def _flow_host(self, flow: MeasurementFlow, now: float) -> str:
        relay = self.topology.relays[flow.relay_id]
        if (relay.policy == "detormult_member"
                and flow.detected and now >= flow.detect_time):
            return self.topology.clusters.dedicated_server
        return relay.host_id

    def _dropped_user_relays(self, now: float) -> set:
        dropped = set()
        relays = self.topology.relays
        for flow in self.flows.values():
            if not (flow.detected and now >= flow.detect_time):
                continue
            relay = relays[flow.relay_id]
            if relay.policy == "drop_on_measure":
                dropped.add(relay.relay_id)
            elif relay.policy == "cotormult_member":
                host_id = relay.host_id
                for other in relays.values():
                    if other.host_id == host_id and other.policy == "cotormult_member":
                        dropped.add(other.relay_id)
        for relay in relays.values():
            if relay.host_id in self.fp_suppressed_hosts:
                dropped.add(relay.relay_id)
        return dropped

    def allocations(self, now: float) -> dict:
        """Max-min allocation of every active flow, keyed by flow id.

        Measurement flows are keyed ("m", relay_id, ba_id), user flows
        ("u", relay_id). Allocation is per host and conserves
        capacity * efficiency on each.
        """
        demands_by_host = {}
        relays = self.topology.relays
        for key, flow in self.flows.items():
            relay = relays[flow.relay_id]
            host = self._flow_host(flow, now)
            demands_by_host.setdefault(host, []).append(
                (("m",) + key, relay.advertised_bw)
            )
        dropped = self._dropped_user_relays(now)
        for relay_id, load in self.user_load.items():
            if load <= 0 or relay_id in dropped:
                continue
            relay = relays[relay_id]
            demands_by_host.setdefault(relay.host_id, []).append(
                (("u", relay_id), min(load, relay.advertised_bw))
            )
        alloc = {}
        for host_id, demands in demands_by_host.items():
            host = self.topology.hosts[host_id]
            pool = host.usable_capacity
            fill = _max_min_fill(pool, demands)
            assert sum(fill.values()) <= pool + 1e-6, (
                "allocation exceeds capacity on host %s" % host_id
            )
            alloc.update(fill)
        return alloc

    def flow_bandwidth(self, relay_id: str, ba_id: str, now: float) -> float:
        return self.allocations(now).get(("m", relay_id, ba_id), 0.0)


def _max_min_fill(pool: float, demands: list) -> dict:
    """Progressive filling: equal split, redistribute what a flow can't use."""
    alloc = {key: 0.0 for key, _ in demands}
    pending = {key: demand for key, demand in demands if demand > 0}
    remaining = float(pool)
    while pending and remaining > _EPS:
        share = remaining / len(pending)
        bounded = [key for key, demand in pending.items() if demand <= share]
        if not bounded:
            for key in pending:
                alloc[key] = share
            return alloc
        for key in bounded:
            alloc[key] = pending[key]
            remaining -= pending.pop(key)
    return alloc


def available_bandwidth(state: FlowState, relay_id: str, now: float) -> float:
    """Bytes/second a measurement of relay_id sees at this instant.

    If the relay is under an active measurement, this is that flow's current
    allocation. Otherwise the answer is hypothetical: what a newly started,
    already-detected measurement would be allocated right now.
    """
    if relay_id not in state.topology.relays:
        raise ConfigError("unknown relay %r" % (relay_id,))
    active = [key for key in state.flows if key[0] == relay_id]
    if active:
        alloc = state.allocations(now)
        return max(alloc[("m",) + key] for key in active)
    probe = MeasurementFlow(
        relay_id=relay_id, ba_id="__probe__", detected=True,
        detect_time=now, start_time=now,
    )
    state.add_flow(probe)
    try:
        return state.flow_bandwidth(relay_id, "__probe__", now)
    finally:
        state.remove_flow(relay_id, "__probe__")


@dataclass(frozen=True)
class SimResult:
    records: tuple
    consensus: tuple
    baseline_bw: float


# Event priorities at equal timestamps: finish downloads first, then fold
# records into a consensus, then start the next round.
_PRIO_STEP = 0
_PRIO_CONSENSUS = 1
_PRIO_ROUND = 2


class _ThreadCtx:
    __slots__ = ("gen", "plan", "start", "now", "pending_duration", "busy")

    def __init__(self):
        self.gen = None
        self.plan = None
        self.start = 0.0
        self.now = 0.0
        self.pending_duration = None
        self.busy = False


class _Loop:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.state = FlowState(cfg.topology, cfg.user_load)
        self.records = []
        self.events = []
        self.seq = 0
        self.queues = {s.ba_id: [] for s in cfg.scanners}
        self.threads = {
            (s.ba_id, t): _ThreadCtx()
            for s in cfg.scanners for t in range(s.threads)
        }
        self.scanner_by_ba = {s.ba_id: s for s in cfg.scanners}
        self.rng_detect = random.Random("%s/detect" % (cfg.seed,))
        self.rng_fp = random.Random("%s/fp" % (cfg.seed,))

    def push(self, time, prio, payload):
        heapq.heappush(self.events, (time, prio, self.seq, payload))
        self.seq += 1

    # -- scanner thread driving --------------------------------------------

    def _start_next(self, ba_id, thread_id, now):
        ctx = self.threads[(ba_id, thread_id)]
        queue = self.queues[ba_id]
        # a target may still be mid-measurement from the previous round;
        # leave it queued for whichever thread frees up after it
        idx = next(
            (i for i, p in enumerate(queue)
             if (p.target, ba_id) not in self.state.flows),
            None,
        )
        if idx is None:
            ctx.busy = False
            return
        plan = queue.pop(idx)
        scancfg = self.scanner_by_ba[ba_id]
        relay = self.cfg.topology.relays[plan.target]
        detected = True
        if relay.policy != "honest":
            detected = (
                self.rng_detect.random() >= self.cfg.detector.false_negative_rate
            )
        self.state.add_flow(MeasurementFlow(
            relay_id=plan.target, ba_id=ba_id, detected=detected,
            detect_time=now + self.cfg.detector.detection_delay,
            start_time=now,
        ))
        ctx.busy = True
        ctx.plan = plan
        ctx.start = now
        ctx.now = now
        ctx.gen = measurement_steps(scancfg)
        step = ctx.gen.send(None)
        self._issue_download(ba_id, thread_id, step)

    def _issue_download(self, ba_id, thread_id, step):
        ctx = self.threads[(ba_id, thread_id)]
        _phase, size = step
        rate = min(
            self.state.flow_bandwidth(ctx.plan.target, ba_id, ctx.now),
            available_bandwidth(self.state, ctx.plan.exit, ctx.now),
        )
        if rate <= 0:
            ctx.pending_duration = None
            self.push(ctx.now, _PRIO_STEP, ("step", ba_id, thread_id))
            return
        ctx.pending_duration = size / rate
        self.push(ctx.now + ctx.pending_duration, _PRIO_STEP,
                  ("step", ba_id, thread_id))

    def _on_step(self, now, ba_id, thread_id):
        ctx = self.threads[(ba_id, thread_id)]
        ctx.now = now if ctx.pending_duration is not None else ctx.now + _EPS
        try:
            step = ctx.gen.send(ctx.pending_duration)
        except StopIteration as stop:
            self._complete(ba_id, thread_id, stop.value)
            self._start_next(ba_id, thread_id, ctx.now)
            return
        self._issue_download(ba_id, thread_id, step)

    def _complete(self, ba_id, thread_id, outcome):
        ctx = self.threads[(ba_id, thread_id)]
        self.state.remove_flow(ctx.plan.target, ba_id)
        self.records.append(_scanner._finish(
            outcome, ctx.plan, ba_id, thread_id, ctx.start, ctx.now,
        ))
        ctx.gen = None
        ctx.plan = None
        ctx.busy = False

    # -- rounds and consensus ------------------------------------------------

    def _active_relays(self, now):
        return [
            r for r in self.cfg.topology.relays.values()
            if self.cfg.activation_of(r.relay_id) <= now
        ]

    def _on_round(self, now, ba_id, round_idx):
        scancfg = self.scanner_by_ba[ba_id]
        plans = plan_round(
            scancfg, self._active_relays(now),
            "%s/%s/round%d" % (self.cfg.seed, ba_id, round_idx),
        )
        self.queues[ba_id] = list(plans)  # leftovers of the old round vanish
        for thread_id in range(scancfg.threads):
            if not self.threads[(ba_id, thread_id)].busy:
                self._start_next(ba_id, thread_id, now)

    def _resample_false_positives(self):
        detector = self.cfg.detector
        self.state.fp_suppressed_hosts.clear()
        if detector.false_positive_rate <= 0:
            return
        adversarial_hosts = sorted({
            r.host_id for r in self.cfg.topology.relays.values()
            if r.policy != "honest"
        })
        for host_id in adversarial_hosts:
            if self.rng_fp.random() < detector.false_positive_rate:
                self.state.fp_suppressed_hosts.add(host_id)


def run_simulation(cfg: SimConfig) -> SimResult:
    """Run the event loop over the configured duration.

    Deterministic for a fixed (config, seed): same records, same consensus.
    Raises SimulationError when there is nothing to measure.
    """
    if not cfg.scanners:
        raise SimulationError("nothing to measure")
    loop = _Loop(cfg)
    loop._resample_false_positives()

    for scanner in cfg.scanners:
        n_rounds = max(1, int(cfg.duration // scanner.round_budget))
        for k in range(n_rounds):
            loop.push(k * scanner.round_budget, _PRIO_ROUND,
                      ("round", scanner.ba_id, k))
    n_epochs = int(cfg.duration // cfg.consensus_interval)
    for e in range(1, n_epochs + 1):
        loop.push(e * cfg.consensus_interval, _PRIO_CONSENSUS, ("consensus", e))

    consensus = []
    prior = None
    while loop.events:
        time, _prio, _seq, payload = heapq.heappop(loop.events)
        if time > cfg.duration:
            break
        kind = payload[0]
        if kind == "step":
            loop._on_step(time, payload[1], payload[2])
        elif kind == "round":
            loop._on_round(time, payload[1], payload[2])
        elif kind == "consensus":
            epoch = payload[1]
            prior = _fold_consensus(loop.records, cfg, epoch, prior)
            consensus.append(prior)
            loop._resample_false_positives()

    if not any(rec.ok for rec in loop.records):
        raise SimulationError(
            "no successful measurements; check exit qualification and bandwidths"
        )
    baseline = _baseline_bw(loop.records, cfg.topology)
    return SimResult(
        records=tuple(loop.records),
        consensus=tuple(consensus),
        baseline_bw=baseline,
    )


def _fold_consensus(records, cfg, epoch, prior):
    lo = (epoch - 1) * cfg.consensus_interval
    hi = epoch * cfg.consensus_interval
    votes = []
    for scanner in cfg.scanners:
        sums, counts = {}, {}
        for rec in records:
            if rec.ba_id != scanner.ba_id or not rec.ok:
                continue
            if not lo < rec.end_time <= hi:
                continue
            sums[rec.relay_id] = sums.get(rec.relay_id, 0.0) + rec.measured_bw
            counts[rec.relay_id] = counts.get(rec.relay_id, 0) + 1
        if sums:
            votes.append(
                (scanner.ba_id, {r: sums[r] / counts[r] for r in sums})
            )
    if not votes:
        weights = dict(prior.weights) if prior is not None else {}
        return ConsensusSnapshot(epoch=epoch, weights=weights)
    return aggregate_consensus(votes, prior=prior, epoch=epoch)


def _attacker_host_classes(topology: Topology) -> set:
    classes = set()
    for relay in topology.relays.values():
        if relay.policy != "honest":
            host = topology.hosts[relay.host_id]
            classes.add((host.kind, host.capacity))
    return classes


def _baseline_bw(records, topology: Topology) -> float:
    """Mean measured bandwidth of honest relays on attacker-class hosts."""
    classes = _attacker_host_classes(topology)

    def qualifies(relay):
        if relay.policy != "honest":
            return False
        if not classes:
            return True
        host = topology.hosts[relay.host_id]
        return (host.kind, host.capacity) in classes

    eligible = {r.relay_id for r in topology.relays.values() if qualifies(r)}
    if not eligible:
        eligible = {
            r.relay_id for r in topology.relays.values() if r.policy == "honest"
        }
    values = [
        rec.measured_bw for rec in records
        if rec.ok and rec.relay_id in eligible
    ]
    if not values:
        return 0.0
    return sum(values) / len(values)


def inflation_factor(result: SimResult, attacker_relays) -> float:
    """Final consensus weight of the attacker set over the honest baseline."""
    attacker_relays = set(attacker_relays)
    if not attacker_relays:
        return 0.0
    if result.baseline_bw <= 0:
        raise ValueError("baseline bandwidth is zero, nothing to compare against")
    if not result.consensus:
        raise ValueError("no consensus snapshot in result")
    final = result.consensus[-1]
    total = sum(final.weights.get(r, 0.0) for r in attacker_relays)
    return total / result.baseline_bw


def run_probe(cfg: SimConfig, relay_ids, seed, start_time: float = 0.0) -> tuple:
    """Measure the given relays simultaneously, isolated from any round.

    One synthetic scanner starts every target at the same instant, so the
    targets contend exactly as a co-measurement would. Used by the defense
    workflow to force co-probes. Returns one record per relay.
    """
    relay_ids = list(relay_ids)
    if not relay_ids:
        return ()
    rng = random.Random("%s/probe" % (seed,))
    exits = sorted(
        (r for r in cfg.topology.relays.values() if r.role == "exit"),
        key=lambda r: r.relay_id,
    )
    base_scancfg = cfg.scanners[0] if cfg.scanners else ScannerConfig()
    scancfg = replace(
        base_scancfg, ba_id="probe",
        threads=max(1, min(8, len(relay_ids))),
    )
    plans = []
    for relay_id in relay_ids:
        target = cfg.topology.relays[relay_id]
        candidates = [
            e for e in exits
            if e.advertised_bw >= scancfg.exit_speed_factor * target.advertised_bw
        ]
        if not candidates:
            raise SimulationError("no qualifying exit for probe of %s" % relay_id)
        plans.append(MeasurementPlan(target=relay_id,
                                     exit=rng.choice(candidates).relay_id))

    probe_cfg = replace(cfg, scanners=(scancfg,))
    loop = _Loop(probe_cfg)
    loop.queues["probe"] = list(plans)
    for thread_id in range(min(scancfg.threads, len(plans))):
        loop._start_next("probe", thread_id, start_time)
    while loop.events:
        time, _prio, _seq, payload = heapq.heappop(loop.events)
        loop._on_step(time, payload[1], payload[2])
    return tuple(loop.records)
