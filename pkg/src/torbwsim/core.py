"""Shared domain types: relays, hosts, clusters, measurement records, consensus.

Bandwidth is bytes/second everywhere in this package. Unit conversion happens
at the parsing boundary (units.py, cli.py), never inside the model.
"""

import re
import statistics
from dataclasses import dataclass, field
from typing import Optional

ROLES = frozenset({"guard", "middle", "exit"})

# Resource-sharing behavior of a relay's host when a measurement is detected:
#   honest            - no reaction, plain fair sharing
#   drop_on_measure   - drops its own user flows for the measurement's duration
#   cotormult_member  - co-resident cluster: all user flows on the host drop and
#                       the measured members claim the whole host
#   detormult_member  - measurement traffic is rerouted to a shared dedicated
#                       server while user flows stay on the cheap cluster host
POLICIES = frozenset(
    {"honest", "drop_on_measure", "cotormult_member", "detormult_member"}
)

HOST_KINDS = frozenset(
    {"relay_host", "dedicated_server", "web_server", "scanner_host"}
)

_FINGERPRINT_RE = re.compile(r"^[0-9A-F]{40}$")


class ConfigError(ValueError):
    """Invalid topology or simulation configuration."""


class SimulationError(RuntimeError):
    """Simulation could not run to completion."""


class InsufficientDataError(ValueError):
    """Analysis input does not contain enough data to produce a result."""


def is_fingerprint(s: str) -> bool:
    return isinstance(s, str) and bool(_FINGERPRINT_RE.match(s))


@dataclass(frozen=True)
class RelaySpec:
    relay_id: str
    host_id: str
    advertised_bw: float
    role: str = "middle"
    policy: str = "honest"
    family_id: Optional[str] = None

    def __post_init__(self):
        if not is_fingerprint(self.relay_id):
            raise ConfigError(
                "relay_id must be a 40-char uppercase hex fingerprint, got %r"
                % (self.relay_id,)
            )
        if self.advertised_bw <= 0:
            raise ConfigError("relay %s: advertised_bw must be > 0" % self.relay_id)
        if self.role not in ROLES:
            raise ConfigError("relay %s: unknown role %r" % (self.relay_id, self.role))
        if self.policy not in POLICIES:
            raise ConfigError(
                "relay %s: unknown policy %r" % (self.relay_id, self.policy)
            )


@dataclass(frozen=True)
class HostSpec:
    host_id: str
    capacity: float
    kind: str = "relay_host"
    efficiency: float = 1.0

    def __post_init__(self):
        if self.capacity <= 0:
            raise ConfigError("host %s: capacity must be > 0" % self.host_id)
        if not 0 < self.efficiency <= 1:
            raise ConfigError(
                "host %s: efficiency must be in (0, 1], got %r"
                % (self.host_id, self.efficiency)
            )
        if self.kind not in HOST_KINDS:
            raise ConfigError("host %s: unknown kind %r" % (self.host_id, self.kind))

    @property
    def usable_capacity(self) -> float:
        return self.capacity * self.efficiency


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    members: tuple
    host_id: str


@dataclass(frozen=True)
class ClusterTopology:
    clusters: tuple = ()
    dedicated_server: Optional[str] = None

    @property
    def n_per_cluster(self) -> int:
        sizes = {len(c.members) for c in self.clusters}
        if len(sizes) > 1:
            raise ConfigError("clusters are not uniform in size: %s" % sorted(sizes))
        return sizes.pop() if sizes else 0

    @property
    def num_servers(self) -> int:
        return len({c.host_id for c in self.clusters})

    def cluster_of(self, relay_id: str) -> Optional[Cluster]:
        for c in self.clusters:
            if relay_id in c.members:
                return c
        return None


@dataclass(frozen=True)
class Topology:
    """Static network description: hosts, relays, and attack clusters."""

    relays: dict
    hosts: dict
    clusters: ClusterTopology = field(default_factory=ClusterTopology)

    def __post_init__(self):
        for relay in self.relays.values():
            if relay.host_id not in self.hosts:
                raise ConfigError(
                    "relay %s references unknown host %r"
                    % (relay.relay_id, relay.host_id)
                )
        for cluster in self.clusters.clusters:
            if cluster.host_id not in self.hosts:
                raise ConfigError(
                    "cluster %s references unknown host %r"
                    % (cluster.cluster_id, cluster.host_id)
                )
            for member in cluster.members:
                if member not in self.relays:
                    raise ConfigError(
                        "cluster %s lists unknown relay %r"
                        % (cluster.cluster_id, member)
                    )
        for relay in self.relays.values():
            if relay.policy in ("cotormult_member", "detormult_member"):
                cluster = self.clusters.cluster_of(relay.relay_id)
                if cluster is None:
                    raise ConfigError(
                        "relay %s has policy %s but belongs to no cluster"
                        % (relay.relay_id, relay.policy)
                    )
                if relay.policy == "cotormult_member" and relay.host_id != cluster.host_id:
                    raise ConfigError(
                        "cotormult relay %s must live on its cluster host %s"
                        % (relay.relay_id, cluster.host_id)
                    )
        if any(
            r.policy == "detormult_member" for r in self.relays.values()
        ):
            ded = self.clusters.dedicated_server
            if ded is None:
                raise ConfigError(
                    "detormult_member relays need a dedicated_server host"
                )
            if self.hosts[ded].kind != "dedicated_server":
                raise ConfigError(
                    "dedicated_server %s must have kind dedicated_server" % ded
                )
        if self.clusters.dedicated_server is not None:
            if self.clusters.dedicated_server not in self.hosts:
                raise ConfigError(
                    "unknown dedicated_server host %r"
                    % (self.clusters.dedicated_server,)
                )

    def host_of(self, relay_id: str) -> HostSpec:
        return self.hosts[self.relays[relay_id].host_id]


@dataclass(frozen=True)
class MeasurementRecord:
    """One scanner measurement of one relay.

    start_time may be None for records reconstructed from bandwidth files,
    which carry only the end timestamp.
    """

    relay_id: str
    ba_id: str
    thread_id: int
    start_time: Optional[float]
    end_time: float
    measured_bw: float
    bytes_total: int = 0
    downloads: int = 0
    ok: bool = True

    def __post_init__(self):
        if self.start_time is not None and self.end_time <= self.start_time:
            raise ValueError(
                "measurement of %s: end_time must exceed start_time" % self.relay_id
            )
        if self.ok and self.measured_bw <= 0:
            raise ValueError(
                "successful measurement of %s must have measured_bw > 0"
                % self.relay_id
            )

    @property
    def duration(self) -> Optional[float]:
        if self.start_time is None:
            return None
        return self.end_time - self.start_time


@dataclass(frozen=True)
class ConsensusSnapshot:
    epoch: int
    weights: dict
    total_weight: float = field(init=False)

    def __post_init__(self):
        for relay_id, w in self.weights.items():
            if w < 0:
                raise ValueError("negative consensus weight for %s" % relay_id)
        object.__setattr__(self, "total_weight", float(sum(self.weights.values())))


def aggregate_consensus(votes, prior: Optional[ConsensusSnapshot] = None,
                        epoch: int = 0) -> ConsensusSnapshot:
    """Combine per-scanner bandwidth votes into consensus weights.

    Each vote is (ba_id, {relay_id: measured_bw}). A relay's weight is the
    median over the scanners that measured it; relays present only in the
    prior snapshot keep their prior weight.
    """
    if not votes:
        raise ValueError("no votes")
    for ba_id, vote in votes:
        if not vote:
            raise ValueError("empty vote from %s" % ba_id)
    weights = {}
    if prior is not None:
        weights.update(prior.weights)
    by_relay = {}
    for _ba_id, vote in votes:
        for relay_id, bw in vote.items():
            by_relay.setdefault(relay_id, []).append(bw)
    for relay_id, values in by_relay.items():
        weights[relay_id] = float(statistics.median(values))
    return ConsensusSnapshot(epoch=epoch, weights=weights)


def selection_probability(snapshot: ConsensusSnapshot, relay_ids) -> float:
    """Fraction of total consensus weight held by the given relays."""
    if snapshot.total_weight <= 0:
        raise ValueError("degenerate consensus")
    owned = sum(snapshot.weights.get(r, 0.0) for r in set(relay_ids))
    return owned / snapshot.total_weight
