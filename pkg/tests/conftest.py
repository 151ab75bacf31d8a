"""Shared scenario builders for the test suite."""

import hashlib

from torbwsim.core import Cluster, ClusterTopology, HostSpec, RelaySpec, Topology
from torbwsim.netsim import DetectorModel, SimConfig
from torbwsim.scanner import ScannerConfig

MB = 1_000_000.0


def fp(label: str) -> str:
    """Deterministic 40-hex fingerprint from a label."""
    return hashlib.sha1(label.encode()).hexdigest().upper()[:40]


def honest_farm(n_middles: int = 5, middle_bw: float = 25 * MB,
                host_capacity: float = 50 * MB, user_load_bw: float = 0.0,
                n_exits: int = 2, prefix: str = "farm"):
    """Uncontended honest middles on separate hosts plus fast exits.

    Returns (relays dict, hosts dict, user_load dict).
    """
    relays, hosts, load = {}, {}, {}
    for i in range(n_middles):
        host_id = "%s-h%02d" % (prefix, i)
        hosts[host_id] = HostSpec(host_id=host_id, capacity=host_capacity)
        relay = RelaySpec(
            relay_id=fp("%s/middle%d" % (prefix, i)),
            host_id=host_id,
            advertised_bw=middle_bw,
        )
        relays[relay.relay_id] = relay
        if user_load_bw:
            load[relay.relay_id] = user_load_bw
    for i in range(n_exits):
        host_id = "%s-x%02d" % (prefix, i)
        hosts[host_id] = HostSpec(host_id=host_id, capacity=400 * MB)
        relay = RelaySpec(
            relay_id=fp("%s/exit%d" % (prefix, i)),
            host_id=host_id,
            advertised_bw=200 * MB,
            role="exit",
        )
        relays[relay.relay_id] = relay
    return relays, hosts, load


def cotormult_topology(n_members: int = 5, member_claim: float = 25 * MB,
                       host_capacity: float = 50 * MB, efficiency: float = 0.95,
                       member_load: float = 20 * MB, n_honest: int = 5,
                       honest_load: float = 0.0, prefix: str = "ct"):
    """One CoTorMult cluster next to an honest farm on same-class hosts."""
    relays, hosts, load = honest_farm(
        n_middles=n_honest, host_capacity=host_capacity,
        user_load_bw=honest_load, prefix=prefix,
    )
    cluster_host = "%s-cluster" % prefix
    hosts[cluster_host] = HostSpec(
        host_id=cluster_host, capacity=host_capacity, efficiency=efficiency
    )
    members = []
    for i in range(n_members):
        relay = RelaySpec(
            relay_id=fp("%s/member%d" % (prefix, i)),
            host_id=cluster_host,
            advertised_bw=member_claim,
            policy="cotormult_member",
            family_id=cluster_host,
        )
        relays[relay.relay_id] = relay
        members.append(relay.relay_id)
        if member_load:
            load[relay.relay_id] = member_load
    clusters = ClusterTopology(clusters=(
        Cluster(cluster_id=cluster_host, members=tuple(members),
                host_id=cluster_host),
    ))
    topology = Topology(relays=relays, hosts=hosts, clusters=clusters)
    return topology, members, load


def detormult_topology(n_clusters: int = 3, members_per_cluster: int = 6,
                       cluster_capacity: float = 25 * MB,
                       dedicated_capacity: float = 50 * MB,
                       dedicated_efficiency: float = 0.22,
                       member_claim: float = 25 * MB,
                       n_honest: int = 6, prefix: str = "dt"):
    """Cheap relay clusters rerouting measurements to one dedicated server."""
    relays, hosts, load = honest_farm(
        n_middles=n_honest, host_capacity=cluster_capacity, prefix=prefix,
    )
    hosts["%s-dedicated" % prefix] = HostSpec(
        host_id="%s-dedicated" % prefix, capacity=dedicated_capacity,
        kind="dedicated_server", efficiency=dedicated_efficiency,
    )
    cluster_list = []
    members_by_cluster = []
    for c in range(n_clusters):
        host_id = "%s-cluster%d" % (prefix, c)
        hosts[host_id] = HostSpec(host_id=host_id, capacity=cluster_capacity)
        members = []
        for i in range(members_per_cluster):
            relay = RelaySpec(
                relay_id=fp("%s/c%dm%d" % (prefix, c, i)),
                host_id=host_id,
                advertised_bw=member_claim,
                policy="detormult_member",
                family_id=host_id,
            )
            relays[relay.relay_id] = relay
            members.append(relay.relay_id)
        cluster_list.append(Cluster(
            cluster_id=host_id, members=tuple(members), host_id=host_id
        ))
        members_by_cluster.append(members)
    clusters = ClusterTopology(
        clusters=tuple(cluster_list),
        dedicated_server="%s-dedicated" % prefix,
    )
    topology = Topology(relays=relays, hosts=hosts, clusters=clusters)
    return topology, members_by_cluster, load


def sim_config(topology, user_load=None, threads: int = 1, seed: int = 0,
               duration: float = 3600.0, round_budget: float = 3600.0,
               consensus_interval: float = 3600.0, detector=None,
               n_scanners: int = 1, **kwargs) -> SimConfig:
    scanners = tuple(
        ScannerConfig(ba_id="ba%d" % i, threads=threads,
                      round_budget=round_budget)
        for i in range(n_scanners)
    )
    return SimConfig(
        topology=topology,
        scanners=scanners,
        user_load=user_load or {},
        detector=detector or DetectorModel(),
        duration=duration,
        seed=seed,
        consensus_interval=consensus_interval,
        **kwargs,
    )
