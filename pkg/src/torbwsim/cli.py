"""Command line front end.

Subcommands:
    simulate   run a scenario config or preset, persist records and consensus
    analyze    duration / coincidence analytics over bandwidth-file corpora
    estimate   closed-form attack resource estimates
    detect     countermeasure scoring and probe planning

Exit codes are a stable contract: 0 success, 2 usage or configuration
problem, 3 simulation failure, 4 insufficient data. Every command that
writes an output directory drops a manifest.json recording the command
line, config digest, seed, and wall-clock bounds; with wall times excluded,
reruns with identical inputs produce identical bytes.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import statistics
import sys
from datetime import datetime, timezone
from importlib import resources

from . import __version__, bwfile, coincidence, defense, estimator, netsim, units
from .core import (
    Cluster,
    ClusterTopology,
    ConfigError,
    HostSpec,
    InsufficientDataError,
    MeasurementRecord,
    RelaySpec,
    SimulationError,
    Topology,
)
from .scanner import ScannerConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_DATA = 4

PRESET_NAMES = ("all-honest", "cotormult-n5", "detormult-3x6")

DEFAULT_SWEEP_WINDOWS = (86400.0, 604800.0, 2592000.0, 7776000.0)


# -- config ingestion ---------------------------------------------------------


def _rate(value, where: str) -> float:
    try:
        return units.parse_rate(value)
    except units.UnitError as exc:
        raise ConfigError("%s: %s" % (where, exc))


def _require(mapping: dict, key: str, where: str):
    try:
        return mapping[key]
    except (KeyError, TypeError):
        raise ConfigError("%s: missing required field %r" % (where, key))


def build_sim_config(doc: dict) -> netsim.SimConfig:
    """Turn a parsed config document into a validated SimConfig.

    Bandwidth values must carry unit suffixes; every diagnostic names the
    offending field.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")

    relays = {}
    for i, rd in enumerate(doc.get("relays", ())):
        where = "relays[%d]" % i
        spec = RelaySpec(
            relay_id=_require(rd, "relay_id", where),
            host_id=_require(rd, "host_id", where),
            advertised_bw=_rate(
                _require(rd, "advertised_bw", where), where + ".advertised_bw"
            ),
            role=rd.get("role", "middle"),
            policy=rd.get("policy", "honest"),
            family_id=rd.get("family_id"),
        )
        if spec.relay_id in relays:
            raise ConfigError("%s: duplicate relay_id %s" % (where, spec.relay_id))
        relays[spec.relay_id] = spec

    hosts = {}
    for i, hd in enumerate(doc.get("hosts", ())):
        where = "hosts[%d]" % i
        spec = HostSpec(
            host_id=_require(hd, "host_id", where),
            capacity=_rate(_require(hd, "capacity", where), where + ".capacity"),
            kind=hd.get("kind", "relay_host"),
            efficiency=hd.get("efficiency", 1.0),
        )
        if spec.host_id in hosts:
            raise ConfigError("%s: duplicate host_id %s" % (where, spec.host_id))
        hosts[spec.host_id] = spec

    cd = doc.get("clusters") or {}
    clusters = ClusterTopology(
        clusters=tuple(
            Cluster(
                cluster_id=_require(c, "cluster_id", "clusters[%d]" % i),
                members=tuple(_require(c, "members", "clusters[%d]" % i)),
                host_id=_require(c, "host_id", "clusters[%d]" % i),
            )
            for i, c in enumerate(cd.get("clusters", ()))
        ),
        dedicated_server=cd.get("dedicated_server"),
    )
    topology = Topology(relays=relays, hosts=hosts, clusters=clusters)

    scanners = []
    for i, sd in enumerate(doc.get("scanners", ())):
        where = "scanners[%d]" % i
        try:
            scanners.append(ScannerConfig(
                ba_id=sd.get("ba_id", "ba%d" % i),
                threads=sd.get("threads", 4),
                downloads_per_measurement=sd.get("downloads_per_measurement", 5),
                exit_speed_factor=sd.get("exit_speed_factor", 2.0),
                round_budget=sd.get("round_budget", 3600.0),
            ))
        except ValueError as exc:
            raise ConfigError("%s: %s" % (where, exc))
    if not scanners:
        raise ConfigError("scanners: at least one scanner is required")

    dd = doc.get("detector") or {}
    detector = netsim.DetectorModel(
        mode=dd.get("mode", "ip_filter"),
        detection_delay_packets=dd.get("detection_delay_packets"),
        false_negative_rate=dd.get("false_negative_rate", 0.0),
        false_positive_rate=dd.get("false_positive_rate", 0.0),
        per_packet_latency=dd.get("per_packet_latency", 0.0005),
    )

    user_load = {
        relay_id: _rate(value, "user_load[%r]" % relay_id)
        for relay_id, value in (doc.get("user_load") or {}).items()
    }

    return netsim.SimConfig(
        topology=topology,
        scanners=tuple(scanners),
        user_load=user_load,
        detector=detector,
        duration=doc.get("duration", 3600.0),
        seed=doc.get("seed", 0),
        consensus_interval=doc.get("consensus_interval", 3600.0),
        activation_times=doc.get("activation_times") or {},
        time_compression=doc.get("time_compression", 1.0),
    )


def _preset_bytes(name: str) -> bytes:
    res = resources.files("torbwsim").joinpath("presets", name + ".json")
    try:
        return res.read_bytes()
    except FileNotFoundError:
        raise ConfigError("unknown preset %r" % name)


def _load_config_bytes(args) -> bytes:
    if args.preset:
        return _preset_bytes(args.preset)
    try:
        with open(args.config, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError("cannot read config %s: %s" % (args.config, exc))


# -- output plumbing ----------------------------------------------------------


def _write_atomic(path: str, data) -> None:
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp = "%s.tmp.%d" % (path, os.getpid())
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


class _OutputDir:
    """Collects output files and finishes with a manifest."""

    def __init__(self, out: str, argv, config_digest=None, seed=None):
        self.out = out
        self.argv = list(argv)
        self.config_digest = config_digest
        self.seed = seed
        self.names = []
        self.started = datetime.now(timezone.utc).timestamp()
        os.makedirs(out, exist_ok=True)

    def write(self, name: str, data) -> str:
        path = os.path.join(self.out, name)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        _write_atomic(path, data)
        self.names.append(name)
        return path

    def finish(self) -> None:
        manifest = {
            "command": " ".join(["torbwsim"] + self.argv),
            "config_digest": self.config_digest,
            "seed": self.seed,
            "tool_version": __version__,
            "started": _iso(self.started),
            "finished": _iso(datetime.now(timezone.utc).timestamp()),
            "outputs": sorted(self.names),
        }
        _write_atomic(
            os.path.join(self.out, "manifest.json"),
            json.dumps(manifest, indent=2) + "\n",
        )


def _records_jsonl(records) -> str:
    lines = []
    for rec in records:
        lines.append(json.dumps({
            "relay_id": rec.relay_id,
            "ba_id": rec.ba_id,
            "thread_id": rec.thread_id,
            "start": rec.start_time,
            "end": rec.end_time,
            "bw": rec.measured_bw,
            "bytes": rec.bytes_total,
            "downloads": rec.downloads,
            "ok": rec.ok,
        }))
    return "\n".join(lines) + "\n"


def _read_records_jsonl(path: str):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                records.append(MeasurementRecord(
                    relay_id=doc["relay_id"],
                    ba_id=doc["ba_id"],
                    thread_id=doc.get("thread_id", 0),
                    start_time=doc.get("start"),
                    end_time=doc["end"],
                    measured_bw=doc["bw"],
                    bytes_total=doc.get("bytes", 0),
                    downloads=doc.get("downloads", 0),
                    ok=doc.get("ok", True),
                ))
            except (KeyError, ValueError) as exc:
                raise ConfigError("%s:%d: bad record: %s" % (path, lineno, exc))
    return records


# -- simulate -----------------------------------------------------------------


def _attacker_groups(topology: Topology) -> dict:
    groups = {}
    for relay in topology.relays.values():
        if relay.policy == "honest":
            continue
        cluster = topology.clusters.cluster_of(relay.relay_id)
        key = relay.family_id or (cluster.cluster_id if cluster else relay.policy)
        groups.setdefault(key, []).append(relay.relay_id)
    return {key: sorted(ids) for key, ids in sorted(groups.items())}


def _summarize(cfg: netsim.SimConfig, result: netsim.SimResult) -> dict:
    final = result.consensus[-1].weights if result.consensus else {}
    groups = _attacker_groups(cfg.topology)
    per_group = {}
    all_attackers = []
    for key, ids in groups.items():
        all_attackers.extend(ids)
        per_group[key] = {
            "relays": ids,
            "total_weight": sum(final.get(r, 0.0) for r in ids),
            "inflation": netsim.inflation_factor(result, ids),
        }
    if all_attackers:
        overall = netsim.inflation_factor(result, all_attackers)
    else:
        # no attackers configured: report the honest weight-to-baseline ratio,
        # which should sit at 1 for a well-calibrated scenario
        honest = [
            final[r] for r, spec in cfg.topology.relays.items()
            if spec.policy == "honest" and r in final and spec.role != "exit"
        ]
        overall = (
            statistics.fmean(honest) / result.baseline_bw
            if honest and result.baseline_bw > 0 else 0.0
        )
    ok_records = sum(1 for r in result.records if r.ok)
    return {
        "seed": cfg.seed,
        "duration": cfg.duration,
        "baseline_bw": result.baseline_bw,
        "inflation": overall,
        "groups": per_group,
        "records_total": len(result.records),
        "records_ok": ok_records,
        "consensus_epochs": len(result.consensus),
    }


def cmd_simulate(args) -> int:
    raw = _load_config_bytes(args)
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError("config is not valid JSON: %s" % exc)
    cfg = build_sim_config(doc)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    digest = hashlib.sha256(raw).hexdigest()

    result = netsim.run_simulation(cfg)

    out = _OutputDir(args.out, args.argv, config_digest=digest, seed=cfg.seed)
    out.write("records.jsonl", _records_jsonl(result.records))

    consensus_rows = ["epoch,relay_id,weight"]
    for snap in result.consensus:
        for relay_id in sorted(snap.weights):
            consensus_rows.append(
                "%d,%s,%.6f" % (snap.epoch, relay_id, snap.weights[relay_id])
            )
    out.write("consensus.csv", "\n".join(consensus_rows) + "\n")

    summary = _summarize(cfg, result)
    out.write("summary.json", json.dumps(summary, indent=2) + "\n")

    base_time = 1650000000
    for scanner_cfg in cfg.scanners:
        if any(r.ok and r.ba_id == scanner_cfg.ba_id for r in result.records):
            bwf = bwfile.from_records(result.records, scanner_cfg.ba_id, base_time)
            out.write(
                os.path.join("bwfiles", scanner_cfg.ba_id + ".bw"),
                bwfile.serialize_bandwidth_file(bwf),
            )
    out.finish()
    print(json.dumps({
        "baseline_bw": summary["baseline_bw"],
        "inflation": summary["inflation"],
        "out": args.out,
    }))
    return EXIT_OK


# -- analyze ------------------------------------------------------------------


def _load_bwfiles(directory: str):
    try:
        names = sorted(os.listdir(directory))
    except OSError as exc:
        raise ConfigError("cannot read bandwidth file directory: %s" % exc)
    files = []
    for name in names:
        path = os.path.join(directory, name)
        if not os.path.isfile(path):
            continue
        with open(path, "rb") as fh:
            data = fh.read()
        try:
            files.append(bwfile.parse_bandwidth_file(
                data, ba_id=os.path.splitext(name)[0]
            ))
        except bwfile.ParseError as exc:
            log.warning("skipping %s: %s", path, exc)
    if not files:
        raise ConfigError("no parsable bandwidth files in %s" % directory)
    return files


def _load_relay_set(path: str) -> set:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError("cannot read relays file: %s" % exc)
    relay_set = set()
    for line in lines:
        token = line.strip().lstrip("$").upper()
        if token:
            relay_set.add(token)
    if not relay_set:
        raise ConfigError("relays file %s lists no relays" % path)
    return relay_set


def cmd_analyze(args) -> int:
    files = _load_bwfiles(args.bwdir)
    out = _OutputDir(args.out, args.argv, seed=getattr(args, "seed", None))

    if args.subcommand == "durations":
        est = bwfile.estimate_duration(
            files, iterations=args.iterations, rng_seed=args.seed
        )
        out.write("durations.json", json.dumps({
            "median": est.median,
            "sample_count": est.sample_count,
            "iterations": est.iterations,
            "thread_count_histogram": {
                str(k): v for k, v in sorted(est.thread_count_histogram.items())
            },
        }, indent=2) + "\n")
        print(json.dumps({"median": est.median}))
    elif args.subcommand == "coincidence":
        relay_set = _load_relay_set(args.relays)
        timeline = bwfile.build_timeline(files, duration=args.duration)
        window = None
        if args.window:
            try:
                lo, hi = (float(part) for part in args.window.split(","))
            except ValueError:
                raise ConfigError("--window must be START,END in unix seconds")
            window = (lo, hi)
        dist = coincidence.count_events(timeline, relay_set, window=window)
        rows = ["k,count,probability"]
        for k, count, prob in coincidence.distribution_rows(dist):
            rows.append("%d,%d,%.9f" % (k, count, prob))
        out.write("distribution.csv", "\n".join(rows) + "\n")
        print(json.dumps({
            "total_measurements": dist.total_measurements,
            "expected_inflation": coincidence.expected_inflation(dist),
        }))
    else:  # window-sweep
        relay_set = _load_relay_set(args.relays)
        timeline = bwfile.build_timeline(files, duration=args.duration)
        windows = []
        for chunk in args.window or []:
            for part in chunk.split(","):
                if part:
                    windows.append(float(part))
        if not windows:
            windows = list(DEFAULT_SWEEP_WINDOWS)
        sweep = coincidence.coincidence_vs_window(timeline, relay_set, windows)
        rows = ["window_seconds,p2"]
        for w in windows:
            if w in sweep:
                rows.append("%.0f,%.9f" % (w, sweep[w]))
        out.write("window_sweep.csv", "\n".join(rows) + "\n")
        print(json.dumps({"windows_reported": len(sweep)}))

    out.finish()
    return EXIT_OK


# -- estimate -----------------------------------------------------------------


def _load_samples(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError("cannot read samples file: %s" % exc)
    samples = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if lineno == 1 and any(not _is_number(p) for p in parts):
            continue  # header row
        if len(parts) != 2 or not all(_is_number(p) for p in parts):
            raise ConfigError("%s:%d: expected 'x,y' pairs" % (path, lineno))
        samples.append((float(parts[0]), float(parts[1])))
    return samples


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def cmd_estimate(args) -> int:
    if args.subcommand == "inflation":
        value = estimator.inflation_curve(args.x)
        result = {"x": args.x, "inflation": value}
    elif args.subcommand == "servers":
        query = estimator.ResourceQuery(x=args.x, b=args.b, p=args.p, d=args.d)
        servers = estimator.servers_required(query)
        result = {
            "x": args.x,
            "servers": servers,
            "total_relays": servers * args.x,
            "b_bytes_per_second": args.b,
            "p_percent": args.p,
            "d_bytes_per_second": args.d,
        }
    elif args.subcommand == "optimize":
        best = estimator.optimize_cluster(b=args.b, p=args.p, d=args.d)
        result = dict(best)
        result.update({
            "b_bytes_per_second": args.b,
            "p_percent": args.p,
            "d_bytes_per_second": args.d,
        })
    else:  # refit
        samples = _load_samples(args.samples)
        try:
            fit = estimator.refit_curve(samples, max_evaluations=args.max_evaluations)
        except ValueError as exc:
            raise ConfigError(str(exc))
        result = {
            "coefficients": fit.model.coefficients(),
            "mse": fit.mse,
            "evaluations": fit.evaluations,
        }
    print(json.dumps(result, indent=2))
    return EXIT_OK


# -- detect -------------------------------------------------------------------


def _records_from_bwfiles(files):
    records = []
    for bwf in files:
        for entry in bwf.entries:
            if entry.bw <= 0:
                continue
            records.append(MeasurementRecord(
                relay_id=entry.node_id,
                ba_id=bwf.ba_id,
                thread_id=0,
                start_time=None,
                end_time=float(entry.end_time),
                measured_bw=float(entry.bw),
            ))
    return records


def cmd_detect(args) -> int:
    if os.path.isfile(args.input):
        records = _read_records_jsonl(args.input)
    elif os.path.isdir(args.input):
        records = _records_from_bwfiles(_load_bwfiles(args.input))
    else:
        raise ConfigError("input path %s does not exist" % args.input)

    counts = {}
    for rec in records:
        if rec.ok:
            counts[rec.relay_id] = counts.get(rec.relay_id, 0) + 1
    if len(counts) < 2:
        for relay_id in sorted(counts):
            print("%s: %d records" % (relay_id, counts[relay_id]), file=sys.stderr)
        raise InsufficientDataError(
            "need successful records for at least 2 relays, have %d" % len(counts)
        )

    timeline = bwfile.TimelineEstimate(intervals=(), assumed_duration=args.duration)
    report = defense.score_suspects(
        records, timeline=timeline, threshold=args.threshold
    )
    plans = defense.plan_probes(report, args.probe_budget) if report.pair_drops else []

    out = _OutputDir(args.out, args.argv)
    out.write(
        "suspicion.json",
        json.dumps(defense.report_to_dict(report), indent=2) + "\n",
    )
    out.write(
        "probes.csv",
        "\n".join(",".join(row) for row in defense.probe_rows(plans)) + "\n",
    )
    out.finish()
    print(json.dumps({
        "suspected_groups": [list(g) for g in report.groups],
        "probes_planned": len(plans),
    }))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="torbwsim",
        description="Bandwidth-scanner inflation attack simulation and forensics.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario and persist results")
    src = sim.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="path to a JSON scenario config")
    src.add_argument("--preset", choices=PRESET_NAMES, help="built-in scenario")
    sim.add_argument("--seed", type=int, default=None, help="override config seed")
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=cmd_simulate)

    ana = sub.add_parser("analyze", help="bandwidth-file corpus analytics")
    anasub = ana.add_subparsers(dest="subcommand", required=True)
    for name in ("durations", "coincidence", "window-sweep"):
        p = anasub.add_parser(name)
        p.add_argument("bwdir", help="directory of bandwidth files")
        p.add_argument("--out", required=True)
        p.add_argument("--iterations", type=int, default=120)
        p.add_argument("--duration", type=float, default=39.0,
                       help="assumed measurement duration in seconds")
        p.add_argument("--seed", default=0)
        if name != "durations":
            p.add_argument("--relays", required=True,
                           help="file listing relay fingerprints, one per line")
        if name == "coincidence":
            p.add_argument("--window", default=None,
                           help="START,END unix-second bounds on end times")
        if name == "window-sweep":
            p.add_argument("--window", action="append", default=None,
                           help="window length in seconds, repeatable")
        p.set_defaults(func=cmd_analyze)

    est = sub.add_parser("estimate", help="closed-form resource estimates")
    estsub = est.add_subparsers(dest="subcommand", required=True)
    p = estsub.add_parser("inflation")
    p.add_argument("--x", type=int, required=True, help="relays per server")
    p.set_defaults(func=cmd_estimate)
    p = estsub.add_parser("servers")
    p.add_argument("--x", type=int, required=True, help="relays per server")
    p.add_argument("--b", type=units.parse_rate, required=True,
                   help="network traffic volume, unit suffix required (e.g. 678Gbit)")
    p.add_argument("--p", type=float, required=True, help="target traffic share, percent")
    p.add_argument("--d", type=units.parse_rate, required=True,
                   help="per-server bandwidth, unit suffix required (e.g. 100MB)")
    p.set_defaults(func=cmd_estimate)
    p = estsub.add_parser("optimize")
    p.add_argument("--b", type=units.parse_rate, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--d", type=units.parse_rate, required=True)
    p.set_defaults(func=cmd_estimate)
    p = estsub.add_parser("refit")
    p.add_argument("--samples", required=True, help="CSV of x,y fit samples")
    p.add_argument("--max-evaluations", type=int, default=100000)
    p.set_defaults(func=cmd_estimate)

    det = sub.add_parser("detect", help="score co-measurement suspects")
    det.add_argument("input", help="records.jsonl or a bandwidth-file directory")
    det.add_argument("--threshold", type=float, default=defense.DEFAULT_THRESHOLD)
    det.add_argument("--probe-budget", type=int, default=10)
    det.add_argument("--duration", type=float, default=39.0,
                     help="assumed duration for records without start times")
    det.add_argument("--out", required=True)
    det.set_defaults(func=cmd_detect)

    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    args = _build_parser().parse_args(argv)
    args.argv = list(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InsufficientDataError as exc:
        print("error: insufficient data: %s" % exc, file=sys.stderr)
        return EXIT_DATA
    except SimulationError as exc:
        print("error: simulation failed: %s" % exc, file=sys.stderr)
        return EXIT_SIMULATION
    except (ConfigError, units.UnitError, estimator.DomainError,
            bwfile.ParseError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
