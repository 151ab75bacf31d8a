"""Bandwidth-file wire format and timeline reconstruction.

The on-disk format is a simplified subset of the Tor bandwidth-file line
format:

    <unix timestamp>
    key=value                (optional header lines)
    =====
    bw=<int> node_id=$<40 HEX> time=<ISO-8601 or unix seconds>

Real files carry many more entry keys; unknown keys parse fine and are kept
in a per-entry extras map. The serializer always emits the three canonical
keys in the order above, one entry per line, entries sorted by end time and
then node id, so serialize(parse(x)) is a stable normal form and a byte-exact
identity on files this package wrote itself.

Bandwidth files record only the END of each measurement. The inference
helpers reconstruct what the scanner was doing: measurements on one thread
must be at least 25 s apart (five downloads of at least 5 s each), so
threads can be re-assigned from end times alone, and same-thread gaps under
50 s approximate measurement durations.
"""

import logging
import random
import statistics
from dataclasses import dataclass
from datetime import datetime, timezone

from .core import InsufficientDataError, is_fingerprint

log = logging.getLogger(__name__)

MIN_MEASUREMENT_GAP = 25.0
MAX_SEQUENTIAL_GAP = 50.0
DEFAULT_ASSUMED_DURATION = 39.0

_TERMINATOR = "====="


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class BandwidthEntry:
    node_id: str
    bw: int
    end_time: int
    extras: tuple = ()  # ((key, value), ...) for unknown keys, parse order

    def __post_init__(self):
        if not is_fingerprint(self.node_id):
            raise ParseError("bad node_id %r" % (self.node_id,))


@dataclass(frozen=True)
class BandwidthFile:
    header_timestamp: int
    entries: tuple
    ba_id: str = "unknown"
    headers: tuple = ()  # ((key, value), ...) extra header lines
    skipped_lines: int = 0


def _parse_time(value: str):
    try:
        return int(value)
    except ValueError:
        pass
    try:
        dt = datetime.strptime(value, "%Y-%m-%dT%H:%M:%S")
    except ValueError:
        return None
    return int(dt.replace(tzinfo=timezone.utc).timestamp())


def _format_time(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def _parse_entry(line: str):
    fields = []
    for token in line.split():
        if "=" not in token:
            return None
        key, _, value = token.partition("=")
        fields.append((key, value))
    keys = dict(fields)
    if not {"node_id", "bw", "time"} <= set(keys):
        return None
    node_id = keys["node_id"]
    if not node_id.startswith("$"):
        return None
    node_id = node_id[1:].upper()
    if not is_fingerprint(node_id):
        return None
    try:
        bw = int(keys["bw"])
    except ValueError:
        return None
    end_time = _parse_time(keys["time"])
    if end_time is None or bw < 0:
        return None
    extras = tuple(
        (k, v) for k, v in fields if k not in ("node_id", "bw", "time")
    )
    return BandwidthEntry(node_id=node_id, bw=bw, end_time=end_time, extras=extras)


def parse_bandwidth_file(data, ba_id: str = "unknown") -> BandwidthFile:
    """Parse one bandwidth file from bytes or text.

    The first line must be a unix timestamp. Malformed entry lines are
    skipped and counted in skipped_lines; a file with no valid entry at all
    is rejected.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    lines = data.splitlines()
    if not lines:
        raise ParseError("empty input: missing header timestamp line")
    try:
        header_timestamp = int(lines[0].strip())
    except ValueError:
        raise ParseError(
            "first line must be a unix timestamp, got %r" % (lines[0][:60],)
        )

    headers = []
    skipped = 0
    idx = 1
    saw_terminator = False
    while idx < len(lines):
        line = lines[idx].strip()
        idx += 1
        if line == _TERMINATOR:
            saw_terminator = True
            break
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
            headers.append((key, value))
        else:
            skipped += 1
            log.warning("%s: unparsable header line %r", ba_id, line[:60])

    entries = []
    if saw_terminator:
        for line in lines[idx:]:
            line = line.strip()
            if not line:
                continue
            entry = _parse_entry(line)
            if entry is None:
                skipped += 1
                log.warning("%s: skipping malformed entry line %r", ba_id, line[:60])
            else:
                entries.append(entry)
    if not entries:
        raise ParseError("empty bandwidth file: no valid relay entries")
    entries.sort(key=lambda e: (e.end_time, e.node_id))
    return BandwidthFile(
        header_timestamp=header_timestamp,
        entries=tuple(entries),
        ba_id=ba_id,
        headers=tuple(headers),
        skipped_lines=skipped,
    )


def serialize_bandwidth_file(bwf: BandwidthFile) -> bytes:
    """Render the canonical wire form (drops unknown entry keys)."""
    out = [str(bwf.header_timestamp)]
    out.extend("%s=%s" % (k, v) for k, v in bwf.headers)
    out.append(_TERMINATOR)
    for entry in sorted(bwf.entries, key=lambda e: (e.end_time, e.node_id)):
        out.append(
            "bw=%d node_id=$%s time=%s"
            % (entry.bw, entry.node_id, _format_time(entry.end_time))
        )
    return ("\n".join(out) + "\n").encode("ascii")


def from_records(records, ba_id: str, base_time: int = 1650000000) -> BandwidthFile:
    """Build a bandwidth file from simulator records of one scanner.

    Simulation seconds are offset by base_time and floored to whole unix
    seconds, mirroring the 1 s resolution of real files. Failed measurements
    are omitted, like a scanner that publishes only successes.
    """
    entries = [
        BandwidthEntry(
            node_id=rec.relay_id,
            bw=int(round(rec.measured_bw)),
            end_time=base_time + int(rec.end_time),
        )
        for rec in records
        if rec.ba_id == ba_id and rec.ok
    ]
    if not entries:
        raise InsufficientDataError("no successful records for scanner %s" % ba_id)
    entries.sort(key=lambda e: (e.end_time, e.node_id))
    return BandwidthFile(
        header_timestamp=base_time, entries=tuple(entries), ba_id=ba_id
    )


# -- thread and duration inference -------------------------------------------


@dataclass(frozen=True)
class ThreadAssignment:
    assignment: tuple  # thread_id per entry, in end_time order
    num_threads: int
    durations: tuple   # same-thread gaps below MAX_SEQUENTIAL_GAP


def infer_threads(bwf: BandwidthFile, rng_seed=0,
                  min_gap: float = MIN_MEASUREMENT_GAP,
                  max_sequential_gap: float = MAX_SEQUENTIAL_GAP,
                  first_fit: bool = False) -> ThreadAssignment:
    """Assign entries to plausible scanner threads from end times alone.

    Walks entries in end-time order. A thread can accept an entry if its
    previous end lies at least min_gap earlier; the accepting thread is
    chosen uniformly at random (or lowest-index with first_fit=True, which
    realizes the minimal feasible thread count). Entries no thread can
    accept open a new thread. Same-thread gaps shorter than
    max_sequential_gap are collected as duration samples.
    """
    rng = random.Random(str(rng_seed))
    last_end = []  # per thread
    assignment = []
    durations = []
    for entry in bwf.entries:
        eligible = [
            t for t, end in enumerate(last_end)
            if entry.end_time - end >= min_gap
        ]
        if eligible:
            thread = eligible[0] if first_fit else rng.choice(eligible)
            gap = entry.end_time - last_end[thread]
            if gap < max_sequential_gap:
                durations.append(float(gap))
            last_end[thread] = entry.end_time
        else:
            thread = len(last_end)
            last_end.append(entry.end_time)
        assignment.append(thread)
    return ThreadAssignment(
        assignment=tuple(assignment),
        num_threads=len(last_end),
        durations=tuple(durations),
    )


@dataclass(frozen=True)
class DurationEstimate:
    median: float
    thread_count_histogram: dict
    sample_count: int
    iterations: int


def estimate_duration(files, iterations: int = 120, rng_seed=0,
                      min_gap: float = MIN_MEASUREMENT_GAP,
                      max_sequential_gap: float = MAX_SEQUENTIAL_GAP) -> DurationEstimate:
    """Median measurement duration over repeated random thread assignments.

    Each iteration re-runs infer_threads on every file with a derived
    sub-seed; duration samples pool across everything. The histogram counts
    inferred thread numbers per (iteration, file) pair.
    """
    if not files:
        raise ValueError("need at least one bandwidth file")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    samples = []
    histogram = {}
    for it in range(iterations):
        for fi, bwf in enumerate(files):
            ta = infer_threads(
                bwf, rng_seed="%s/it%d/file%d" % (rng_seed, it, fi),
                min_gap=min_gap, max_sequential_gap=max_sequential_gap,
            )
            samples.extend(ta.durations)
            histogram[ta.num_threads] = histogram.get(ta.num_threads, 0) + 1
    if not samples:
        raise InsufficientDataError("insufficient sequential measurements")
    return DurationEstimate(
        median=float(statistics.median(samples)),
        thread_count_histogram=histogram,
        sample_count=len(samples),
        iterations=iterations,
    )


@dataclass(frozen=True)
class Interval:
    """One measurement placed on the reconstructed timeline."""

    relay_id: str
    start: float
    end: float
    ba_id: str = "unknown"


@dataclass(frozen=True)
class TimelineEstimate:
    intervals: tuple
    assumed_duration: float = DEFAULT_ASSUMED_DURATION


def build_timeline(files, duration: float = DEFAULT_ASSUMED_DURATION) -> TimelineEstimate:
    """Give every measurement the interval [end - duration, end]."""
    if duration <= 0:
        raise ValueError("duration must be > 0")
    intervals = []
    for bwf in files:
        for entry in bwf.entries:
            intervals.append(Interval(
                relay_id=entry.node_id,
                start=entry.end_time - duration,
                end=float(entry.end_time),
                ba_id=bwf.ba_id,
            ))
    return TimelineEstimate(intervals=tuple(intervals), assumed_duration=duration)
