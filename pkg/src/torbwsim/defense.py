"""Co-measurement countermeasure analytics.

Relays backed by a shared pot betray themselves under simultaneous
measurement: each one's measured bandwidth drops by roughly the split
factor, while genuinely independent relays measure the same alone or
together. These helpers score that drop from historical records, group
suspects, schedule active co-probes for the worst pairs, and turn a probe
outcome into a shared/independent verdict.

Scoring prefers records that carry true start times; records without one
fall back to an assumed duration ending at end_time, matching the timeline
reconstruction used elsewhere.
"""

import statistics
from dataclasses import dataclass

from .bwfile import DEFAULT_ASSUMED_DURATION

DEFAULT_THRESHOLD = 0.3
SHARED_BAND_FACTOR = 1.25
INDEPENDENT_BAND_FACTOR = 0.8
DEFAULT_PROBE_SPACING = 120.0


@dataclass(frozen=True)
class SuspicionReport:
    scores: dict            # relay -> max symmetric pair drop, in [0, 1]
    pair_drops: dict        # (r1, r2) sorted tuple -> symmetric drop
    groups: tuple           # connected components at threshold, size >= 2
    threshold: float
    insufficient_data: tuple  # relays with no solo baseline


@dataclass(frozen=True)
class ProbePlan:
    relay_a: str
    relay_b: str
    scheduled_time: float
    expected_drop: float


@dataclass(frozen=True)
class VerificationVerdict:
    verdict: str            # shared | independent | inconclusive
    co_sum: float
    shared_bound: float
    independent_bound: float
    sample_size: int = 1
    caveat: str = "single probe pair; repeat probes before acting"


def _interval_of(rec, assumed_duration):
    if rec.start_time is not None:
        return rec.start_time, rec.end_time
    return rec.end_time - assumed_duration, rec.end_time


def _overlapping_partners(items):
    """items: (start, end, relay, bw) sorted by start.

    Returns per-item sets of (index, relay, overlap length) for every other
    item whose interval intersects, including zero-length touching.
    """
    partners = [set() for _ in items]
    for i, (start_i, end_i, relay_i, _bw) in enumerate(items):
        for j in range(i + 1, len(items)):
            start_j, end_j, relay_j, _bwj = items[j]
            if start_j > end_i:
                break
            overlap = min(end_i, end_j) - start_j
            partners[i].add((j, relay_j, overlap))
            partners[j].add((i, relay_i, overlap))
    return partners


def score_suspects(records, timeline=None, threshold: float = DEFAULT_THRESHOLD,
                   relay_ids=None,
                   min_overlap_fraction: float = 0.5) -> SuspicionReport:
    """Score relays by bandwidth drop under co-measurement.

    drop(r1|r2) = 1 - mean(bw of r1 while co-measured with r2)
                    / mean(bw of r1 measured apart from r2), clamped to
    [0, 1]. The baseline is pair-relative: a busy multi-thread scanner
    leaves almost no measurement globally alone, but overlap with relays on
    unrelated hosts does not move r1's number, so "apart" means every r1
    record with zero overlap against r2. A record only counts as co-measured
    when the overlap covers at least min_overlap_fraction of it; a brief
    graze at the edge splits capacity for a second or two and barely moves
    the mean, so grazes are left out of both sides. A pair's symmetric drop
    is the mean of both directions and needs co samples plus a baseline on
    each side. A relay's score is its worst symmetric drop; relays that are
    co-measured yet never observed apart from any partner have no usable
    baseline and are reported separately, excluded from grouping.
    """
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    assumed = timeline.assumed_duration if timeline else DEFAULT_ASSUMED_DURATION
    items = []
    for rec in records:
        if not rec.ok:
            continue
        if relay_ids is not None and rec.relay_id not in relay_ids:
            continue
        start, end = _interval_of(rec, assumed)
        items.append((start, end, rec.relay_id, rec.measured_bw))
    relays = sorted({relay for _s, _e, relay, _b in items})
    if len(relays) < 2:
        raise ValueError("need records for at least 2 relays")
    items.sort(key=lambda t: (t[0], t[1], t[2]))
    partners = _overlapping_partners(items)

    records_of = {r: [] for r in relays}
    for i, (_start, _end, relay, _bw) in enumerate(items):
        records_of[relay].append(i)
    co_idx = {}       # (relay, partner) -> indices of relay's deep co records
    touched_idx = {}  # (relay, partner) -> indices with any overlap at all
    for i, (start, end, relay, _bw) in enumerate(items):
        duration = end - start
        best = {}
        for _j, rel, overlap in partners[i]:
            if rel != relay:
                best[rel] = max(best.get(rel, 0.0), overlap)
        for rel, overlap in best.items():
            touched_idx.setdefault((relay, rel), set()).add(i)
            if duration <= 0 or overlap / duration >= min_overlap_fraction:
                co_idx.setdefault((relay, rel), set()).add(i)

    def directional(r1, r2):
        co = co_idx.get((r1, r2), set())
        touched = touched_idx.get((r1, r2), set())
        solo = [i for i in records_of[r1] if i not in touched]
        if not co or not solo:
            return None
        co_mean = statistics.fmean(items[i][3] for i in co)
        solo_mean = statistics.fmean(items[i][3] for i in solo)
        if solo_mean <= 0:
            return None
        return min(1.0, max(0.0, 1.0 - co_mean / solo_mean))

    pair_drops = {}
    undecided = set()  # pairs with co samples but a missing baseline
    for (r1, r2) in co_idx:
        if r1 > r2:
            continue
        d12 = directional(r1, r2)
        d21 = directional(r2, r1)
        if d12 is None or d21 is None:
            undecided.add((r1, r2))
            continue
        pair_drops[(r1, r2)] = (d12 + d21) / 2.0

    has_pair = {r for pair in pair_drops for r in pair}
    insufficient = tuple(
        r for r in relays
        if r not in has_pair and any(r in pair for pair in undecided)
    )
    scores = {r: 0.0 for r in relays if r not in insufficient}
    for (r1, r2), drop in pair_drops.items():
        scores[r1] = max(scores[r1], drop)
        scores[r2] = max(scores[r2], drop)

    parent = {r: r for r in scores}

    def find(r):
        while parent[r] != r:
            parent[r] = parent[parent[r]]
            r = parent[r]
        return r

    for (r1, r2), drop in pair_drops.items():
        if drop >= threshold:
            parent[find(r1)] = find(r2)
    components = {}
    for r in scores:
        components.setdefault(find(r), []).append(r)
    groups = tuple(
        tuple(sorted(members))
        for _root, members in sorted(components.items())
        if len(members) >= 2
    )
    return SuspicionReport(
        scores=scores,
        pair_drops=pair_drops,
        groups=groups,
        threshold=threshold,
        insufficient_data=insufficient,
    )


def plan_probes(report: SuspicionReport, budget: int, start_time: float = 0.0,
                spacing: float = DEFAULT_PROBE_SPACING) -> list:
    """Schedule one simultaneous probe per suspect pair, worst drop first.

    Only pairs at or above the report threshold are probed. Ties break on
    node ids so plans are reproducible.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    ranked = sorted(
        (
            (pair, drop) for pair, drop in report.pair_drops.items()
            if drop >= report.threshold
        ),
        key=lambda item: (-item[1], item[0]),
    )
    return [
        ProbePlan(
            relay_a=pair[0],
            relay_b=pair[1],
            scheduled_time=start_time + i * spacing,
            expected_drop=drop,
        )
        for i, (pair, drop) in enumerate(ranked[:budget])
    ]


def verify_shared_resource(probe_a, probe_b, solo_baselines: dict,
                           shared_factor: float = SHARED_BAND_FACTOR,
                           independent_factor: float = INDEPENDENT_BAND_FACTOR) -> VerificationVerdict:
    """Judge one simultaneous probe pair against solo baselines.

    shared: the pair together moved no more than shared_factor times the
    better solo rate, i.e. they appear to drain one pot. independent: the
    pair together kept at least independent_factor of the sum of solo
    rates. The bands can both match for skewed baselines; shared takes
    precedence, then independent, else inconclusive.
    """
    if probe_a.start_time is None or probe_b.start_time is None:
        raise ValueError("probe records must carry start times")
    overlap = min(probe_a.end_time, probe_b.end_time) - max(
        probe_a.start_time, probe_b.start_time
    )
    if overlap < 0.5 * probe_a.duration or overlap < 0.5 * probe_b.duration:
        raise ValueError("probes must overlap by at least half their duration")

    def _invalid(reason):
        return VerificationVerdict(
            verdict="inconclusive", co_sum=0.0, shared_bound=0.0,
            independent_bound=0.0, caveat=reason,
        )

    if not (probe_a.ok and probe_b.ok):
        return _invalid("probe measurement failed")
    solo_a = solo_baselines.get(probe_a.relay_id)
    solo_b = solo_baselines.get(probe_b.relay_id)
    if not solo_a or not solo_b or solo_a <= 0 or solo_b <= 0:
        return _invalid("missing solo baseline")

    co_sum = probe_a.measured_bw + probe_b.measured_bw
    shared_bound = shared_factor * max(solo_a, solo_b)
    independent_bound = independent_factor * (solo_a + solo_b)
    if co_sum <= shared_bound:
        verdict = "shared"
    elif co_sum >= independent_bound:
        verdict = "independent"
    else:
        verdict = "inconclusive"
    return VerificationVerdict(
        verdict=verdict,
        co_sum=co_sum,
        shared_bound=shared_bound,
        independent_bound=independent_bound,
    )


def report_to_dict(report: SuspicionReport) -> dict:
    """JSON-friendly rendering of a SuspicionReport."""
    return {
        "threshold": report.threshold,
        "scores": dict(sorted(report.scores.items())),
        "pair_drops": {
            "%s,%s" % pair: drop
            for pair, drop in sorted(report.pair_drops.items())
        },
        "groups": [list(g) for g in report.groups],
        "insufficient_data": list(report.insufficient_data),
    }


def probe_rows(plans) -> list:
    """CSV rows for a probe plan, header first."""
    rows = [("relay_a", "relay_b", "scheduled_time", "expected_drop")]
    rows.extend(
        (p.relay_a, p.relay_b, "%.3f" % p.scheduled_time, "%.6f" % p.expected_drop)
        for p in plans
    )
    return rows
