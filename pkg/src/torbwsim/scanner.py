"""SBWS-style scanner model.

A scanner measures one relay at a time over a two-hop circuit (target +
exit at least twice as fast). It adapts a download size until a single
download lands in the 5-10 s band, then runs five timed downloads; the
measured bandwidth is the mean per-download throughput. With five in-band
downloads a measurement can never finish in under 25 seconds, which is the
constraint the timeline-inference code exploits later.
"""

import logging
import random
from dataclasses import dataclass
from typing import Callable

from .core import MeasurementRecord
from .units import GIB, MIB

log = logging.getLogger(__name__)

MAX_ADAPTATION_STEPS = 20


@dataclass(frozen=True)
class ScannerConfig:
    ba_id: str = "ba0"
    threads: int = 4
    min_duration_per_download: float = 5.0
    max_duration_per_download: float = 10.0
    downloads_per_measurement: int = 5
    range_increment: int = 16 * MIB
    max_file: int = GIB
    exit_speed_factor: float = 2.0
    round_budget: float = 3600.0

    def __post_init__(self):
        if not 1 <= self.threads <= 8:
            raise ValueError("threads must be in [1, 8], got %d" % self.threads)
        if self.min_duration_per_download >= self.max_duration_per_download:
            raise ValueError("min download duration must be below max")
        if self.downloads_per_measurement < 1:
            raise ValueError("downloads_per_measurement must be >= 1")


@dataclass(frozen=True)
class MeasurementPlan:
    target: str
    exit: str
    order: int = 0


def plan_round(cfg: ScannerConfig, relays, rng_seed) -> tuple:
    """Plan one measurement round: every non-exit relay once, shuffled order.

    Exits are drawn uniformly from the relays satisfying the speed rule
    (exit advertised bandwidth >= exit_speed_factor times the target's).
    Targets with no usable exit are skipped with a warning.
    """
    rng = random.Random("%s/plan" % (rng_seed,))
    exits = sorted(
        (r for r in relays if r.role == "exit"), key=lambda r: r.relay_id
    )
    targets = sorted(
        (r for r in relays if r.role != "exit"), key=lambda r: r.relay_id
    )
    plans = []
    for target in targets:
        candidates = [
            e for e in exits
            if e.advertised_bw >= cfg.exit_speed_factor * target.advertised_bw
        ]
        if not candidates:
            log.warning("%s: no exit at least %.1fx faster than target %s, skipping",
                        cfg.ba_id, cfg.exit_speed_factor, target.relay_id)
            continue
        plans.append((target.relay_id, rng.choice(candidates).relay_id))
    rng.shuffle(plans)
    if targets and not plans:
        log.warning("%s: round is empty, no target has a qualifying exit", cfg.ba_id)
    return tuple(
        MeasurementPlan(target=t, exit=e, order=i)
        for i, (t, e) in enumerate(plans)
    )


def adapt_range(size: int, observed_duration: float, cfg: ScannerConfig) -> int:
    """Double below the band, halve above it, clamp to legal increment bounds."""
    if observed_duration < cfg.min_duration_per_download:
        size *= 2
    elif observed_duration > cfg.max_duration_per_download:
        size //= 2
    size = max(cfg.range_increment, min(cfg.max_file, size))
    # round up to the next increment multiple
    remainder = size % cfg.range_increment
    if remainder:
        size += cfg.range_increment - remainder
    return size


def measurement_steps(cfg: ScannerConfig):
    """Generator protocol driving one measurement, one download at a time.

    Yields ("adapt" | "timed", size_bytes); the caller sends back the
    observed duration in seconds (or None for a dead path). Returns a dict
    with the per-download sizes/durations of the timed phase, total bytes
    moved, download count, and an ok flag.
    """
    size = cfg.range_increment
    bytes_total = 0
    downloads = 0

    in_band = False
    for _ in range(MAX_ADAPTATION_STEPS):
        duration = yield ("adapt", size)
        if duration is None or duration <= 0:
            return {"ok": False, "sizes": [], "durations": [],
                    "bytes_total": bytes_total, "downloads": downloads}
        bytes_total += size
        downloads += 1
        if cfg.min_duration_per_download <= duration <= cfg.max_duration_per_download:
            in_band = True
            break
        size = adapt_range(size, duration, cfg)
    if not in_band:
        return {"ok": False, "sizes": [], "durations": [],
                "bytes_total": bytes_total, "downloads": downloads}

    sizes, durations = [], []
    for _ in range(cfg.downloads_per_measurement):
        duration = yield ("timed", size)
        if duration is None or duration <= 0:
            return {"ok": False, "sizes": sizes, "durations": durations,
                    "bytes_total": bytes_total, "downloads": downloads}
        bytes_total += size
        downloads += 1
        sizes.append(size)
        durations.append(duration)
    return {"ok": True, "sizes": sizes, "durations": durations,
            "bytes_total": bytes_total, "downloads": downloads}


def _finish(outcome, plan, ba_id, thread_id, start, end):
    if outcome["ok"]:
        throughputs = [
            s / d for s, d in zip(outcome["sizes"], outcome["durations"])
        ]
        measured = sum(throughputs) / len(throughputs)
    else:
        measured = 0.0
    return MeasurementRecord(
        relay_id=plan.target,
        ba_id=ba_id,
        thread_id=thread_id,
        start_time=start,
        end_time=end,
        measured_bw=measured,
        bytes_total=outcome["bytes_total"],
        downloads=outcome["downloads"],
        ok=outcome["ok"],
    )


def execute_measurement(plan: MeasurementPlan,
                        bandwidth_fn: Callable[[str, float], float],
                        clock: float,
                        cfg: ScannerConfig,
                        thread_id: int = 0) -> MeasurementRecord:
    """Run one full measurement against a bandwidth callback.

    bandwidth_fn(relay_id, time) gives the available bytes/second on that
    relay at that instant; the path rate is the minimum over target and
    exit, sampled at each download's start. A zero or negative rate marks
    the measurement failed with whatever partial data exists.
    """
    gen = measurement_steps(cfg)
    now = clock
    step = gen.send(None)
    while True:
        _phase, size = step
        rate = min(bandwidth_fn(plan.target, now), bandwidth_fn(plan.exit, now))
        duration = (size / rate) if rate > 0 else None
        if duration is not None:
            now += duration
        try:
            step = gen.send(duration)
        except StopIteration as stop:
            outcome = stop.value
            break
    if now == clock:
        now = clock + 1e-9  # dead path on the first probe; keep end > start
    return _finish(outcome, plan, cfg.ba_id, thread_id, clock, now)
