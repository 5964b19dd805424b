"""Hardware-counter trace model.

A trace is a stream of per-script-execution counter snapshots, one JSON object
per line.  Detectors never look at raw counts: every event is first normalized
by the number of iTLB accesses (which tracks code footprint, so tight attack
loops stand out against large benign programs) and then smoothed into tumbling
1-second interval averages.

Timestamps are integer nanoseconds since the trace epoch so traces stay
platform independent and diff-able.  Windows are half-open
``[k*interval, (k+1)*interval)`` aligned to the epoch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator, TextIO

NS_PER_SECOND = 1_000_000_000
DEFAULT_INTERVAL_NS = NS_PER_SECOND

TRACE_SCHEMA = "trace-v1"


class TraceError(Exception):
    """Base class for trace-model failures."""


class InvariantViolation(TraceError):
    """A snapshot field violates a counter invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class ZeroDenominator(TraceError):
    """Normalization is undefined: the snapshot has zero iTLB accesses.

    Callers must discard the sample; treating it as zero would invent data.
    """


class OutOfOrderTimestamp(TraceError):
    """A worker's snapshots regressed in time; the trace is corrupt."""


class ParseError(TraceError):
    """A trace line is not a valid record."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


# Wire keys of the JSONL trace format, in canonical emission order.
# The format is shared by real-hardware exporters and the synthetic
# generators in the fleet simulator; unknown keys are rejected.
_WIRE_KEYS = (
    ("worker_id", "worker_id"),
    ("ts_ns", "timestamp_ns"),
    ("itlb", "itlb_accesses"),
    ("br_insn", "branch_instructions"),
    ("br_miss", "branch_misses"),
    ("llc_ref", "cache_references"),
    ("llc_miss", "cache_misses"),
    ("l1d_acc", "l1d_read_accesses"),
    ("l1d_miss", "l1d_read_misses"),
    ("md_reset", "mem_disambiguation_resets"),
)
_WIRE_TO_FIELD = dict(_WIRE_KEYS)


@dataclass(frozen=True)
class CounterSnapshot:
    """One per-script-execution reading of the monitored hardware events."""

    worker_id: str
    timestamp_ns: int
    itlb_accesses: int
    branch_instructions: int
    branch_misses: int
    cache_references: int
    cache_misses: int
    l1d_read_accesses: int
    l1d_read_misses: int
    mem_disambiguation_resets: int

    def __post_init__(self):
        for f in fields(self):
            if f.name == "worker_id":
                continue
            value = getattr(self, f.name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise InvariantViolation(f.name, f"must be an integer, got {value!r}")
            if f.name != "timestamp_ns" and value < 0:
                raise InvariantViolation(f.name, f"count must be >= 0, got {value}")
        if self.branch_misses > self.branch_instructions:
            raise InvariantViolation(
                "branch_misses", "exceeds branch_instructions"
            )
        if self.cache_misses > self.cache_references:
            raise InvariantViolation("cache_misses", "exceeds cache_references")
        if self.l1d_read_misses > self.l1d_read_accesses:
            raise InvariantViolation("l1d_read_misses", "exceeds l1d_read_accesses")

    def to_wire(self) -> dict:
        return {wire: getattr(self, field) for wire, field in _WIRE_KEYS}


# Counters carried through normalization; iTLB itself drops out (it would
# always normalize to 1).
METRIC_FIELDS = (
    "branch_instructions",
    "branch_misses",
    "cache_references",
    "cache_misses",
    "l1d_read_accesses",
    "l1d_read_misses",
    "mem_disambiguation_resets",
)


@dataclass(frozen=True)
class NormalizedMetrics:
    """Per-iTLB-access counter values (dimensionless)."""

    branch_instructions: float
    branch_misses: float
    cache_references: float
    cache_misses: float
    l1d_read_accesses: float
    l1d_read_misses: float
    mem_disambiguation_resets: float


@dataclass(frozen=True)
class IntervalAverage:
    """Arithmetic mean of normalized metrics over one tumbling window."""

    worker_id: str
    window_start_ns: int
    mean_metrics: NormalizedMetrics
    sample_count: int


def normalize(snapshot: CounterSnapshot) -> NormalizedMetrics:
    """Divide every counter by the snapshot's iTLB accesses.

    Raises ZeroDenominator when ``itlb_accesses == 0``; such samples carry no
    usable signal and must be discarded by the caller.
    """
    denom = snapshot.itlb_accesses
    if denom == 0:
        raise ZeroDenominator(f"snapshot of {snapshot.worker_id!r} has zero iTLB accesses")
    return NormalizedMetrics(
        **{name: getattr(snapshot, name) / denom for name in METRIC_FIELDS}
    )


class IntervalFolder:
    """Folds a per-worker snapshot stream into tumbling interval averages.

    Snapshots must arrive in nondecreasing timestamp order *per worker*;
    streams of different workers may interleave freely.  Samples with zero
    iTLB accesses are dropped and counted in ``dropped_zero_itlb``.

    Means use ``math.fsum`` so the result is invariant under permutation of
    samples within a window.
    """

    def __init__(self, interval_ns: int = DEFAULT_INTERVAL_NS):
        if interval_ns <= 0:
            raise ValueError("interval_ns must be positive")
        self.interval_ns = interval_ns
        self.dropped_zero_itlb = 0
        # worker -> (window_start_ns, last_ts_ns, [NormalizedMetrics, ...])
        self._open: dict[str, tuple[int, int, list[NormalizedMetrics]]] = {}

    def push(self, snapshot: CounterSnapshot) -> list[IntervalAverage]:
        """Feed one snapshot; returns windows completed by this event."""
        worker = snapshot.worker_id
        ts = snapshot.timestamp_ns
        window = (ts // self.interval_ns) * self.interval_ns

        completed: list[IntervalAverage] = []
        state = self._open.get(worker)
        if state is not None:
            open_window, last_ts, samples = state
            if ts < last_ts:
                raise OutOfOrderTimestamp(
                    f"worker {worker!r}: timestamp {ts} after {last_ts}"
                )
            if window > open_window:
                if samples:
                    completed.append(self._emit(worker, open_window, samples))
                state = None

        if snapshot.itlb_accesses == 0:
            self.dropped_zero_itlb += 1
            if state is None:
                # keep the timestamp watermark even for dropped samples
                self._open[worker] = (window, ts, [])
            else:
                self._open[worker] = (state[0], ts, state[2])
            return completed

        metrics = normalize(snapshot)
        if state is None:
            self._open[worker] = (window, ts, [metrics])
        else:
            state[2].append(metrics)
            self._open[worker] = (state[0], ts, state[2])
        return completed

    def flush(self) -> list[IntervalAverage]:
        """Close every open window, ordered by (window_start, worker_id)."""
        out = [
            self._emit(worker, window, samples)
            for worker, (window, _ts, samples) in self._open.items()
            if samples
        ]
        self._open.clear()
        out.sort(key=lambda avg: (avg.window_start_ns, avg.worker_id))
        return out

    def _emit(self, worker: str, window: int, samples: list[NormalizedMetrics]) -> IntervalAverage:
        count = len(samples)
        means = {
            name: math.fsum(getattr(m, name) for m in samples) / count
            for name in METRIC_FIELDS
        }
        return IntervalAverage(
            worker_id=worker,
            window_start_ns=window,
            mean_metrics=NormalizedMetrics(**means),
            sample_count=count,
        )


def fold_intervals(
    snapshots: Iterable[CounterSnapshot], interval_ns: int = DEFAULT_INTERVAL_NS
) -> Iterator[IntervalAverage]:
    """Stream interval averages for a snapshot stream (see IntervalFolder)."""
    folder = IntervalFolder(interval_ns)
    for snapshot in snapshots:
        yield from folder.push(snapshot)
    yield from folder.flush()


def _parse_line(line_number: int, line: str) -> CounterSnapshot:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(line_number, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise ParseError(line_number, "record is not a JSON object")

    expected = set(_WIRE_TO_FIELD)
    got = set(record)
    if got != expected:
        unknown = sorted(got - expected)
        missing = sorted(expected - got)
        parts = []
        if unknown:
            parts.append(f"unknown keys {unknown}")
        if missing:
            parts.append(f"missing keys {missing}")
        raise ParseError(line_number, "; ".join(parts))

    if not isinstance(record["worker_id"], str):
        raise ParseError(line_number, "worker_id must be a string")
    for wire, field in _WIRE_KEYS:
        if wire == "worker_id":
            continue
        value = record[wire]
        if not isinstance(value, int) or isinstance(value, bool):
            raise ParseError(line_number, f"{wire} must be an integer")

    return CounterSnapshot(**{field: record[wire] for wire, field in _WIRE_KEYS})


def ingest_trace(path: str | Path) -> Iterator[CounterSnapshot]:
    """Yield validated snapshots from a JSONL trace file, in file order.

    Blank lines and ``#`` comment lines (used for schema headers) are skipped.
    Raises ParseError with the offending line number, or InvariantViolation
    with the offending field name.
    """
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield _parse_line(line_number, stripped)


def emit_trace(
    snapshots: Iterable[CounterSnapshot],
    destination: str | Path | TextIO,
    header: bool = True,
) -> int:
    """Write snapshots as canonical JSONL; returns the number of records.

    ``ingest_trace(emit_trace(...))`` round-trips valid snapshots exactly.
    """

    def _write(handle: TextIO) -> int:
        count = 0
        if header:
            handle.write(f"# schema: {TRACE_SCHEMA}\n")
        for snapshot in snapshots:
            handle.write(json.dumps(snapshot.to_wire(), separators=(",", ":")))
            handle.write("\n")
            count += 1
        return count

    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8") as handle:
            return _write(handle)
    return _write(destination)
