"""Operator command-line surface.

Subcommands bind the library into reproducible workflows: ``gen`` writes
synthetic traces and histograms, ``detect`` classifies a trace, ``sweep``
produces a threshold/false-positive curve, ``channel`` emits the leakage
table or a success grid, ``fleet`` runs the isolation simulator, and ``ks``
compares two histogram files.

Every command is pure given its inputs and ``--seed`` (default 1729, never
wall-clock entropy); artifacts are written atomically (temp file + rename)
and start with a ``# schema: <name>-v1`` header line.

Exit codes: 0 success, 1 input/usage error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import channel as channel_mod
from . import fleet as fleet_mod
from . import ks as ks_mod
from . import threshold as threshold_mod
from .profiles import AttackVariant, BenignProfile, generate_attack, generate_benign
from .trace import TraceError, emit_trace, fold_intervals, ingest_trace

DEFAULT_SEED = 1729

SWEEP_SCHEMA = "sweep-v1"
VERDICTS_SCHEMA = "verdicts-v1"
LEAKAGE_SCHEMA = "leakage-v1"
SUCCESS_GRID_SCHEMA = "success-grid-v1"
FLEET_SERIES_SCHEMA = "fleet-series-v1"
FLEET_REPORT_SCHEMA = "fleet-report-v1"

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INTERNAL = 2


class InputError(Exception):
    """Bad flags, files, or config; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise InputError(message)


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _csv_text(schema: str, header: str, rows) -> str:
    lines = [f"# schema: {schema}", header]
    lines.extend(rows)
    return "\n".join(lines) + "\n"


def _float(x: float) -> str:
    return repr(float(x))


# --- gen -------------------------------------------------------------------

def _cmd_gen(args) -> int:
    if args.profile == "benign":
        if args.amplification is not None or args.pages:
            raise InputError("--amplification/--pages only apply to attack profiles")
        snapshots = generate_benign(BenignProfile.default(), n=args.n, seed=args.seed)
        histogram = None
    else:
        snapshots, histogram = generate_attack(
            AttackVariant(args.profile),
            amplification=args.amplification,
            pages=args.pages,
            n=args.n,
            seed=args.seed,
        )
    buffer = []

    class _Sink:
        def write(self, chunk):
            buffer.append(chunk)

    emit_trace(snapshots, _Sink())
    _atomic_write(args.out, "".join(buffer))
    if args.histogram_out:
        if histogram is None:
            raise InputError("--histogram-out requires an attack profile")
        ks_mod.write_histogram_csv(histogram, args.histogram_out)
    return EXIT_OK


# --- detect ------------------------------------------------------------------

def _verdict_lines_threshold(trace_path, cfg, interval_ns):
    for avg in fold_intervals(ingest_trace(trace_path), interval_ns):
        verdict = threshold_mod.classify_threshold(avg, cfg)
        yield json.dumps(
            {
                "worker_id": avg.worker_id,
                "window_start_ns": avg.window_start_ns,
                "suspect": verdict.suspect,
                "triggering_metric": verdict.triggering_metric,
                "value": verdict.value,
                "threshold": verdict.threshold,
            },
            sort_keys=True,
        )


def _verdict_lines_ks(histogram_paths, template, alpha, k):
    for path in histogram_paths:
        hist = ks_mod.read_histogram_csv(path)
        verdict = ks_mod.classify_ks(hist, template, alpha=alpha, k=k)
        yield json.dumps(
            {
                "worker_id": Path(path).stem,
                "suspect": verdict.suspect,
                "d": verdict.ks.statistic,
                "p": verdict.ks.p_value,
                "n": verdict.ks.n,
                "m": verdict.ks.m,
                "k_effective": verdict.k_effective,
            },
            sort_keys=True,
        )


def _cmd_detect(args) -> int:
    if args.detector == "threshold":
        if not args.trace:
            raise InputError("--detector threshold requires --trace")
        cfg = threshold_mod.ThresholdConfig(
            branch_per_itlb_threshold=args.threshold,
            stl_reset_threshold=args.stl_threshold,
        )
        lines = list(_verdict_lines_threshold(args.trace, cfg, args.interval_ns))
    else:
        if not args.histograms:
            raise InputError("--detector ks requires --histograms")
        paths = sorted(Path(args.histograms).glob("*.csv"))
        if not paths:
            raise InputError(f"no histogram CSVs under {args.histograms}")
        template = (
            ks_mod.read_histogram_csv(args.template)
            if args.template
            else ks_mod.load_default_template()
        )
        lines = list(_verdict_lines_ks(paths, template, args.alpha, args.top_k))
    text = f"# schema: {VERDICTS_SCHEMA}\n" + "".join(line + "\n" for line in lines)
    _atomic_write(args.out, text)
    return EXIT_OK


# --- sweep -------------------------------------------------------------------

def _default_thresholds() -> list[float]:
    return [float(2**k) for k in range(7, 17)]  # 128 .. 65536


def _cmd_sweep(args) -> int:
    averages = list(fold_intervals(ingest_trace(args.trace), args.interval_ns))
    thresholds = (
        [float(t) for t in args.thresholds.split(",")]
        if args.thresholds
        else _default_thresholds()
    )
    try:
        points = threshold_mod.sweep_thresholds(averages, thresholds)
    except threshold_mod.EmptyPopulation as exc:
        raise InputError(str(exc)) from exc
    rows = (f"{_float(t)},{_float(fp)}" for t, fp in points)
    _atomic_write(args.out, _csv_text(SWEEP_SCHEMA, "threshold,fp_rate", rows))
    return EXIT_OK


# --- channel -------------------------------------------------------------------

def _cmd_channel(args) -> int:
    params = channel_mod.js_worker_params()
    if args.table:
        rows = (
            f"{est.amplification},{est.requests_per_bit},"
            f"{_float(est.script_runtime_s * 1000.0)},{_float(est.bits_per_hour)}"
            for est in channel_mod.leakage_table()
        )
        _atomic_write(
            args.out,
            _csv_text(
                LEAKAGE_SCHEMA,
                "amplification,required_requests,script_runtime_ms,leaked_bits_per_hour",
                rows,
            ),
        )
        return EXIT_OK

    amplifications = [int(a) for a in args.amplifications.split(",")]
    requests = [int(r) for r in args.requests.split(",")]
    grid = channel_mod.success_rate_curve(
        amplifications,
        requests,
        params,
        seed=args.seed,
        trials=args.trials,
        accuracy_samples=args.accuracy_samples,
    )
    rows = (
        f"{a},{n},{_float(grid[i, j])}"
        for i, a in enumerate(amplifications)
        for j, n in enumerate(requests)
    )
    _atomic_write(
        args.out,
        _csv_text(SUCCESS_GRID_SCHEMA, "amplification,requests,success_rate", rows),
    )
    return EXIT_OK


# --- fleet -------------------------------------------------------------------

def _fleet_config_from_json(data: dict, args) -> fleet_mod.FleetConfig:
    known = {
        "n_benign",
        "n_attack",
        "intervals",
        "executions_per_interval",
        "baseline_rps",
        "worker_mem_bytes",
        "subrequests_per_interval",
        "seed",
        "detector",
        "attack",
    }
    unknown = set(data) - known
    if unknown:
        raise InputError(f"unknown fleet config keys: {sorted(unknown)}")

    detector_data = dict(data.get("detector", {}))
    kind = detector_data.pop("kind", "threshold")
    threshold_value = detector_data.pop("branch_per_itlb", None)
    stl_value = detector_data.pop("stl_reset", None)
    alpha = detector_data.pop("alpha", ks_mod.DEFAULT_ALPHA)
    if detector_data:
        raise InputError(f"unknown detector config keys: {sorted(detector_data)}")

    # precedence: flag > file > default
    if args.threshold is not None:
        threshold_value = args.threshold
    threshold_kwargs = {}
    if threshold_value is not None:
        threshold_kwargs["branch_per_itlb_threshold"] = float(threshold_value)
    if stl_value is not None:
        threshold_kwargs["stl_reset_threshold"] = float(stl_value)
    detector = fleet_mod.DetectorSpec(
        kind=kind,
        threshold=threshold_mod.ThresholdConfig(**threshold_kwargs),
        alpha=float(alpha),
    )

    attack_data = dict(data.get("attack", {}))
    variant = AttackVariant(attack_data.pop("variant", "pht"))
    amplification = attack_data.pop("amplification", None)
    pages = attack_data.pop("pages", 0)
    if attack_data:
        raise InputError(f"unknown attack config keys: {sorted(attack_data)}")
    if pages:
        attack = fleet_mod.EvasiveWorkload(
            pages=int(pages), variant=variant, amplification=amplification
        )
    else:
        attack = fleet_mod.AttackWorkload(variant=variant, amplification=amplification)

    seed = data.get("seed", DEFAULT_SEED)
    if args.seed_given:
        seed = args.seed

    intervals = data.get("intervals", 6)
    if args.intervals is not None:
        intervals = args.intervals

    return fleet_mod.FleetConfig(
        n_benign=int(data.get("n_benign", 50)),
        n_attack=int(data.get("n_attack", 1)),
        intervals=int(intervals),
        executions_per_interval=int(data.get("executions_per_interval", 2)),
        detector=detector,
        attack=attack,
        baseline_rps=float(data.get("baseline_rps", 1000.0)),
        worker_mem_bytes=int(data.get("worker_mem_bytes", 1 << 20)),
        subrequests_per_interval=int(data.get("subrequests_per_interval", 0)),
        rng_seed=int(seed),
    )


def _cmd_fleet(args) -> int:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read fleet config: {exc}") from exc
        if not isinstance(data, dict):
            raise InputError("fleet config must be a JSON object")
    cfg = _fleet_config_from_json(data, args)
    report = fleet_mod.run_fleet(cfg)
    payload = {"schema": FLEET_REPORT_SCHEMA, **report.to_json_dict()}
    _atomic_write(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    if args.series_out:
        rows = (
            f"{p.t_sec},{_float(p.throughput_rps)},{_float(p.memory_bytes)},{p.isolated_count}"
            for p in report.series
        )
        _atomic_write(
            args.series_out,
            _csv_text(
                FLEET_SERIES_SCHEMA,
                "t_sec,throughput_rps,memory_bytes,isolated_count",
                rows,
            ),
        )
    return EXIT_OK


# --- ks -------------------------------------------------------------------

def _cmd_ks(args) -> int:
    left = ks_mod.read_histogram_csv(args.subject)
    right = ks_mod.read_histogram_csv(args.reference)
    subject = ks_mod.top_branches(left, args.top_k)
    reference = ks_mod.top_branches(right, args.top_k)
    mode = "exact" if args.exact else "asymptotic"
    result = ks_mod.ks_two_sample(subject, reference, mode=mode)
    payload = {
        "d": result.statistic,
        "p": result.p_value,
        "n": result.n,
        "m": result.m,
        "suspect": result.p_value >= args.alpha,
        "alpha": args.alpha,
    }
    text = json.dumps(payload, sort_keys=True) + "\n"
    if args.out:
        _atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="spectreguard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic trace (and histogram)")
    gen.add_argument("--profile", required=True,
                     choices=["benign", "pht", "btb", "rsb", "stl"])
    gen.add_argument("--n", type=int, default=1000)
    gen.add_argument("--amplification", type=int, default=None)
    gen.add_argument("--pages", type=int, default=0)
    gen.add_argument("--seed", type=int, default=DEFAULT_SEED)
    gen.add_argument("--out", required=True)
    gen.add_argument("--histogram-out", default=None)

    detect = sub.add_parser("detect", help="classify a trace or histogram set")
    detect.add_argument("--detector", choices=["threshold", "ks"], default="threshold")
    detect.add_argument("--trace", default=None)
    detect.add_argument("--histograms", default=None,
                        help="directory of per-worker histogram CSVs (ks detector)")
    detect.add_argument("--template", default=None)
    detect.add_argument("--alpha", type=float, default=ks_mod.DEFAULT_ALPHA)
    detect.add_argument("--top-k", type=int, default=ks_mod.DEFAULT_TOP_K)
    detect.add_argument("--threshold", type=float,
                        default=threshold_mod.BRANCH_THRESHOLD_DEFAULT)
    detect.add_argument("--stl-threshold", type=float,
                        default=threshold_mod.STL_THRESHOLD_DEFAULT)
    detect.add_argument("--interval-ns", type=int, default=1_000_000_000)
    detect.add_argument("--out", required=True)

    sweep = sub.add_parser("sweep", help="threshold/false-positive curve")
    sweep.add_argument("--trace", required=True)
    sweep.add_argument("--thresholds", default=None, help="comma-separated, ascending")
    sweep.add_argument("--interval-ns", type=int, default=1_000_000_000)
    sweep.add_argument("--out", required=True)

    channel = sub.add_parser("channel", help="leakage table or success grid")
    channel.add_argument("--table", action="store_true")
    channel.add_argument("--amplifications", default="1,10,100,1000")
    channel.add_argument("--requests", default="1,10,100,1000,10000")
    channel.add_argument("--trials", type=int, default=1000)
    channel.add_argument("--accuracy-samples", type=int, default=2_000_000)
    channel.add_argument("--seed", type=int, default=DEFAULT_SEED)
    channel.add_argument("--out", required=True)

    fleet = sub.add_parser("fleet", help="run the fleet simulator")
    fleet.add_argument("--config", default=None, help="JSON config file")
    fleet.add_argument("--seed", type=int, default=DEFAULT_SEED)
    fleet.add_argument("--threshold", type=float, default=None)
    fleet.add_argument("--intervals", type=int, default=None)
    fleet.add_argument("--out", required=True)
    fleet.add_argument("--series-out", default=None)

    ks = sub.add_parser("ks", help="compare two histogram CSVs")
    ks.add_argument("subject")
    ks.add_argument("reference")
    ks.add_argument("--alpha", type=float, default=ks_mod.DEFAULT_ALPHA)
    ks.add_argument("--top-k", type=int, default=ks_mod.DEFAULT_TOP_K)
    ks.add_argument("--exact", action="store_true")
    ks.add_argument("--out", default=None)

    return parser


_HANDLERS = {
    "gen": _cmd_gen,
    "detect": _cmd_detect,
    "sweep": _cmd_sweep,
    "channel": _cmd_channel,
    "fleet": _cmd_fleet,
    "ks": _cmd_ks,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args.seed_given = any(a == "--seed" or a.startswith("--seed=") for a in argv)
        return _HANDLERS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TraceError, ks_mod.HistogramError, threshold_mod.UnreachableTarget,
            channel_mod.ChannelError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except fleet_mod.FleetError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except AssertionError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
