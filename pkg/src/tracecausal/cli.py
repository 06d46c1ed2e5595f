"""``trace-causal`` command line: run, generate, bench, causal, paracoords."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .causal import CausalParams, analyze, records_from_matrix
from .config import ConfigError, resolve_config
from .emit import EmptyPlotError, ParallelCoordsSpec, emit_dot, emit_paracoords_json, paracoords_rows, render_paracoords_svg
from .metrics import MatchPolicy, _match_arrays
from .runner import EXIT_CONFIG, EXIT_OK, bench, run_all
from .synth import ScmSpec, generate_trace
from .trace_model import read_trace_table


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("counts must be positive")
    return vals


def _add_run_flags(p: argparse.ArgumentParser, counts: bool = True) -> None:
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--input", action="append", dest="inputs", metavar="PATH",
                   help="trace file (repeatable); format from extension")
    p.add_argument("--bin-width-ms", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--target", choices=["perf_variation", "memory_stall"])
    p.add_argument("--scope", choices=["per_kernel", "whole_dataset"])
    if counts:
        p.add_argument("--ranks", type=int, dest="world_size")
        p.add_argument("--workers", type=int, dest="worker_count")
    p.add_argument("--transport", choices=["inproc", "process"])
    p.add_argument("--time-unit", choices=["ns", "ms"])
    p.add_argument("--key-mode", choices=["name_only", "name_plus_launch"])
    p.add_argument("--causal-records", choices=["top_k", "all"])
    p.add_argument("--bin-metric", choices=["target", "duration"],
                   help="values summarised per bin and ranked (default: the target)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-cond", type=int)
    p.add_argument("--out", dest="output_dir")


_RUN_KEYS = ("inputs", "bin_width_ms", "k", "target", "scope", "world_size", "worker_count", "transport",
             "time_unit", "key_mode", "causal_records", "bin_metric", "alpha", "max_cond", "output_dir")


def _config_from(args):
    overrides = {k: getattr(args, k, None) for k in _RUN_KEYS}
    if overrides["inputs"] is not None:
        overrides["inputs"] = list(overrides["inputs"])
    return resolve_config(args.config, overrides)


def cmd_run(args) -> int:
    cfg = _config_from(args)
    code, outcomes = run_all(cfg)
    for o in outcomes:
        print(f"{o.name}\t{o.status}\t{o.checksum[:16]}\t{o.out_dir}")
    return code


def cmd_generate(args) -> int:
    scm = ScmSpec.load(args.scm) if args.scm else None
    path = generate_trace(args.out, args.events, args.kernels, args.seconds, args.seed, scm, args.rank)
    print(path)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config_from(args)
    rows = bench(cfg, args.worker_counts, args.rank_counts, args.repeats)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = ["world_size", "worker_count", "repeats", "median_seconds", "checksum"]
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "bench.json").write_text(json.dumps(rows, indent=2) + "\n")
    for r in rows:
        print(f"ranks={r['world_size']} workers={r['worker_count']} "
              f"median={r['median_seconds']:.3f}s checksum={r['checksum'][:16]}")
    return EXIT_OK


def cmd_causal(args) -> int:
    with open(args.matrix, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(x) for x in row] for row in reader if row], dtype=float)
    if args.target_column not in header:
        raise ConfigError(f"target column {args.target_column!r} not in {args.matrix}")
    t = header.index(args.target_column)
    cols = [c for i, c in enumerate(header) if i != t]
    feats = np.delete(data, t, axis=1) if data.size else np.zeros((0, len(cols)))
    target = data[:, t] if data.size else np.zeros(0)
    recs = records_from_matrix(cols, feats, target, args.target_column)
    result = analyze(recs, "whole_dataset", CausalParams(alpha=args.alpha, max_cond=args.max_cond))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for _, g in result.graphs:
        (out / "causal_whole_dataset.dot").write_text(emit_dot(g))
        (out / "causal_whole_dataset.json").write_text(g.to_json() + "\n")
    (out / "report.json").write_text(json.dumps(result.report(), indent=2, sort_keys=True) + "\n")
    if not result.graphs:
        print("no graph: " + "; ".join(s["reason"] for s in result.skipped), file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_paracoords(args) -> int:
    table = read_trace_table(args.input, args.format, time_unit=args.time_unit)
    k, m = table.kernels, table.memcpys
    rep = _match_arrays(k.start, k.end, k.rank, k.corr, k.has_corr,
                        m.start, m.end, m.rank, m.corr, m.has_corr, MatchPolicy())
    rows = []
    if rep.pairs:
        pairs = np.array(rep.pairs, dtype=np.int64)
        ki, mi = pairs[:, 0], pairs[:, 1]
        if args.limit:
            ki, mi = ki[:args.limit], mi[:args.limit]
        kdur = k.end[ki] - k.start[ki]
        t0 = int(min(k.start.min(), m.start.min()))
        stall = np.abs(kdur - (m.end[mi] - m.start[mi]))
        rows = paracoords_rows(k.name[ki], k.start[ki], kdur, m.kind[mi], m.nbytes[mi], stall, t0)
    spec = ParallelCoordsSpec(rows=rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "paracoords.json").write_text(emit_paracoords_json(spec))
    try:
        (out / "paracoords.svg").write_text(render_paracoords_svg(spec, args.width, args.height))
    except EmptyPlotError as exc:
        print(f"paracoords.svg not written: {exc}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trace-causal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="analyse one or more trace datasets")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("generate", help="write a synthetic trace")
    p.add_argument("--events", type=int, required=True)
    p.add_argument("--kernels", type=int, default=8)
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scm", help="JSON file with planted coefficients")
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="median wall time per worker/rank count")
    _add_run_flags(p, counts=False)
    p.add_argument("--workers", dest="worker_counts", type=_int_list, default=[1, 2, 4, 8],
                   help="comma-separated worker counts")
    p.add_argument("--ranks", dest="rank_counts", type=_int_list, default=None,
                   help="comma-separated rank counts (default: the configured one)")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("causal", help="causal graph from a prepared feature matrix CSV")
    p.add_argument("--matrix", required=True)
    p.add_argument("--target-column", default="perf_variation")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--max-cond", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_causal)

    p = sub.add_parser("paracoords", help="parallel-coordinates JSON and SVG from a trace")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--time-unit", choices=["ns", "ms"], default="ns")
    p.add_argument("--limit", type=int, default=0, help="keep only the first N kernel/transfer pairs")
    p.add_argument("--width", type=int, default=900)
    p.add_argument("--height", type=int, default=420)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_paracoords)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
