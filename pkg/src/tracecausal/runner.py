"""End-to-end runs: pipeline, causal graphs, and artifact files per dataset."""
from __future__ import annotations

import hashlib
import json
import logging
import re
import shutil
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .binning import bins_csv
from .causal import CausalParams, analyze
from .config import RunConfig
from .distributed import PipelineAbort, PipelineConfig, PipelineResult, run_pipeline
from .emit import EmptyPlotError, ParallelCoordsSpec, emit_dot, emit_paracoords_json, render_paracoords_svg

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_ABORT = 0, 1, 2, 3


@dataclass
class DatasetOutcome:
    name: str
    out_dir: Path
    status: str
    checksum: str
    artifacts: list = field(default_factory=list)
    result: PipelineResult | None = None
    wall_seconds: float = 0.0


def _slug(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", s)[:80] or "_"


def dataset_names(inputs) -> list[str]:
    names, seen = [], {}
    for path, _ in inputs:
        stem = _slug(Path(path).stem)
        if stem in seen:
            seen[stem] += 1
            stem = f"{stem}_{seen[stem]}"
        else:
            seen[stem] = 0
        names.append(stem)
    return names


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def pipeline_config(cfg: RunConfig, path: str, fmt: str) -> PipelineConfig:
    return PipelineConfig(
        path=path, format=fmt, time_unit=cfg.time_unit, bin_width_ns=cfg.bin_width_ns, k=cfg.k,
        target=cfg.target, key_mode=cfg.key_mode, world_size=cfg.world_size,
        worker_count=cfg.worker_count, transport=cfg.transport, match_window_ns=cfg.match_window_ns,
        bin_metric=cfg.bin_metric,
    )


def analytical_outputs(result: PipelineResult, graphs, paracoords_json: str) -> dict[str, bytes]:
    """Everything that must not depend on rank/worker counts, as bytes."""
    return {
        "bins.csv": bins_csv(result.summaries).encode(),
        "top_k": json.dumps(result.top_k).encode(),
        "records": result.records.serialize(),
        "graphs": json.dumps([[k, g.to_dict()] for k, g in graphs], sort_keys=True).encode(),
        "paracoords.json": paracoords_json.encode(),
    }


def checksum(outputs: dict[str, bytes]) -> str:
    h = hashlib.sha256()
    for name in sorted(outputs):
        h.update(name.encode() + b"\0" + outputs[name] + b"\0")
    return h.hexdigest()


def run_dataset(cfg: RunConfig, path: str, fmt: str, out_dir: Path, name: str) -> DatasetOutcome:
    t0 = time.perf_counter()
    result = run_pipeline(pipeline_config(cfg, path, fmt))

    t1 = time.perf_counter()
    recs = result.top_records() if cfg.causal_records == "top_k" else result.records
    params = CausalParams(alpha=cfg.alpha, max_cond=cfg.max_cond)
    if len(recs):
        analysis = analyze(recs, cfg.scope, params)
        graphs, causal_report = analysis.graphs, analysis.report()
    else:
        graphs, causal_report = [], {"graphs": [], "skipped": [{"scope": "all", "n": 0, "reason": "no records"}]}
    causal_seconds = time.perf_counter() - t1

    spec = ParallelCoordsSpec(rows=result.paracoords)
    pc_json = emit_paracoords_json(spec)
    outputs = analytical_outputs(result, graphs, pc_json)
    digest = checksum(outputs)

    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []

    def write(fname, text):
        (out_dir / fname).write_text(text, encoding="utf-8")
        artifacts.append(fname)

    write("bins.csv", outputs["bins.csv"].decode())
    for key, g in graphs:
        fname = f"causal_{cfg.scope}.dot" if cfg.scope == "whole_dataset" else f"causal_{cfg.scope}__{_slug(key)}.dot"
        write(fname, emit_dot(g))
    write(f"causal_{cfg.scope}.json",
          json.dumps({k: g.to_dict() for k, g in graphs}, sort_keys=True, indent=1) + "\n")
    write("paracoords.json", pc_json)
    notes = []
    try:
        write("paracoords.svg", render_paracoords_svg(spec))
    except EmptyPlotError:
        notes.append("no kernel in the top-K bins has a linked transfer; paracoords.svg not written")
    write("timing.json", result.timing.to_json())

    report = {
        "tool": "tracecausal",
        "version": __version__,
        "dataset": name,
        "input": {"path": str(path), "format": fmt, "sha256": file_digest(path)},
        "config": cfg.to_dict(),
        "status": result.status,
        "bin_spec": {"t_min_ns": result.spec.t_min_ns, "t_max_ns": result.spec.t_max_ns,
                     "width_ns": result.spec.width_ns, "bin_count": result.spec.bin_count},
        "top_k": result.top_k,
        "failed_bins": [{"bin_id": f.bin_id, "error": f.error} for f in result.failures],
        "records": {"target": result.records.target_name, "count": len(result.records),
                    "in_top_k": int(np.isin(result.records.bin_id, result.top_k).sum())},
        "record_info": result.info,
        "causal": causal_report,
        "causal_seconds": causal_seconds,
        "notes": notes,
        "checksum": digest,
    }
    artifacts.append("report.json")
    report["artifacts"] = artifacts
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return DatasetOutcome(name, out_dir, result.status, digest, artifacts, result,
                          time.perf_counter() - t0)


def run_all(cfg: RunConfig) -> tuple[int, list[DatasetOutcome]]:
    """Validate, then process each input independently. Returns (exit code, outcomes)."""
    cfg.validate()
    out_root = Path(cfg.output_dir)
    outcomes = []
    for (path, fmt), name in zip(cfg.inputs, dataset_names(cfg.inputs)):
        try:
            outcomes.append(run_dataset(cfg, path, fmt, out_root / name, name))
        except PipelineAbort as exc:
            log.error("dataset %s: %s", name, exc)
            return EXIT_ABORT, outcomes
    code = EXIT_PARTIAL if any(o.status == "partial" for o in outcomes) else EXIT_OK
    return code, outcomes


def bench(cfg: RunConfig, worker_counts, rank_counts=None, repeats: int = 3,
          scratch: Path | None = None) -> list[dict]:
    """Median wall time per (ranks, workers) over ``repeats`` runs; one row each."""
    cfg.validate()
    rank_counts = list(rank_counts or [cfg.world_size])
    scratch = Path(scratch or Path(cfg.output_dir) / "_bench")
    rows = []
    for ranks in rank_counts:
        for workers in worker_counts:
            times, sums = [], set()
            for rep in range(repeats):
                run_cfg = replace(cfg, world_size=ranks, worker_count=workers,
                                  output_dir=str(scratch / f"r{ranks}_w{workers}_{rep}"))
                t0 = time.perf_counter()
                code, outcomes = run_all(run_cfg)
                times.append(time.perf_counter() - t0)
                if code == EXIT_ABORT:
                    raise PipelineAbort(-1, "benchmark run aborted")
                sums.add("+".join(o.checksum for o in outcomes))
                shutil.rmtree(run_cfg.output_dir, ignore_errors=True)
            rows.append({
                "world_size": ranks, "worker_count": workers, "repeats": repeats,
                "median_seconds": statistics.median(times), "seconds": times,
                "checksum": sums.pop() if len(sums) == 1 else "MISMATCH",
            })
    return rows
