"""Naive serial reference for the default perf_variation pipeline.

Written without touching the package: plain ``csv`` parsing, dict grouping,
``fractions.Fraction`` for every statistic, and a full sort for ranking.
It only understands nanosecond CSV traces in the synthetic layout.
"""
from __future__ import annotations

import csv
import math
from fractions import Fraction

STRUCTURAL = {"event_type", "kernel_name", "rank", "start", "end", "correlationId",
              "copyKind", "bytes", "streamId"}


def _exact_float(fr: Fraction) -> float:
    return fr.numerator / fr.denominator  # int/int true division rounds once


def _interp(vals, pos: Fraction) -> float:
    i = math.floor(pos)
    f = pos - i
    if f == 0:
        return vals[i]
    lo, hi = Fraction(vals[i]), Fraction(vals[i + 1])
    return _exact_float(lo + (hi - lo) * f)


def summary_row(bin_id: int, values: list) -> list:
    if not values:
        return [bin_id, 0] + [None] * 8
    vals = sorted(values)
    n = len(vals)
    exact = [Fraction(v) for v in vals]
    mean = sum(exact) / n
    if n > 1:
        var = _exact_float(sum((x - mean) ** 2 for x in exact) / (n - 1))
    else:
        var = 0.0
    quart = [_interp(vals, Fraction(n - 1) * Fraction(q, 4)) for q in (1, 2, 3)]
    return [bin_id, n, vals[0], vals[-1], _exact_float(mean), var, math.sqrt(var)] + quart


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def reference_pipeline(path, width_ns: int = 10_000_000, k: int = 5) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    header = list(rows[0].keys()) if rows else []
    t_min = min(int(r["start"]) for r in rows)
    t_max = max(int(r["end"]) for r in rows)
    span = t_max - t_min
    n_bins = max(1, math.ceil(Fraction(span, width_ns)))

    kernels = [(i, r) for i, r in enumerate(r for r in rows if r["event_type"] == "kernel")]
    durations: dict = {}
    for _, r in kernels:
        durations.setdefault(r["kernel_name"], []).append(int(r["end"]) - int(r["start"]))
    means = {name: _exact_float(Fraction(sum(d), len(d))) for name, d in durations.items()}

    feature_cols = sorted(c for c in header if c not in STRUCTURAL
                          and any(r[c] != "" for _, r in kernels))
    rec_lines = ["event_ref,kernel_name,bin_id,target," + ",".join(feature_cols)]
    per_bin: dict = {b: [] for b in range(n_bins)}
    for i, r in kernels:
        dur = int(r["end"]) - int(r["start"])
        target = _exact_float(abs(Fraction(dur) - Fraction(means[r["kernel_name"]])))
        b = min((int(r["start"]) - t_min) // width_ns, n_bins - 1)
        per_bin[b].append(target)
        feats = ["" if r[c] == "" else repr(float(r[c])) for c in feature_cols]
        rec_lines.append(",".join([str(i), r["kernel_name"], str(b), repr(target)] + feats))

    summaries = [summary_row(b, per_bin[b]) for b in range(n_bins)]
    bins_lines = ["bin_id,count,min,max,mean,variance,std,q1,q2,q3"]
    bins_lines += [",".join(_cell(v) for v in row) for row in summaries]
    live = [row for row in summaries if row[1] > 0]
    top = [row[0] for row in sorted(live, key=lambda row: (-row[5], row[0]))[:k]]
    return {
        "top_k": top,
        "bins_csv": "\n".join(bins_lines) + "\n",
        "records": ("\n".join(rec_lines) + "\n").encode(),
        "bin_count": n_bins,
        "t_range": (t_min, t_max),
    }
