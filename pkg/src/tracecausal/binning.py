"""Fixed-width time bins, per-bin summary statistics, and variance ranking."""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

DEFAULT_BIN_WIDTH_NS = 10_000_000  # 10 ms
DEFAULT_K = 5

CSV_HEADER = "bin_id,count,min,max,mean,variance,std,q1,q2,q3"


class EmptyTraceError(ValueError):
    pass


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class BinSpec:
    t_min_ns: int
    t_max_ns: int
    width_ns: int

    def __post_init__(self):
        if self.t_max_ns < self.t_min_ns:
            raise ValueError("t_max_ns < t_min_ns")
        if self.width_ns <= 0:
            raise ValueError("bin width must be positive")

    @property
    def bin_count(self) -> int:
        span = self.t_max_ns - self.t_min_ns
        return max(1, -(-span // self.width_ns))


@dataclass(frozen=True, slots=True)
class BinSummary:
    bin_id: int
    count: int
    min: float | None = None
    max: float | None = None
    mean: float | None = None
    variance: float | None = None
    std: float | None = None
    q1: float | None = None
    q2: float | None = None
    q3: float | None = None


def global_time_range(events: Iterable) -> tuple[int, int]:
    """(min start, max end) over events with ``start_ns``/``end_ns``."""
    t_min = t_max = None
    for e in events:
        if t_min is None or e.start_ns < t_min:
            t_min = e.start_ns
        if t_max is None or e.end_ns > t_max:
            t_max = e.end_ns
    if t_min is None:
        raise EmptyTraceError("cannot take the time range of an empty trace")
    return int(t_min), int(t_max)


def assign_bin(event_start_ns: int, spec: BinSpec) -> int:
    if not spec.t_min_ns <= event_start_ns <= spec.t_max_ns:
        raise RangeError(f"start {event_start_ns} outside [{spec.t_min_ns}, {spec.t_max_ns}]")
    return min((event_start_ns - spec.t_min_ns) // spec.width_ns, spec.bin_count - 1)


def assign_bins(starts: np.ndarray, spec: BinSpec) -> np.ndarray:
    starts = np.asarray(starts, dtype=np.int64)
    if len(starts) and (starts.min() < spec.t_min_ns or starts.max() > spec.t_max_ns):
        raise RangeError("event start outside the bin range")
    return np.minimum((starts - spec.t_min_ns) // spec.width_ns, spec.bin_count - 1)


def _moments(vals: list) -> tuple[float, float]:
    """Mean and sample variance, each the correctly rounded value of the exact result.

    Every float is a/D for a shared power-of-two D, so the sums are exact
    integers and only the final int/int division rounds.
    """
    ratios = [v.as_integer_ratio() for v in vals]
    D = max(q for _, q in ratios)
    nums = [p * (D // q) for p, q in ratios]
    n = len(nums)
    S = sum(nums)
    mean = S / (n * D)
    if n < 2:
        return mean, 0.0
    ss = n * sum(a * a for a in nums) - S * S  # n * D^2 * sum of squared deviations
    return mean, ss / (n * (n - 1) * D * D)


def _quantile(sorted_vals: list, num: int, den: int) -> float:
    # linear interpolation at position (n-1)*num/den, rounded once
    i, rem = divmod((len(sorted_vals) - 1) * num, den)
    lo = sorted_vals[i]
    if rem == 0:
        return lo
    hi = sorted_vals[i + 1]
    return float(Fraction(lo) + (Fraction(hi) - Fraction(lo)) * Fraction(rem, den))


def summarize_bin(values: Sequence[float], bin_id: int) -> BinSummary:
    vals = sorted(float(v) for v in values)
    n = len(vals)
    if n == 0:
        return BinSummary(bin_id, 0)
    mean, variance = _moments(vals)
    return BinSummary(
        bin_id=bin_id, count=n, min=vals[0], max=vals[-1], mean=mean,
        variance=variance, std=math.sqrt(variance),
        q1=_quantile(vals, 1, 4), q2=_quantile(vals, 1, 2), q3=_quantile(vals, 3, 4),
    )


def rank_bins(summaries: Iterable[BinSummary], k: int) -> list[int]:
    """Ids of the k highest-variance non-empty bins; ties go to the lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    live = [s for s in summaries if s.count > 0]
    live.sort(key=lambda s: (-s.variance, s.bin_id))
    return [s.bin_id for s in live[:k]]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def bins_csv(summaries: Iterable[BinSummary]) -> str:
    rows = [CSV_HEADER]
    for s in sorted(summaries, key=lambda s: s.bin_id):
        rows.append(",".join(_fmt(v) for v in astuple(s)))
    return "\n".join(rows) + "\n"


def read_bins_csv(text: str) -> list[BinSummary]:
    lines = text.strip("\n").split("\n")
    if lines[0] != CSV_HEADER:
        raise ValueError("not a bin summary CSV")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        vals = [None if p == "" else float(p) for p in parts[2:]]
        out.append(BinSummary(int(parts[0]), int(parts[1]), *vals))
    return out
