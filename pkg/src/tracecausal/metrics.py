"""Per-run target metrics: kernel run-to-run variability and memory-stall variability."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .trace_model import LAUNCH_FIELDS, KernelEvent, MemcpyEvent, TraceTable

TARGETS = ("perf_variation", "memory_stall")
KEY_MODES = ("name_only", "name_plus_launch")


@dataclass
class KernelGroup:
    key: tuple
    runs: list
    indices: list  # positions of the runs in the input sequence

    @property
    def n(self) -> int:
        return len(self.runs)

    @property
    def mean_duration_ns(self) -> float:
        # integer ns sum is exact; one rounding at the division
        return sum(r.duration_ns for r in self.runs) / len(self.runs)


@dataclass
class VariabilityRecord:
    event_ref: int
    target_name: str
    target_value: float
    features: dict
    bin_id: int | None = None
    kernel_name: str = ""


@dataclass(frozen=True)
class MatchPolicy:
    window_ns: int = 1_000_000
    use_correlation: bool = True
    use_overlap: bool = True
    use_nearest: bool = True


@dataclass
class MatchReport:
    pairs: list
    by_rule: dict = field(default_factory=lambda: {"correlation": 0, "overlap": 0, "nearest": 0})
    unmatched: int = 0


def _group_key(e: KernelEvent, key_mode: str) -> tuple:
    if key_mode == "name_only":
        return (e.kernel_name,)
    if key_mode == "name_plus_launch":
        return (e.kernel_name, tuple(e.grid), tuple(e.block))
    raise ValueError(f"unknown key_mode {key_mode!r}")


def group_kernels(events: Sequence[KernelEvent], key_mode: str = "name_only") -> list[KernelGroup]:
    """Partition kernel runs by configuration, groups ordered by first occurrence."""
    groups: dict = {}
    for i, e in enumerate(events):
        key = _group_key(e, key_mode)
        g = groups.get(key)
        if g is None:
            g = groups[key] = KernelGroup(key=key, runs=[], indices=[])
        g.runs.append(e)
        g.indices.append(i)
    return list(groups.values())


def kernel_features(e: KernelEvent) -> dict:
    feats = e.launch_features()
    feats.update(e.extra_counters)
    return feats


def kernel_variability(group: KernelGroup) -> list[VariabilityRecord]:
    """|duration - group mean duration| for each run of the group."""
    mean = group.mean_duration_ns
    return [
        VariabilityRecord(
            event_ref=idx,
            target_name="perf_variation",
            target_value=abs(run.duration_ns - mean),
            features=kernel_features(run),
            kernel_name=run.kernel_name,
        )
        for idx, run in zip(group.indices, group.runs)
    ]


def memory_stall(kernel: KernelEvent, memcpy: MemcpyEvent) -> float:
    return float(abs(kernel.duration_ns - memcpy.duration_ns))


def _match_arrays(k_start, k_end, k_rank, k_corr, k_has_corr,
                  m_start, m_end, m_rank, m_corr, m_has_corr, policy: MatchPolicy) -> MatchReport:
    report = MatchReport(pairs=[])
    by_corr: dict = {}
    if policy.use_correlation:
        for j in range(len(m_start)):
            if m_has_corr[j]:
                c = int(m_corr[j])
                best = by_corr.get(c)
                if best is None or (m_start[j], j) < (m_start[best], best):
                    by_corr[c] = j

    # per-rank memcpy lists sorted by (start, index)
    per_rank: dict = {}
    for j in np.lexsort((np.arange(len(m_start)), m_start)):
        per_rank.setdefault(int(m_rank[j]), []).append(int(j))
    rank_starts = {r: [int(m_start[j]) for j in js] for r, js in per_rank.items()}
    max_dur = {r: max(int(m_end[j] - m_start[j]) for j in js) for r, js in per_rank.items()}

    for i in range(len(k_start)):
        ks, ke = int(k_start[i]), int(k_end[i])
        if policy.use_correlation and k_has_corr[i]:
            j = by_corr.get(int(k_corr[i]))
            if j is not None:
                report.pairs.append((i, j))
                report.by_rule["correlation"] += 1
                continue
        r = int(k_rank[i])
        js = per_rank.get(r)
        if not js:
            report.unmatched += 1
            continue
        starts = rank_starts[r]
        chosen = None
        if policy.use_overlap:
            lo = bisect.bisect_left(starts, ks - max_dur[r])
            hi = bisect.bisect_left(starts, ke)
            best_overlap = 0
            # zero-length kernels overlap nothing and fall through to the nearest rule
            for pos in range(lo, min(hi + 1, len(js))):
                j = js[pos]
                ov = min(ke, int(m_end[j])) - max(ks, int(m_start[j]))
                if ov > best_overlap:
                    best_overlap, chosen = ov, j
            if chosen is not None:
                report.by_rule["overlap"] += 1
        if chosen is None and policy.use_nearest:
            pos = bisect.bisect_left(starts, ks - policy.window_ns)
            best_key = None
            while pos < len(js) and starts[pos] <= ks + policy.window_ns:
                j = js[pos]
                key = (abs(starts[pos] - ks), starts[pos], j)
                if best_key is None or key < best_key:
                    best_key, chosen = key, j
                pos += 1
            if chosen is not None:
                report.by_rule["nearest"] += 1
        if chosen is None:
            report.unmatched += 1
        else:
            report.pairs.append((i, chosen))
    return report


def match_transfers(kernels: Sequence[KernelEvent], memcpys: Sequence[MemcpyEvent],
                    policy: MatchPolicy = MatchPolicy()) -> list[tuple[int, int]]:
    """Link each kernel to at most one memcpy: correlation id, then overlap, then nearest start."""
    return match_transfers_report(kernels, memcpys, policy).pairs


def match_transfers_report(kernels, memcpys, policy: MatchPolicy = MatchPolicy()) -> MatchReport:
    return _match_arrays(
        [e.start_ns for e in kernels], [e.end_ns for e in kernels], [e.rank_id for e in kernels],
        [e.correlation_id or 0 for e in kernels], [e.correlation_id is not None for e in kernels],
        [m.start_ns for m in memcpys], [m.end_ns for m in memcpys], [m.rank_id for m in memcpys],
        [m.correlation_id or 0 for m in memcpys], [m.correlation_id is not None for m in memcpys],
        policy,
    )


def stall_records(kernels: Sequence[KernelEvent], memcpys: Sequence[MemcpyEvent],
                  policy: MatchPolicy = MatchPolicy()) -> list[VariabilityRecord]:
    out = []
    for i, j in match_transfers(kernels, memcpys, policy):
        feats = kernel_features(kernels[i])
        feats["copyKind"] = float(memcpys[j].copy_kind)
        feats["bytes"] = float(memcpys[j].bytes)
        out.append(VariabilityRecord(
            event_ref=i, target_name="memory_stall",
            target_value=memory_stall(kernels[i], memcpys[j]),
            features=feats, kernel_name=kernels[i].kernel_name,
        ))
    return out


def variability_records(kernels, memcpys, target: str = "perf_variation",
                        key_mode: str = "name_only", policy: MatchPolicy = MatchPolicy()) -> list:
    """All records of one target, ordered by kernel position in the trace."""
    if target == "perf_variation":
        recs = [r for g in group_kernels(kernels, key_mode) for r in kernel_variability(g)] if kernels else []
        return sorted(recs, key=lambda r: r.event_ref)
    if target == "memory_stall":
        return stall_records(kernels, memcpys, policy)
    raise ValueError(f"unknown target {target!r}")


# --------------------------------------------------------------------------
# columnar records

@dataclass
class RecordTable:
    """Columnar VariabilityRecords. ``features`` holds NaN where a run lacks a feature."""

    target_name: str
    event_ref: np.ndarray
    kernel_name: np.ndarray
    target: np.ndarray
    features: dict
    start_ns: np.ndarray  # start of the source kernel, used for binning
    bin_id: np.ndarray | None = None
    memcpy_ref: np.ndarray | None = None

    def __len__(self):
        return len(self.event_ref)

    def subset(self, mask) -> "RecordTable":
        return RecordTable(
            self.target_name, self.event_ref[mask], self.kernel_name[mask], self.target[mask],
            {k: v[mask] for k, v in self.features.items()}, self.start_ns[mask],
            None if self.bin_id is None else self.bin_id[mask],
            None if self.memcpy_ref is None else self.memcpy_ref[mask],
        )

    def to_records(self) -> list[VariabilityRecord]:
        names = sorted(self.features)
        cols = [self.features[n] for n in names]
        out = []
        for i in range(len(self)):
            feats = {n: float(c[i]) for n, c in zip(names, cols) if not np.isnan(c[i])}
            out.append(VariabilityRecord(
                event_ref=int(self.event_ref[i]), target_name=self.target_name,
                target_value=float(self.target[i]), features=feats,
                bin_id=None if self.bin_id is None else int(self.bin_id[i]),
                kernel_name=str(self.kernel_name[i]),
            ))
        return out

    @classmethod
    def from_records(cls, records: Sequence[VariabilityRecord]) -> "RecordTable":
        if not records:
            return cls("perf_variation", np.zeros(0, dtype=np.int64), np.zeros(0, dtype=object),
                       np.zeros(0), {}, np.zeros(0, dtype=np.int64))
        names = sorted({f for r in records for f in r.features})
        feats = {n: np.array([r.features.get(n, np.nan) for r in records], dtype=float) for n in names}
        bins = None
        if all(r.bin_id is not None for r in records):
            bins = np.array([r.bin_id for r in records], dtype=np.int64)
        return cls(
            target_name=records[0].target_name,
            event_ref=np.array([r.event_ref for r in records], dtype=np.int64),
            kernel_name=np.array([r.kernel_name for r in records], dtype=object),
            target=np.array([r.target_value for r in records], dtype=float),
            features=feats,
            start_ns=np.zeros(len(records), dtype=np.int64),
            bin_id=bins,
        )

    def serialize(self) -> bytes:
        """Deterministic text form, one line per record."""
        names = sorted(self.features)
        n = len(self)
        cols = [[str(v) for v in self.event_ref.tolist()], [str(v) for v in self.kernel_name],
                [""] * n if self.bin_id is None else [str(v) for v in self.bin_id.tolist()],
                [repr(v) for v in self.target.astype(float).tolist()]]
        # v != v is the NaN test on plain floats
        cols += [["" if v != v else repr(v) for v in self.features[f].astype(float).tolist()] for f in names]
        lines = ["event_ref,kernel_name,bin_id,target," + ",".join(names)]
        lines += [",".join(row) for row in zip(*cols)]
        return ("\n".join(lines) + "\n").encode()


def _kernel_feature_columns(k, idx: np.ndarray) -> dict:
    feats = {}
    for f in LAUNCH_FIELDS:
        col = k.launch[f][idx].astype(float)
        col[k.launch_defaulted[f][idx]] = np.nan
        if not np.all(np.isnan(col)):
            feats[f] = col
    for name, col in k.extras.items():
        sub = col[idx]
        if not np.all(np.isnan(sub)):
            feats[name] = sub
    return feats


def compute_records(trace: TraceTable, target: str = "perf_variation", key_mode: str = "name_only",
                    policy: MatchPolicy = MatchPolicy()) -> tuple[RecordTable, dict]:
    """Vectorized counterpart of :func:`variability_records`; returns (table, info)."""
    k, m = trace.kernels, trace.memcpys
    info: dict = {}
    if target == "perf_variation":
        n = len(k)
        idx = np.arange(n)
        if n:
            if key_mode == "name_only":
                keys = [(nm,) for nm in k.name]
            elif key_mode == "name_plus_launch":
                L = k.launch
                keys = list(zip(k.name, *(L[f] for f in ("gridX", "gridY", "gridZ", "blockX", "blockY", "blockZ"))))
            else:
                raise ValueError(f"unknown key_mode {key_mode!r}")
            codes: dict = {}
            gid = np.fromiter((codes.setdefault(key, len(codes)) for key in keys), dtype=np.int64, count=n)
            dur = k.duration
            sums = np.zeros(len(codes), dtype=np.int64)
            np.add.at(sums, gid, dur)
            counts = np.bincount(gid, minlength=len(codes))
            means = np.array([int(s) / int(c) for s, c in zip(sums, counts)], dtype=float)
            tgt = np.abs(dur.astype(float) - means[gid])
            info["groups"] = len(codes)
        else:
            tgt = np.zeros(0)
        table = RecordTable(target, idx.astype(np.int64), k.name[idx], tgt,
                            _kernel_feature_columns(k, idx), k.start[idx].copy())
        return table, info
    if target == "memory_stall":
        rep = _match_arrays(k.start, k.end, k.rank, k.corr, k.has_corr,
                            m.start, m.end, m.rank, m.corr, m.has_corr, policy)
        info["matched"] = dict(rep.by_rule)
        info["unmatched"] = rep.unmatched
        pairs = np.array(rep.pairs, dtype=np.int64).reshape(-1, 2)
        ki, mi = pairs[:, 0], pairs[:, 1]
        tgt = np.abs((k.end[ki] - k.start[ki]) - (m.end[mi] - m.start[mi])).astype(float)
        feats = _kernel_feature_columns(k, ki)
        feats["copyKind"] = m.kind[mi].astype(float)
        feats["bytes"] = m.nbytes[mi].astype(float)
        table = RecordTable(target, ki.copy(), k.name[ki], tgt, feats, k.start[ki].copy(),
                            memcpy_ref=mi.copy())
        return table, info
    raise ValueError(f"unknown target {target!r}")
