"""Trace domain types, profiler column naming, and CSV / JSON-lines ingestion.

Traces are read into a columnar :class:`TraceTable` (what the pipeline works
on) and can be expanded into per-event :class:`KernelEvent` /
:class:`MemcpyEvent` objects for the record-at-a-time API.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

GROUPS = ("identification", "launch_config", "temporal", "memory_system")

LAUNCH_DIMS = ("gridX", "gridY", "gridZ", "blockX", "blockY", "blockZ")
LAUNCH_SCALARS = ("staticSharedMemory", "dynamicSharedMemory", "registersPerThread")
LAUNCH_FIELDS = LAUNCH_DIMS + LAUNCH_SCALARS

# Accepted spellings for the structural fields, tried in order after renaming.
FIELD_ALIASES = {
    "event_type": ("event_type",),
    "kernel_name": ("kernel_name", "Kernel_Name", "demangledName", "name"),
    "start": ("start", "start_ns", "Start_Timestamp"),
    "end": ("end", "end_ns", "End_Timestamp"),
    "rank": ("rank", "rank_id"),
    "correlationId": ("correlationId", "correlation_id"),
    "copyKind": ("copyKind", "copy_kind"),
    "bytes": ("bytes", "Bytes"),
    "streamId": ("streamId", "stream_id"),
}

# Table of profiler columns -> (canonical name, group).
_TABLE = [
    # identification and context
    ("Kernel_Name", "Kernel_Name", "identification"),
    ("Device", "Device", "identification"),
    ("CC", "CC", "identification"),
    ("Process_Name", "Process_Name", "identification"),
    ("Host_Name", "Host_Name", "identification"),
    # kernel launch configuration
    ("Grid_Size", "grid_size", "launch_config"),
    ("Workgroup_Size", "workgroup_size", "launch_config"),
    ("LDS_Per_Workgroup", "lds_per_workgroup", "launch_config"),
    ("Scratch_Per_Workitem", "scratch_per_workitem", "launch_config"),
    ("Arch_VGPR", "arch_vgpr", "launch_config"),
    ("Accum_VGPR", "accum_vgpr", "launch_config"),
    ("SGPR", "sgpr", "launch_config"),
    ("wave_size", "wave_size", "launch_config"),
    # temporal characteristics
    ("runtime", "runtime", "temporal"),
    ("SQ_WAVES", "sq_waves", "temporal"),
    ("SQ_BUSY_CYCLES", "sq_busy_cycles", "temporal"),
    ("SQ_CYCLES", "sq_cycles", "temporal"),
    ("SQ_INSTS_VALU", "sq_insts_valu", "temporal"),
    ("SQ_INSTS_SALU", "sq_insts_salu", "temporal"),
    ("SQ_INSTS_VMEM", "sq_insts_vmem", "temporal"),
    # memory system activity
    ("TCC_RW_REQ_sum", "tcc_rw_req", "memory_system"),
    ("TCC_BUSY_sum", "tcc_busy", "memory_system"),
    ("TCC_TAG_STALL_sum", "tcc_tag_stall", "memory_system"),
    ("TCC_HIT_sum", "tcc_hit", "memory_system"),
    ("TCC_MISS_sum", "tcc_miss", "memory_system"),
    ("TCC_READ_sum", "tcc_read", "memory_system"),
    ("TCC_WRITE_sum", "tcc_write", "memory_system"),
    ("TCP_PENDING_STALL_CYCLES_sum", "tcp_pending_stall", "memory_system"),
    ("TA_BUFFER_READ_WAVEFRONTS_sum", "ta_buf_read", "memory_system"),
    ("TA_BUFFER_WRITE_WAVEFRONTS_sum", "ta_buf_write", "memory_system"),
    ("TD_LOAD_WAVEFRONT_sum", "td_load", "memory_system"),
    ("TD_STORE_WAVEFRONT_sum", "td_store", "memory_system"),
    # trace structure and CUPTI-style launch fields (identity names)
    ("event_type", "event_type", "identification"),
    ("kernel_name", "kernel_name", "identification"),
    ("demangledName", "demangledName", "identification"),
    ("rank", "rank", "identification"),
    ("correlationId", "correlationId", "identification"),
    ("streamId", "streamId", "identification"),
    ("start", "start", "temporal"),
    ("end", "end", "temporal"),
    ("gridX", "gridX", "launch_config"),
    ("gridY", "gridY", "launch_config"),
    ("gridZ", "gridZ", "launch_config"),
    ("blockX", "blockX", "launch_config"),
    ("blockY", "blockY", "launch_config"),
    ("blockZ", "blockZ", "launch_config"),
    ("staticSharedMemory", "staticSharedMemory", "launch_config"),
    ("dynamicSharedMemory", "dynamicSharedMemory", "launch_config"),
    ("registersPerThread", "registersPerThread", "launch_config"),
    ("copyKind", "copyKind", "memory_system"),
    ("bytes", "bytes", "memory_system"),
]


class IngestError(ValueError):
    """A trace file could not be turned into events."""


@dataclass(frozen=True)
class ColumnMap:
    entries: dict
    group: dict

    def __post_init__(self):
        seen = {}
        for original, canonical in self.entries.items():
            if canonical in seen:
                raise ValueError(
                    f"column map not injective: {seen[canonical]!r} and {original!r} -> {canonical!r}"
                )
            seen[canonical] = original
            if self.group.get(canonical) not in GROUPS:
                raise ValueError(f"canonical name {canonical!r} has no valid group")

    def canonical(self, column: str) -> str:
        return self.entries.get(column, column)

    def group_of(self, canonical: str) -> str | None:
        return self.group.get(canonical)


def default_column_map() -> ColumnMap:
    entries = {orig: canon for orig, canon, _ in _TABLE}
    group = {canon: grp for _, canon, grp in _TABLE}
    return ColumnMap(entries=entries, group=group)


@dataclass(frozen=True)
class KernelEvent:
    kernel_name: str
    rank_id: int
    start_ns: int
    end_ns: int
    grid: tuple = (1, 1, 1)
    block: tuple = (1, 1, 1)
    static_shared_mem: int = 0
    dynamic_shared_mem: int = 0
    registers_per_thread: int = 0
    correlation_id: int | None = None
    extra_counters: dict = field(default_factory=dict)
    defaulted: frozenset = frozenset()
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.end_ns < self.start_ns:
            raise ValueError(f"kernel {self.kernel_name!r} ends before it starts")
        if min(self.grid) < 1 or min(self.block) < 1:
            raise ValueError(f"kernel {self.kernel_name!r} has a grid/block component < 1")

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns

    def launch_features(self) -> dict:
        """Launch configuration as named features, skipping defaulted fields."""
        values = dict(
            zip(LAUNCH_FIELDS, (*self.grid, *self.block, self.static_shared_mem,
                                self.dynamic_shared_mem, self.registers_per_thread))
        )
        return {k: float(v) for k, v in values.items() if k not in self.defaulted}


@dataclass(frozen=True)
class MemcpyEvent:
    copy_kind: int
    bytes: int
    start_ns: int
    end_ns: int
    rank_id: int = 0
    correlation_id: int | None = None
    stream_id: int | None = None

    def __post_init__(self):
        if self.end_ns < self.start_ns:
            raise ValueError("memcpy ends before it starts")
        if self.bytes < 0:
            raise ValueError("memcpy byte count is negative")

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns


@dataclass
class KernelColumns:
    """Columnar kernel rows; index i is the i-th kernel row of the file."""

    name: np.ndarray
    rank: np.ndarray
    start: np.ndarray
    end: np.ndarray
    launch: dict  # LAUNCH_FIELDS -> int64 array
    launch_defaulted: dict  # LAUNCH_FIELDS -> bool array
    corr: np.ndarray
    has_corr: np.ndarray
    extras: dict  # counter name -> float64 array, NaN where absent
    labels: dict  # label name -> object array, None where absent

    def __len__(self):
        return len(self.start)

    @property
    def duration(self) -> np.ndarray:
        return self.end - self.start


@dataclass
class MemcpyColumns:
    kind: np.ndarray
    nbytes: np.ndarray
    start: np.ndarray
    end: np.ndarray
    rank: np.ndarray
    corr: np.ndarray
    has_corr: np.ndarray
    stream: np.ndarray
    has_stream: np.ndarray

    def __len__(self):
        return len(self.start)


@dataclass
class TraceTable:
    kernels: KernelColumns
    memcpys: MemcpyColumns

    def to_events(self) -> tuple[list, list]:
        k = self.kernels
        kernels = []
        extra_names = sorted(k.extras)
        label_names = sorted(k.labels)
        for i in range(len(k)):
            defaulted = frozenset(f for f in LAUNCH_FIELDS if k.launch_defaulted[f][i])
            extras = {}
            for name in extra_names:
                v = k.extras[name][i]
                if not np.isnan(v):
                    extras[name] = float(v)
            labels = {}
            for name in label_names:
                v = k.labels[name][i]
                if v is not None:
                    labels[name] = v
            lv = [int(k.launch[f][i]) for f in LAUNCH_FIELDS]
            kernels.append(KernelEvent(
                kernel_name=str(k.name[i]),
                rank_id=int(k.rank[i]),
                start_ns=int(k.start[i]),
                end_ns=int(k.end[i]),
                grid=tuple(lv[0:3]),
                block=tuple(lv[3:6]),
                static_shared_mem=lv[6],
                dynamic_shared_mem=lv[7],
                registers_per_thread=lv[8],
                correlation_id=int(k.corr[i]) if k.has_corr[i] else None,
                extra_counters=extras,
                defaulted=defaulted,
                labels=labels,
            ))
        m = self.memcpys
        memcpys = [
            MemcpyEvent(
                copy_kind=int(m.kind[i]),
                bytes=int(m.nbytes[i]),
                start_ns=int(m.start[i]),
                end_ns=int(m.end[i]),
                rank_id=int(m.rank[i]),
                correlation_id=int(m.corr[i]) if m.has_corr[i] else None,
                stream_id=int(m.stream[i]) if m.has_stream[i] else None,
            )
            for i in range(len(m))
        ]
        return kernels, memcpys

    @classmethod
    def from_events(cls, kernels: Sequence[KernelEvent], memcpys: Sequence[MemcpyEvent]) -> "TraceTable":
        n = len(kernels)
        launch = {f: np.empty(n, dtype=np.int64) for f in LAUNCH_FIELDS}
        defaulted = {f: np.zeros(n, dtype=bool) for f in LAUNCH_FIELDS}
        extra_names = sorted({c for e in kernels for c in e.extra_counters})
        label_names = sorted({c for e in kernels for c in e.labels})
        extras = {c: np.full(n, np.nan) for c in extra_names}
        labels = {c: np.full(n, None, dtype=object) for c in label_names}
        for i, e in enumerate(kernels):
            vals = (*e.grid, *e.block, e.static_shared_mem, e.dynamic_shared_mem, e.registers_per_thread)
            for f, v in zip(LAUNCH_FIELDS, vals):
                launch[f][i] = v
                defaulted[f][i] = f in e.defaulted
            for c, v in e.extra_counters.items():
                extras[c][i] = v
            for c, v in e.labels.items():
                labels[c][i] = v
        kc = KernelColumns(
            name=np.array([e.kernel_name for e in kernels], dtype=object),
            rank=np.array([e.rank_id for e in kernels], dtype=np.int64),
            start=np.array([e.start_ns for e in kernels], dtype=np.int64),
            end=np.array([e.end_ns for e in kernels], dtype=np.int64),
            launch=launch,
            launch_defaulted=defaulted,
            corr=np.array([e.correlation_id or 0 for e in kernels], dtype=np.int64),
            has_corr=np.array([e.correlation_id is not None for e in kernels], dtype=bool),
            extras=extras,
            labels=labels,
        )
        mc = MemcpyColumns(
            kind=np.array([m.copy_kind for m in memcpys], dtype=np.int64),
            nbytes=np.array([m.bytes for m in memcpys], dtype=np.int64),
            start=np.array([m.start_ns for m in memcpys], dtype=np.int64),
            end=np.array([m.end_ns for m in memcpys], dtype=np.int64),
            rank=np.array([m.rank_id for m in memcpys], dtype=np.int64),
            corr=np.array([m.correlation_id or 0 for m in memcpys], dtype=np.int64),
            has_corr=np.array([m.correlation_id is not None for m in memcpys], dtype=bool),
            stream=np.array([m.stream_id or 0 for m in memcpys], dtype=np.int64),
            has_stream=np.array([m.stream_id is not None for m in memcpys], dtype=bool),
        )
        return cls(kc, mc)


# --------------------------------------------------------------------------
# ingestion

_NS_PER = {"ns": 1, "ms": 1_000_000}


def _read_frame(path: Path, fmt: str) -> pd.DataFrame:
    if fmt == "csv":
        text = path.read_text(encoding="utf-8")
        if not text.strip():
            return pd.DataFrame()
        return pd.read_csv(
            io.StringIO(text), dtype=object, keep_default_na=False, na_values=[""],
            skipinitialspace=False,
        )
    if fmt == "jsonl":
        rows = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line, parse_float=str, parse_int=str)
                except json.JSONDecodeError as exc:
                    raise IngestError(f"row {lineno}: invalid JSON ({exc.msg})") from None
                rows.append({k: (None if v is None else str(v)) for k, v in obj.items()})
        return pd.DataFrame.from_records(rows) if rows else pd.DataFrame()
    raise IngestError(f"unknown trace format {fmt!r}")


def _resolve(columns: Iterable[str], field_name: str) -> str | None:
    cols = set(columns)
    for alias in FIELD_ALIASES[field_name]:
        if alias in cols:
            return alias
    return None


def _absent(values: np.ndarray) -> np.ndarray:
    return np.asarray(values == None, dtype=bool)  # noqa: E711 - elementwise on object arrays


def _int_column(values: np.ndarray, rows: np.ndarray, what: str, scale: int = 1,
                default: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Parse strings to exact int64 (times ``scale``); returns (values, was_missing)."""
    missing = _absent(values)
    if missing.any() and default is None:
        i = int(np.argmax(missing))
        raise IngestError(f"row {rows[i]}: missing {what}")
    out = np.full(len(values), 0 if default is None else default, dtype=np.int64)
    present = ~missing
    try:
        raw = values[present].astype(np.int64)
        if scale == 1 or not len(raw) or np.abs(raw).max() <= np.iinfo(np.int64).max // scale:
            out[present] = raw * scale
            return out, missing
    except (ValueError, TypeError, OverflowError):
        pass
    for i in np.flatnonzero(present):
        v = values[i]
        try:
            d = Decimal(str(v).strip()) * scale
        except InvalidOperation:
            raise IngestError(f"row {rows[i]}: non-numeric {what} {v!r}") from None
        if not d.is_finite() or d != d.to_integral_value():
            raise IngestError(f"row {rows[i]}: {what} {v!r} is not a whole number of ns")
        if not -2**63 <= d < 2**63:
            raise IngestError(f"row {rows[i]}: {what} {v!r} is out of range")
        out[i] = int(d)
    return out, missing


def _numeric_or_none(values: np.ndarray) -> np.ndarray | None:
    """Float array (NaN where absent) if every present value is numeric, else None."""
    present = ~_absent(values)
    out = np.full(len(values), np.nan)
    try:
        # float() on the strings is exact; pandas' fast parser is not
        out[present] = values[present].astype(float)
    except (ValueError, TypeError):
        return None
    return out


def read_trace_table(path, format: str = "csv", column_map: ColumnMap | None = None,
                     time_unit: str = "ns") -> TraceTable:
    """Read a trace file into columns. Row numbers in errors are 1-based data rows."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"no such trace file: {path}")
    if time_unit not in _NS_PER:
        raise IngestError(f"unknown time unit {time_unit!r}")
    scale = _NS_PER[time_unit]
    cmap = column_map or default_column_map()

    df = _read_frame(path, format)
    if len(df) == 0:
        return TraceTable.from_events([], [])
    df = df.rename(columns={c: cmap.canonical(c) for c in df.columns})
    arrays: dict = {}

    def column(col):
        # one object array per column, None where the cell was empty
        if col not in arrays:
            a = df[col].to_numpy(dtype=object)
            a[pd.isna(a)] = None
            arrays[col] = a
        return arrays[col]

    etype_col = _resolve(df.columns, "event_type")
    if etype_col is None:
        raise IngestError("missing required column 'event_type'")
    etype = column(etype_col)
    row_no = np.arange(1, len(df) + 1)
    is_kernel = etype == "kernel"
    is_memcpy = etype == "memcpy"
    bad = ~(is_kernel | is_memcpy)
    if bad.any():
        i = int(np.argmax(bad))
        raise IngestError(f"row {row_no[i]}: unknown event_type {etype[i]!r}")

    start_col = _resolve(df.columns, "start")
    end_col = _resolve(df.columns, "end")
    for name, col in (("start", start_col), ("end", end_col)):
        if col is None:
            raise IngestError(f"missing required column {name!r}")

    structural = {start_col, end_col, etype_col}

    def col_values(col, mask):
        return column(col)[mask]

    rank_col = _resolve(df.columns, "rank")
    corr_col = _resolve(df.columns, "correlationId")
    structural |= {c for c in (rank_col, corr_col) if c}

    # kernels
    kmask = is_kernel
    krows = row_no[kmask]
    nk = int(kmask.sum())
    name_col = _resolve(df.columns, "kernel_name")
    if nk and name_col is None:
        raise IngestError("missing required column 'kernel_name'")
    if name_col:
        structural.add(name_col)
    kstart, _ = _int_column(col_values(start_col, kmask), krows, "start", scale)
    kend, _ = _int_column(col_values(end_col, kmask), krows, "end", scale)
    bad = kend < kstart
    if bad.any():
        raise IngestError(f"row {krows[int(np.argmax(bad))]}: kernel end precedes start")
    names = col_values(name_col, kmask) if name_col else np.empty(0, dtype=object)
    for i, v in enumerate(names):
        if v is None or v == "":
            raise IngestError(f"row {krows[i]}: missing kernel_name")

    def optional_int(field_name, mask, rows, default):
        col = field_name if field_name in df.columns else None
        n = int(mask.sum())
        if col is None:
            return np.full(n, default, dtype=np.int64), np.ones(n, dtype=bool)
        structural.add(col)
        return _int_column(col_values(col, mask), rows, field_name, 1, default)

    launch, launch_def = {}, {}
    for f in LAUNCH_FIELDS:
        default = 1 if f in LAUNCH_DIMS else 0
        launch[f], launch_def[f] = optional_int(f, kmask, krows, default)
        if f in LAUNCH_DIMS and (launch[f] < 1).any():
            raise IngestError(f"row {krows[int(np.argmax(launch[f] < 1))]}: {f} must be >= 1")
        if f in LAUNCH_SCALARS and (launch[f] < 0).any():
            raise IngestError(f"row {krows[int(np.argmax(launch[f] < 0))]}: {f} must be >= 0")

    def ids(col, mask, rows):
        n = int(mask.sum())
        if col is None:
            return np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool)
        vals, missing = _int_column(col_values(col, mask), rows, col, 1, 0)
        return vals, ~missing

    krank = ids(rank_col, kmask, krows)[0]
    kcorr, khas = ids(corr_col, kmask, krows)

    copy_col = _resolve(df.columns, "copyKind")
    bytes_col = _resolve(df.columns, "bytes")
    stream_col = _resolve(df.columns, "streamId")
    structural |= {c for c in (copy_col, bytes_col, stream_col) if c}

    extras, labels = {}, {}
    for col in df.columns:
        if col in structural:
            continue
        vals = col_values(col, kmask)
        if _absent(vals).all():
            continue
        num = None if cmap.group_of(col) == "identification" else _numeric_or_none(vals)
        if num is None:
            labels[col] = np.array([None if v is None else str(v) for v in vals], dtype=object)
        else:
            extras[col] = num

    kernels = KernelColumns(
        name=np.array([str(v) for v in names], dtype=object),
        rank=krank, start=kstart, end=kend, launch=launch, launch_defaulted=launch_def,
        corr=kcorr, has_corr=khas, extras=extras, labels=labels,
    )

    # memcpys
    mmask = is_memcpy
    mrows = row_no[mmask]
    nm = int(mmask.sum())
    if nm and copy_col is None:
        raise IngestError("missing required column 'copyKind'")
    mstart, _ = _int_column(col_values(start_col, mmask), mrows, "start", scale)
    mend, _ = _int_column(col_values(end_col, mmask), mrows, "end", scale)
    bad = mend < mstart
    if bad.any():
        raise IngestError(f"row {mrows[int(np.argmax(bad))]}: memcpy end precedes start")
    kind = (_int_column(col_values(copy_col, mmask), mrows, "copyKind")[0]
            if copy_col else np.zeros(0, dtype=np.int64))
    if bytes_col:
        nbytes = _int_column(col_values(bytes_col, mmask), mrows, "bytes", 1, 0)[0]
    else:
        nbytes = np.zeros(nm, dtype=np.int64)
    if (nbytes < 0).any():
        raise IngestError(f"row {mrows[int(np.argmax(nbytes < 0))]}: negative bytes")
    mcorr, mhas = ids(corr_col, mmask, mrows)
    mstream, mhas_stream = ids(stream_col, mmask, mrows)
    memcpys = MemcpyColumns(
        kind=kind, nbytes=nbytes, start=mstart, end=mend,
        rank=ids(rank_col, mmask, mrows)[0], corr=mcorr, has_corr=mhas,
        stream=mstream, has_stream=mhas_stream,
    )
    return TraceTable(kernels, memcpys)


def load_trace(path, format: str = "csv", column_map: ColumnMap | None = None,
               time_unit: str = "ns") -> tuple[list, list]:
    """Load a trace file as ``(kernel_events, memcpy_events)`` in file order."""
    return read_trace_table(path, format, column_map, time_unit).to_events()


# --------------------------------------------------------------------------
# serialization

def _kernel_obj(e: KernelEvent) -> dict:
    obj = {"event_type": "kernel", "kernel_name": e.kernel_name, "rank": e.rank_id,
           "start": e.start_ns, "end": e.end_ns}
    vals = (*e.grid, *e.block, e.static_shared_mem, e.dynamic_shared_mem, e.registers_per_thread)
    for f, v in zip(LAUNCH_FIELDS, vals):
        if f not in e.defaulted:
            obj[f] = v
    if e.correlation_id is not None:
        obj["correlationId"] = e.correlation_id
    for k in sorted(e.extra_counters):
        obj[k] = e.extra_counters[k]
    for k in sorted(e.labels):
        obj[k] = e.labels[k]
    return obj


def _memcpy_obj(m: MemcpyEvent) -> dict:
    obj = {"event_type": "memcpy", "copyKind": m.copy_kind, "bytes": m.bytes, "rank": m.rank_id,
           "start": m.start_ns, "end": m.end_ns}
    if m.correlation_id is not None:
        obj["correlationId"] = m.correlation_id
    if m.stream_id is not None:
        obj["streamId"] = m.stream_id
    return obj


def dump_events_jsonl(kernels: Sequence[KernelEvent], memcpys: Sequence[MemcpyEvent], fh) -> None:
    """Canonical debug dump: kernels then memcpys, one JSON object per line, times in ns."""
    for e in kernels:
        fh.write(json.dumps(_kernel_obj(e)) + "\n")
    for m in memcpys:
        fh.write(json.dumps(_memcpy_obj(m)) + "\n")


def write_trace_csv(kernels: Sequence[KernelEvent], memcpys: Sequence[MemcpyEvent], fh) -> None:
    objs = [_kernel_obj(e) for e in kernels] + [_memcpy_obj(m) for m in memcpys]
    header: list[str] = []
    seen = set()
    for o in objs:
        for k in o:
            if k not in seen:
                seen.add(k)
                header.append(k)
    writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    for o in objs:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in o.items()})
