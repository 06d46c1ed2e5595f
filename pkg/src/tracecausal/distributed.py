"""Rank/worker pipeline: range reduction, bin partitioning, pooled bin analysis, top-K merge.

Ranks talk only through a transport (``gather``, ``bcast``, ``allgather``).
Two transports exist: :class:`ThreadTransport` runs every rank as a thread of
this process and copies each message by pickling, :class:`PipeTransport` runs
ranks as OS processes connected to rank 0 by pipes. Inside a rank, bins are
analysed by a pool of shared-nothing worker processes.
"""
from __future__ import annotations

import json
import multiprocessing as mp
import pickle
import threading
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binning import (DEFAULT_BIN_WIDTH_NS, DEFAULT_K, BinSpec, BinSummary, EmptyTraceError,
                      assign_bins, rank_bins, summarize_bin)
from .emit import paracoords_rows
from .metrics import KEY_MODES, TARGETS, MatchPolicy, RecordTable, _match_arrays, compute_records
from .trace_model import read_trace_table

PHASES = ("ingest", "range-reduce", "partition", "worker-compute", "aggregate")
TRANSPORTS = ("inproc", "process")
BIN_METRICS = ("target", "duration")
POOL_START_METHOD = "forkserver"


class PipelineAbort(RuntimeError):
    def __init__(self, rank_id, reason: str = ""):
        super().__init__(f"rank {rank_id} aborted the pipeline: {reason}")
        self.rank_id = rank_id
        self.reason = reason


# --------------------------------------------------------------------------
# transports

class _ThreadWorld:
    def __init__(self, size: int, timeout: float):
        self.size = size
        self.slots: list = [None] * size
        self.barrier = threading.Barrier(size, timeout=timeout)
        self.progress = [0] * size
        self.failed_rank = None
        self.lock = threading.Lock()

    def fail(self, rank: int) -> None:
        with self.lock:
            if self.failed_rank is None:
                self.failed_rank = rank
        self.barrier.abort()


def _copy(obj):
    return pickle.loads(pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL))


class ThreadTransport:
    """In-process ranks; messages are copied so no rank ever aliases another's data."""

    def __init__(self, world: _ThreadWorld, rank: int):
        self.world = world
        self.rank = rank

    @classmethod
    def create(cls, world_size: int, timeout: float = 600.0) -> list["ThreadTransport"]:
        world = _ThreadWorld(world_size, timeout)
        return [cls(world, r) for r in range(world_size)]

    def _sync(self) -> None:
        w = self.world
        w.progress[self.rank] += 1
        try:
            w.barrier.wait()
        except threading.BrokenBarrierError:
            culprit = w.failed_rank
            if culprit is None:
                culprit = int(np.argmin(w.progress))
                reason = "collective timed out"
            else:
                reason = "peer failed"
            raise PipelineAbort(culprit, reason) from None

    def allgather(self, obj) -> list:
        self.world.slots[self.rank] = _copy(obj)
        self._sync()
        out = [_copy(x) for x in self.world.slots]
        self._sync()
        return out

    def gather(self, obj, root: int = 0):
        out = self.allgather(obj)
        return out if self.rank == root else None

    def bcast(self, obj, root: int = 0):
        if self.rank == root:
            self.world.slots[root] = _copy(obj)
        self._sync()
        out = _copy(self.world.slots[root])
        self._sync()
        return out


class PipeTransport:
    """Star topology over multiprocessing pipes with rank 0 as the hub."""

    def __init__(self, rank: int, world_size: int, conns: dict, timeout: float = 600.0):
        self.rank = rank
        self.world_size = world_size
        self.conns = conns
        self.timeout = timeout

    def _send(self, peer: int, obj) -> None:
        try:
            self.conns[peer].send(obj)
        except (BrokenPipeError, EOFError, OSError):
            raise PipelineAbort(peer, "connection lost") from None

    def _recv(self, peer: int):
        conn = self.conns[peer]
        try:
            if not conn.poll(self.timeout):
                raise PipelineAbort(peer, "collective timed out")
            msg = conn.recv()
        except (EOFError, OSError):
            raise PipelineAbort(peer, "connection lost") from None
        if isinstance(msg, tuple) and msg and msg[0] == "__abort__":
            raise PipelineAbort(msg[1], "peer failed")
        return msg

    def abort(self) -> None:
        for peer in self.conns:
            try:
                self.conns[peer].send(("__abort__", self.rank))
            except (BrokenPipeError, EOFError, OSError):
                pass

    def gather(self, obj, root: int = 0):
        if root != 0:
            raise ValueError("pipe transport gathers at rank 0 only")
        if self.rank == 0:
            return [obj] + [self._recv(p) for p in range(1, self.world_size)]
        self._send(0, obj)
        return None

    def bcast(self, obj, root: int = 0):
        if root != 0:
            raise ValueError("pipe transport broadcasts from rank 0 only")
        if self.rank == 0:
            for p in range(1, self.world_size):
                self._send(p, obj)
            return obj
        return self._recv(0)

    def allgather(self, obj) -> list:
        return self.bcast(self.gather(obj))


@dataclass
class RankContext:
    rank_id: int
    world_size: int
    transport: object

    def __post_init__(self):
        if not 0 <= self.rank_id < self.world_size:
            raise ValueError("rank id out of range")


def allreduce_minmax(local, ctx: RankContext) -> tuple[int, int]:
    """Global (min t_min, max t_max); ``local`` may be None for a rank with no events."""
    parts = [p for p in ctx.transport.allgather(local) if p is not None]
    if not parts:
        raise EmptyTraceError("no rank holds any events")
    return min(p[0] for p in parts), max(p[1] for p in parts)


# --------------------------------------------------------------------------
# bin partitioning and worker pool

@dataclass(frozen=True)
class WorkAssignment:
    rank_id: int
    bin_lo: int
    bin_hi: int  # exclusive
    worker_count: int = 1

    @property
    def bin_ids(self) -> range:
        return range(self.bin_lo, self.bin_hi)

    def __len__(self):
        return self.bin_hi - self.bin_lo


def partition_bins(bin_count: int, world_size: int, worker_count: int = 1) -> list[WorkAssignment]:
    if bin_count < 0 or world_size < 1:
        raise ValueError("need bin_count >= 0 and world_size >= 1")
    base, extra = divmod(bin_count, world_size)
    out, lo = [], 0
    for r in range(world_size):
        size = base + (1 if r < extra else 0)
        out.append(WorkAssignment(r, lo, lo + size, worker_count))
        lo += size
    return out


@dataclass(frozen=True)
class BinFailure:
    bin_id: int
    error: str


@dataclass
class PoolResult:
    results: list  # task outputs for successful bins, by bin id
    failures: list  # BinFailure, by bin id

    @property
    def status(self) -> str:
        return "partial" if self.failures else "ok"


_WORKER_TASK = None


def _init_worker(task) -> None:
    global _WORKER_TASK
    _WORKER_TASK = task


def _run_bins(task, lo: int, hi: int) -> list:
    out = []
    for b in range(lo, hi):
        try:
            out.append((b, True, task(b)))
        except Exception as exc:  # isolate one bad bin from the rest
            out.append((b, False, f"{type(exc).__name__}: {exc}"))
    return out


def _run_chunk(lo: int, hi: int) -> list:
    return _run_bins(_WORKER_TASK, lo, hi)


def _chunks(lo: int, hi: int, n: int) -> list[tuple[int, int]]:
    size = hi - lo
    n = max(1, min(n, size))
    base, extra = divmod(size, n)
    out, a = [], lo
    for i in range(n):
        b = a + base + (1 if i < extra else 0)
        out.append((a, b))
        a = b
    return out


def run_worker_pool(assignment: WorkAssignment, task, chunks_per_worker: int = 4) -> PoolResult:
    """Apply ``task(bin_id)`` to every assigned bin; output ordered by bin id.

    ``task`` must be picklable; it is shipped once to each worker process.
    A single worker runs in the calling process.
    """
    lo, hi = assignment.bin_lo, assignment.bin_hi
    W = assignment.worker_count
    raw: list = []
    if hi <= lo:
        pass
    elif W == 1:
        raw = _run_bins(task, lo, hi)
    else:
        chunks = _chunks(lo, hi, W * chunks_per_worker)
        ctx = mp.get_context(POOL_START_METHOD)
        if POOL_START_METHOD == "forkserver":
            ctx.set_forkserver_preload([__name__])  # workers fork with numpy already imported
        with ProcessPoolExecutor(max_workers=min(W, len(chunks)), mp_context=ctx,
                                 initializer=_init_worker, initargs=(task,)) as ex:
            futures = [(a, b, ex.submit(_run_chunk, a, b)) for a, b in chunks]
            for a, b, fut in futures:
                try:
                    raw.extend(fut.result())
                except BrokenProcessPool as exc:
                    raw.extend((x, False, f"worker died: {exc}") for x in range(a, b))
    raw.sort(key=lambda t: t[0])
    return PoolResult(
        results=[payload for _, ok, payload in raw if ok],
        failures=[BinFailure(b, payload) for b, ok, payload in raw if not ok],
    )


class BinStatsTask:
    """Summary statistics for bins ``lo..`` over values pre-sorted by bin."""

    def __init__(self, bin_lo: int, offsets: np.ndarray, values: np.ndarray):
        self.bin_lo = bin_lo
        self.offsets = offsets
        self.values = values

    def __call__(self, bin_id: int) -> BinSummary:
        i = bin_id - self.bin_lo
        a, b = self.offsets[i], self.offsets[i + 1]
        return summarize_bin(self.values[a:b].tolist(), bin_id)


def filter_and_aggregate(local_results, k: int, ctx: RankContext):
    """Global top-K bin ids at rank 0 (None elsewhere, after an acknowledgment)."""
    local = list(local_results)
    keep = set(rank_bins(local, k))
    gathered = ctx.transport.gather([s for s in local if s.bin_id in keep], root=0)
    if ctx.rank_id == 0:
        top = rank_bins([s for part in gathered for s in part], k)
        ctx.transport.bcast("ack")
        return top
    ctx.transport.bcast(None)
    return None


# --------------------------------------------------------------------------
# pipeline

@dataclass
class TimingReport:
    world_size: int
    worker_count: int
    bin_count: int
    phases: dict  # phase -> seconds per rank
    total_seconds: float

    def to_dict(self) -> dict:
        return {
            "world_size": self.world_size,
            "worker_count": self.worker_count,
            "bin_count": self.bin_count,
            "phases": {p: self.phases[p] for p in PHASES},
            "total_seconds": self.total_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


@dataclass
class PipelineConfig:
    path: str
    format: str = "csv"
    time_unit: str = "ns"
    bin_width_ns: int = DEFAULT_BIN_WIDTH_NS
    k: int = DEFAULT_K
    target: str = "perf_variation"
    key_mode: str = "name_only"
    world_size: int = 1
    worker_count: int = 1
    transport: str = "inproc"
    match_window_ns: int = 1_000_000
    timeout_s: float = 600.0
    bin_metric: str = "target"  # or "duration": rank bins by raw kernel runtime

    def validate(self) -> None:
        if not Path(self.path).is_file():
            raise ValueError(f"input not found: {self.path}")
        if self.format not in ("csv", "jsonl"):
            raise ValueError(f"unknown format {self.format!r}")
        if self.time_unit not in ("ns", "ms"):
            raise ValueError(f"unknown time unit {self.time_unit!r}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if self.key_mode not in KEY_MODES:
            raise ValueError(f"unknown key mode {self.key_mode!r}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.bin_metric not in BIN_METRICS:
            raise ValueError(f"unknown bin metric {self.bin_metric!r}")
        for name in ("bin_width_ns", "k", "world_size", "worker_count"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.match_window_ns < 0:
            raise ValueError("match_window_ns must be >= 0")


@dataclass
class PipelineResult:
    top_k: list
    summaries: list  # BinSummary for every bin, by bin id
    records: RecordTable
    spec: BinSpec
    timing: TimingReport
    failures: list = field(default_factory=list)
    paracoords: list = field(default_factory=list)  # rows for kernels in top-K bins with a transfer
    info: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        return "partial" if self.failures else "ok"

    def top_records(self) -> RecordTable:
        return self.records.subset(np.isin(self.records.bin_id, self.top_k))


def _slice(n: int, rank: int, size: int) -> tuple[int, int]:
    base, extra = divmod(n, size)
    lo = rank * base + min(rank, extra)
    return lo, lo + base + (1 if rank < extra else 0)


def _local_range(table, rank: int, size: int):
    parts = []
    for starts, ends in ((table.kernels.start, table.kernels.end), (table.memcpys.start, table.memcpys.end)):
        lo, hi = _slice(len(starts), rank, size)
        if hi > lo:
            parts.append((int(starts[lo:hi].min()), int(ends[lo:hi].max())))
    if not parts:
        return None
    return min(p[0] for p in parts), max(p[1] for p in parts)


def _rank_main(ctx: RankContext, cfg: PipelineConfig):
    phases = {}
    t = time.perf_counter()

    # root parses once and broadcasts the columns; a parse error travels as a payload
    policy = MatchPolicy(window_ns=cfg.match_window_ns)
    payload = None
    if ctx.rank_id == 0:
        try:
            table = read_trace_table(cfg.path, cfg.format, time_unit=cfg.time_unit)
            payload = (table,) + compute_records(table, cfg.target, cfg.key_mode, policy)
        except Exception as exc:
            payload = exc
    if isinstance(payload, Exception):
        # peers may abort the world as soon as they see the error; keep ours regardless
        try:
            ctx.transport.bcast(payload)
        except PipelineAbort:
            pass
        raise payload
    payload = ctx.transport.bcast(payload)
    if isinstance(payload, Exception):
        raise PipelineAbort(0, f"root failed to load the trace: {payload}")
    table, records, info = payload
    phases["ingest"], t = time.perf_counter() - t, time.perf_counter()

    # every rank scans its own slice of the trace for the time range
    t_min, t_max = allreduce_minmax(_local_range(table, ctx.rank_id, ctx.world_size), ctx)
    phases["range-reduce"], t = time.perf_counter() - t, time.perf_counter()

    spec = BinSpec(t_min, t_max, cfg.bin_width_ns)
    mine = partition_bins(spec.bin_count, ctx.world_size, cfg.worker_count)[ctx.rank_id]
    records.bin_id = assign_bins(records.start_ns, spec)
    sel = np.flatnonzero((records.bin_id >= mine.bin_lo) & (records.bin_id < mine.bin_hi))
    sel = sel[np.argsort(records.bin_id[sel], kind="stable")]
    if cfg.bin_metric == "target":
        values = records.target[sel]
    else:
        ref = records.event_ref[sel]
        values = (table.kernels.end[ref] - table.kernels.start[ref]).astype(float)
    offsets = np.searchsorted(records.bin_id[sel], np.arange(mine.bin_lo, mine.bin_hi + 1))
    task = BinStatsTask(mine.bin_lo, offsets, values)
    phases["partition"], t = time.perf_counter() - t, time.perf_counter()

    pool = run_worker_pool(mine, task)
    phases["worker-compute"], t = time.perf_counter() - t, time.perf_counter()

    top = filter_and_aggregate(pool.results, cfg.k, ctx)
    all_results = ctx.transport.gather(pool.results)
    all_failures = ctx.transport.gather(pool.failures)
    pc_rows = []
    if ctx.rank_id == 0:
        pc_rows = _detail_rows(table, records, top, policy, t_min)
    phases["aggregate"] = time.perf_counter() - t
    all_phases = ctx.transport.gather(phases)
    if ctx.rank_id != 0:
        return None
    summaries = [s for part in all_results for s in part]
    failures = [f for part in all_failures for f in part]
    failed = {f.bin_id for f in failures}
    timing = TimingReport(
        world_size=ctx.world_size, worker_count=cfg.worker_count, bin_count=spec.bin_count,
        phases={p: [ph[p] for ph in all_phases] for p in PHASES}, total_seconds=0.0,
    )
    info["failed_bins"] = sorted(failed)
    return PipelineResult(top, summaries, records, spec, timing, failures, pc_rows, info)


def _detail_rows(table, records: RecordTable, top: list, policy: MatchPolicy, t0: int) -> list:
    """Parallel-coordinate rows for kernels in the top-K bins that have a linked transfer."""
    k, m = table.kernels, table.memcpys
    ki = records.event_ref[np.isin(records.bin_id, top)]
    ki = np.unique(ki)
    if len(ki) == 0 or len(m) == 0:
        return []
    rep = _match_arrays(k.start[ki], k.end[ki], k.rank[ki], k.corr[ki], k.has_corr[ki],
                        m.start, m.end, m.rank, m.corr, m.has_corr, policy)
    if not rep.pairs:
        return []
    pairs = np.array(rep.pairs, dtype=np.int64)
    kk, mm = ki[pairs[:, 0]], pairs[:, 1]
    kdur = k.end[kk] - k.start[kk]
    stall = np.abs(kdur - (m.end[mm] - m.start[mm]))
    return paracoords_rows(k.name[kk], k.start[kk], kdur, m.kind[mm], m.nbytes[mm], stall, t0)


def _thread_rank(ctx, cfg, world, outputs, errors):
    try:
        outputs[ctx.rank_id] = _rank_main(ctx, cfg)
    except PipelineAbort as exc:
        errors[ctx.rank_id] = exc
        world.fail(exc.rank_id if exc.rank_id is not None else ctx.rank_id)
    except BaseException as exc:
        errors[ctx.rank_id] = exc
        world.fail(ctx.rank_id)


def _process_rank(rank, size, conns, cfg, result_conn):
    transport = PipeTransport(rank, size, conns, cfg.timeout_s)
    try:
        out = _rank_main(RankContext(rank, size, transport), cfg)
        result_conn.send(("ok", out))
    except BaseException as exc:
        transport.abort()
        try:
            result_conn.send(("error", exc, traceback.format_exc()))
        except Exception:
            result_conn.send(("error", RuntimeError(repr(exc)), traceback.format_exc()))
    finally:
        result_conn.close()


def _raise_first(errors: dict) -> None:
    # an input/config error on any rank beats the aborts it caused elsewhere
    primary = [e for _, e in sorted(errors.items()) if not isinstance(e, PipelineAbort)]
    if primary:
        raise primary[0]
    raise next(e for _, e in sorted(errors.items()))


def _run_inproc(cfg: PipelineConfig) -> PipelineResult:
    transports = ThreadTransport.create(cfg.world_size, cfg.timeout_s)
    world = transports[0].world
    outputs, errors = {}, {}
    threads = [
        threading.Thread(target=_thread_rank, name=f"rank-{r}",
                         args=(RankContext(r, cfg.world_size, transports[r]), cfg, world, outputs, errors))
        for r in range(cfg.world_size)
    ]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        _raise_first(errors)
    return outputs[0]


def _run_processes(cfg: PipelineConfig) -> PipelineResult:
    ctx = mp.get_context("spawn")
    size = cfg.world_size
    conns: list[dict] = [dict() for _ in range(size)]
    for r in range(1, size):
        a, b = ctx.Pipe()
        conns[0][r], conns[r][0] = a, b
    procs, results = [], []
    for r in range(size):
        recv, send = ctx.Pipe(duplex=False)
        p = ctx.Process(target=_process_rank, args=(r, size, conns[r], cfg, send), name=f"rank-{r}")
        p.start()
        send.close()
        procs.append(p)
        results.append(recv)
    for d in conns:
        for c in d.values():
            c.close()
    outputs, errors = {}, {}
    for r, (p, recv) in enumerate(zip(procs, results)):
        try:
            if recv.poll(cfg.timeout_s):
                msg = recv.recv()
                if msg[0] == "ok":
                    outputs[r] = msg[1]
                else:
                    errors[r] = msg[1]
            else:
                errors[r] = PipelineAbort(r, "no result before timeout")
        except EOFError:
            errors[r] = PipelineAbort(r, "rank process exited without a result")
    for p in procs:
        p.join(timeout=5)
        if p.is_alive():
            p.terminate()
    if errors:
        _raise_first(errors)
    return outputs[0]


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Range reduction, partition, pooled bin statistics and top-K merge for one dataset."""
    cfg.validate()
    t0 = time.perf_counter()
    result = _run_inproc(cfg) if cfg.transport == "inproc" else _run_processes(cfg)
    result.timing.total_seconds = time.perf_counter() - t0
    return result
