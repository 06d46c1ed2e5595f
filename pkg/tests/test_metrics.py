import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracecausal.metrics import (
    RecordTable, compute_records, group_kernels, kernel_variability, match_transfers,
    match_transfers_report, memory_stall, variability_records,
)
from tracecausal.trace_model import KernelEvent, MemcpyEvent, TraceTable


def K(name="k1", start=0, dur=10, **kw):
    return KernelEvent(name, kw.pop("rank", 0), start, start + dur, **kw)


def test_grouping_examples():
    (g,) = group_kernels([K(), K(), K()])
    assert g.n == 3
    gs = group_kernels([K("k1"), K("k2"), K("k1")])
    assert [g.key for g in gs] == [("k1",), ("k2",)]
    assert [g.n for g in gs] == [2, 1]
    gs = group_kernels([K(grid=(1, 1, 1)), K(grid=(2, 1, 1)), K(grid=(1, 1, 1))], "name_plus_launch")
    assert [g.indices for g in gs] == [[0, 2], [1]]


@pytest.mark.parametrize("durs,want", [([7, 7, 7], [0, 0, 0]), ([10, 20, 30], [10, 0, 10]), ([13], [0])])
def test_variability_examples(durs, want):
    (g,) = group_kernels([K(dur=d) for d in durs])
    assert [r.target_value for r in kernel_variability(g)] == want


def test_memory_stall_examples():
    assert memory_stall(K(start=100, dur=50), MemcpyEvent(1, 0, 100, 150)) == 0
    assert memory_stall(K(dur=50), MemcpyEvent(1, 0, 90, 160)) == 20
    assert memory_stall(K(dur=0), MemcpyEvent(1, 0, 0, 9)) == 9


def test_match_examples():
    k = [K(start=100, dur=50, correlation_id=42)]
    m = [MemcpyEvent(1, 0, 0, 5, correlation_id=7), MemcpyEvent(1, 0, 900, 905, correlation_id=42)]
    rep = match_transfers_report(k, m)
    assert rep.pairs == [(0, 1)] and rep.by_rule["correlation"] == 1
    k = [K(start=100, dur=50)]
    m = [MemcpyEvent(1, 0, 300, 310), MemcpyEvent(1, 0, 90, 160)]
    assert match_transfers(k, m) == [(0, 1)]
    assert match_transfers(k, []) == []


def test_match_nearest_window_and_rank():
    k = [K(start=5_000_000, dur=0)]
    near = MemcpyEvent(1, 0, 5_400_000, 5_400_010)
    far = MemcpyEvent(1, 0, 7_000_000, 7_000_010)
    other_rank = MemcpyEvent(1, 0, 5_000_000, 5_000_010, rank_id=1)
    assert match_transfers(k, [far, other_rank, near]) == [(0, 2)]
    rep = match_transfers_report(k, [far])
    assert rep.pairs == [] and rep.unmatched == 1


def test_match_tie_goes_to_earlier_start_then_file_order():
    k = [K(start=100, dur=100)]
    m = [MemcpyEvent(1, 0, 150, 200), MemcpyEvent(1, 0, 50, 100 + 50), MemcpyEvent(1, 0, 50, 150)]
    # overlaps: 50, 50, 50 -> earliest start (50) then lower index
    assert match_transfers(k, m) == [(0, 1)]


@st.composite
def kernel_lists(draw, max_size=30):
    n = draw(st.integers(1, max_size))
    return [K(draw(st.sampled_from(["a", "b", "c"])), draw(st.integers(0, 10**9)),
              draw(st.integers(0, 10**7)), rank=draw(st.integers(0, 2)),
              correlation_id=draw(st.one_of(st.none(), st.integers(0, 20))))
            for _ in range(n)]


@st.composite
def memcpy_lists(draw, max_size=30):
    out = []
    for _ in range(draw(st.integers(0, max_size))):
        s = draw(st.integers(0, 10**9))
        out.append(MemcpyEvent(draw(st.sampled_from([1, 2, 8])), draw(st.integers(0, 2**30)), s,
                               s + draw(st.integers(0, 10**7)), draw(st.integers(0, 2)),
                               draw(st.one_of(st.none(), st.integers(0, 20)))))
    return out


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 10**12), min_size=1, max_size=200))
def test_signed_deviations_sum_to_zero(durs):
    (g,) = group_kernels([K(dur=d) for d in durs])
    mean = g.mean_duration_ns
    total = math.fsum(d - mean for d in durs)
    assert abs(total) <= 1e-6 * max(1.0, abs(mean) * len(durs))


@settings(max_examples=300, deadline=None)
@given(kernel_lists(), st.randoms(use_true_random=False))
def test_variability_permutation_invariant(kernels, rnd):
    def as_set(ks):
        return sorted((ks[r.event_ref].kernel_name, ks[r.event_ref].start_ns, ks[r.event_ref].end_ns,
                       r.target_value) for g in group_kernels(ks) for r in kernel_variability(g))
    shuffled = list(kernels)
    rnd.shuffle(shuffled)
    assert as_set(kernels) == as_set(shuffled)


@given(st.integers(0, 10**12), st.integers(0, 10**12))
def test_stall_symmetric(a, b):
    assert memory_stall(K(dur=a), MemcpyEvent(1, 0, 0, b)) == memory_stall(K(dur=b), MemcpyEvent(1, 0, 0, a))


def brute_match(kernels, memcpys, w=1_000_000):
    out = []
    for i, k in enumerate(kernels):
        if k.correlation_id is not None:
            c = [j for j, m in enumerate(memcpys) if m.correlation_id == k.correlation_id]
            if c:
                out.append((i, min(c, key=lambda j: (memcpys[j].start_ns, j))))
                continue
        same = [j for j, m in enumerate(memcpys) if m.rank_id == k.rank_id]
        ov = {j: min(k.end_ns, memcpys[j].end_ns) - max(k.start_ns, memcpys[j].start_ns) for j in same}
        pos = [j for j in same if ov[j] > 0]
        if pos:
            out.append((i, min(pos, key=lambda j: (-ov[j], memcpys[j].start_ns, j))))
            continue
        near = [j for j in same if abs(memcpys[j].start_ns - k.start_ns) <= w]
        if near:
            out.append((i, min(near, key=lambda j: (abs(memcpys[j].start_ns - k.start_ns), memcpys[j].start_ns, j))))
    return out


@settings(max_examples=400, deadline=None)
@given(kernel_lists(), memcpy_lists())
def test_matching_against_brute_force_and_deterministic(kernels, memcpys):
    pairs = match_transfers(kernels, memcpys)
    assert pairs == brute_match(kernels, memcpys)
    assert pairs == match_transfers(list(kernels), list(memcpys))
    assert len({i for i, _ in pairs}) == len(pairs)


@settings(max_examples=200, deadline=None)
@given(kernel_lists(), memcpy_lists(), st.sampled_from(["perf_variation", "memory_stall"]),
       st.sampled_from(["name_only", "name_plus_launch"]))
def test_columnar_route_equals_event_route(kernels, memcpys, target, key_mode):
    table, _ = compute_records(TraceTable.from_events(kernels, memcpys), target, key_mode)
    events = variability_records(kernels, memcpys, target, key_mode)
    assert table.serialize() == RecordTable.from_records(events).serialize() or (not events and len(table) == 0)
    assert [r.target_value for r in events] == table.target.tolist()
    assert all(v >= 0 for v in table.target)


def test_records_carry_features():
    k = [K(dur=10, grid=(4, 1, 1), extra_counters={"tcc_hit": 3.0}, defaulted=frozenset({"blockX"}))]
    (r,) = variability_records(k, [])
    assert r.features["gridX"] == 4.0 and r.features["tcc_hit"] == 3.0
    assert "blockX" not in r.features
    m = [MemcpyEvent(8, 4096, 0, 30)]
    (s,) = variability_records(k, m, "memory_stall")
    assert s.target_value == 20 and s.features["copyKind"] == 8.0 and s.features["bytes"] == 4096.0


def test_unknown_target_and_key_mode():
    with pytest.raises(ValueError):
        variability_records([K()], [], "latency")
    with pytest.raises(ValueError):
        group_kernels([K()], "by_colour")
    with pytest.raises(ValueError):
        compute_records(TraceTable.from_events([K()], []), "perf_variation", "by_colour")


def test_serialize_is_stable():
    rng = random.Random(3)
    ks = [K(rng.choice("ab"), rng.randrange(10**6), rng.randrange(10**4)) for _ in range(50)]
    t1, _ = compute_records(TraceTable.from_events(ks, []))
    t2, _ = compute_records(TraceTable.from_events(ks, []))
    assert t1.serialize() == t2.serialize()
    assert np.array_equal(t1.subset(t1.target > 0).target, t1.target[t1.target > 0])
