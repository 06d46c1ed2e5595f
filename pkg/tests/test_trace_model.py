import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracecausal.trace_model import (
    ColumnMap, IngestError, KernelEvent, MemcpyEvent, _TABLE, default_column_map, dump_events_jsonl,
    load_trace, read_trace_table, write_trace_csv,
)


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_empty_file_gives_no_events(tmp_path):
    assert load_trace(write(tmp_path, "event_type,kernel_name,start,end\n")) == ([], [])
    assert load_trace(write(tmp_path, "", "blank.csv")) == ([], [])


def test_missing_launch_fields_default_with_flag(tmp_path):
    p = write(tmp_path, "event_type,Kernel_Name,start,end\nkernel,saxpy,100,150\n")
    (k,), m = load_trace(p)
    assert m == []
    assert k.kernel_name == "saxpy" and k.duration_ns == 50
    assert k.grid == (1, 1, 1) and k.block == (1, 1, 1)
    assert {"gridX", "gridY", "gridZ", "blockX", "blockY", "blockZ"} <= k.defaulted
    assert k.launch_features() == {}


def test_memcpy_row(tmp_path):
    p = write(tmp_path, "event_type,copyKind,bytes,start,end\nmemcpy,8,4096,10,20\n")
    _, (m,) = load_trace(p)
    assert (m.copy_kind, m.bytes, m.duration_ns) == (8, 4096, 10)


def test_default_map_lookups():
    cm = default_column_map()
    assert cm.canonical("TCP_PENDING_STALL_CYCLES_sum") == "tcp_pending_stall"
    assert cm.group_of("tcp_pending_stall") == "memory_system"
    assert cm.canonical("Grid_Size") == "grid_size"
    assert cm.group_of("grid_size") == "launch_config"
    assert cm.canonical("runtime") == "runtime"
    assert cm.group_of("runtime") == "temporal"
    assert cm.canonical("TCC_HIT_sum") == "tcc_hit"
    assert cm.canonical("SQ_INSTS_VALU") == "sq_insts_valu"
    assert cm.canonical("Workgroup_Size") == "workgroup_size"


def test_default_map_is_injective_and_grouped():
    cm = default_column_map()
    canon = [cm.canonical(o) for o, _, _ in _TABLE]
    assert len(set(canon)) == len(canon)
    assert all(cm.group_of(c) in {"identification", "launch_config", "temporal", "memory_system"} for c in canon)


@given(st.dictionaries(st.text(min_size=1, max_size=5), st.sampled_from("abcdefgh"), min_size=2, max_size=8))
def test_column_map_rejects_collisions(entries):
    group = {c: "temporal" for c in entries.values()}
    if len(set(entries.values())) < len(entries):
        with pytest.raises(ValueError):
            ColumnMap(entries, group)
    else:
        ColumnMap(entries, group)


def test_counters_renamed_and_labels_kept(tmp_path):
    p = write(tmp_path, "event_type,kernel_name,start,end,TCC_HIT_sum,Device\n"
                        "kernel,k,0,5,12.5,gpu0\n")
    (k,), _ = load_trace(p)
    assert k.extra_counters == {"tcc_hit": 12.5}
    assert k.labels == {"Device": "gpu0"}


@pytest.mark.parametrize("text,match", [
    ("kernel_name,start,end\nk,0,1\n", "event_type"),
    ("event_type,kernel_name,end\nkernel,k,1\n", "start"),
    ("event_type,kernel_name,start,end\nkernel,k,0,1\nkernel,k,x,3\n", "row 2"),
    ("event_type,kernel_name,start,end\nkernel,k,0,1\nthing,k,0,1\n", "row 2"),
    ("event_type,kernel_name,start,end\nkernel,k,5,1\n", "row 1"),
    ("event_type,start,end\nmemcpy,0,1\n", "copyKind"),
    ("event_type,kernel_name,start,end\nkernel,k,0.5,1\n", "whole number"),
])
def test_ingest_errors(tmp_path, text, match):
    with pytest.raises(IngestError, match=match):
        read_trace_table(write(tmp_path, text))


def test_crlf_and_ms_conversion(tmp_path):
    p = write(tmp_path, "event_type,kernel_name,start,end\r\nkernel,k,1.5,2.000001\r\n")
    (k,), _ = load_trace(p, time_unit="ms")
    assert (k.start_ns, k.end_ns) == (1_500_000, 2_000_001)


def test_jsonl_matches_csv(tmp_path):
    c = write(tmp_path, "event_type,kernel_name,start,end,gridX,copyKind,bytes\n"
                        "kernel,k,0,10,4,,\nmemcpy,,2,9,,1,64\n")
    j = write(tmp_path, '{"event_type":"kernel","kernel_name":"k","start":0,"end":10,"gridX":4}\n'
                        '{"event_type":"memcpy","copyKind":1,"bytes":64,"start":2,"end":9}\n', "t.jsonl")
    assert load_trace(c) == load_trace(j, "jsonl")


names = st.text(alphabet="abcdefgh_", min_size=1, max_size=6)
small = st.integers(1, 64)


@st.composite
def kernel_events(draw):
    start = draw(st.integers(0, 10**12))
    dims = [draw(small) for _ in range(6)]
    return KernelEvent(
        kernel_name=draw(names), rank_id=draw(st.integers(0, 3)), start_ns=start,
        end_ns=start + draw(st.integers(0, 10**6)), grid=tuple(dims[:3]), block=tuple(dims[3:]),
        static_shared_mem=draw(st.integers(0, 4096)), dynamic_shared_mem=draw(st.integers(0, 4096)),
        registers_per_thread=draw(st.integers(0, 255)),
        correlation_id=draw(st.one_of(st.none(), st.integers(0, 10**6))),
        extra_counters=draw(st.dictionaries(st.sampled_from(["tcc_hit", "sq_waves"]),
                                            st.floats(0, 1e9, allow_nan=False))),
    )


@st.composite
def memcpy_events(draw):
    start = draw(st.integers(0, 10**12))
    return MemcpyEvent(
        copy_kind=draw(st.sampled_from([1, 2, 8])), bytes=draw(st.integers(0, 2**40)),
        start_ns=start, end_ns=start + draw(st.integers(0, 10**6)), rank_id=draw(st.integers(0, 3)),
        correlation_id=draw(st.one_of(st.none(), st.integers(0, 10**6))),
        stream_id=draw(st.one_of(st.none(), st.integers(0, 7))),
    )


def _normalise(kernels):
    # a counter column that is absent on every row cannot survive a round trip
    return [KernelEvent(**{**k.__dict__, "extra_counters": dict(k.extra_counters)}) for k in kernels]


@settings(max_examples=150, deadline=None)
@given(st.lists(kernel_events(), min_size=1, max_size=8), st.lists(memcpy_events(), max_size=8),
       st.sampled_from(["csv", "jsonl"]))
def test_round_trip(tmp_path_factory, kernels, memcpys, fmt):
    path = tmp_path_factory.mktemp("rt") / f"t.{fmt}"
    buf = io.StringIO()
    (write_trace_csv if fmt == "csv" else dump_events_jsonl)(kernels, memcpys, buf)
    path.write_text(buf.getvalue())
    k2, m2 = load_trace(path, fmt)
    assert k2 == _normalise(kernels)
    assert m2 == memcpys


def test_event_invariants():
    with pytest.raises(ValueError):
        KernelEvent("k", 0, 10, 5)
    with pytest.raises(ValueError):
        KernelEvent("k", 0, 0, 5, grid=(0, 1, 1))
    with pytest.raises(ValueError):
        MemcpyEvent(1, -1, 0, 1)
