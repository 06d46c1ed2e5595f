"""Deterministic synthetic GPU traces with planted, known causal structure.

Every kernel run deviates from its kernel's nominal duration by a magnitude
that is linear in the standardized features named in the ScmSpec (plus
Gaussian noise), in a random direction. Linked memory transfers outlast their
kernel by a stall magnitude built the same way, with extra noise for
device-to-device copies.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

NS_PER_UNIT = 100.0  # ns of deviation per standardized unit
DEVICE_TO_DEVICE = 8

DEFAULT_SCM = {
    "perf_variation": {"gridX": 1.0, "blockX": 0.5, "dynamicSharedMemory": -0.5},
    "memory_stall": {"bytes": 1.0, "copyKind": 0.5},
    "noise": 1.0,
    "copy_kinds": {"1": 0.3, "2": 0.3, "8": 0.4},
    "memcpy_fraction": 1.0,
}

KERNEL_FEATURES = (
    "gridX", "gridY", "gridZ", "blockX", "blockY", "blockZ",
    "staticSharedMemory", "dynamicSharedMemory", "registersPerThread",
    "sq_waves", "tcc_hit", "tcc_miss", "tcp_pending_stall",
)
STALL_FEATURES = KERNEL_FEATURES + ("bytes", "copyKind")


@dataclass
class ScmSpec:
    perf_variation: dict = field(default_factory=dict)
    memory_stall: dict = field(default_factory=dict)
    noise: float = 1.0
    copy_kinds: dict = field(default_factory=lambda: {1: 0.3, 2: 0.3, 8: 0.4})
    memcpy_fraction: float = 1.0

    @classmethod
    def from_dict(cls, d: dict | None) -> "ScmSpec":
        d = dict(DEFAULT_SCM if d is None else d)
        if not any(k in d for k in ("perf_variation", "memory_stall", "noise", "copy_kinds", "memcpy_fraction")):
            d = {"perf_variation": d}  # bare {feature: coefficient} map
        spec = cls(
            perf_variation={k: float(v) for k, v in d.get("perf_variation", {}).items()},
            memory_stall={k: float(v) for k, v in d.get("memory_stall", {}).items()},
            noise=float(d.get("noise", 1.0)),
            copy_kinds={int(k): float(v) for k, v in d.get("copy_kinds", {"1": 0.3, "2": 0.3, "8": 0.4}).items()},
            memcpy_fraction=float(d.get("memcpy_fraction", 1.0)),
        )
        for name in spec.perf_variation:
            if name not in KERNEL_FEATURES:
                raise ValueError(f"cannot plant an effect of unknown feature {name!r}")
        for name in spec.memory_stall:
            if name not in STALL_FEATURES:
                raise ValueError(f"cannot plant an effect of unknown feature {name!r}")
        if not 0.0 <= spec.memcpy_fraction <= 1.0:
            raise ValueError("memcpy_fraction must be in [0, 1]")
        if not spec.copy_kinds or min(spec.copy_kinds.values()) < 0:
            raise ValueError("copy_kinds needs non-negative weights")
        return spec

    @classmethod
    def load(cls, path) -> "ScmSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _z(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return np.zeros_like(x, dtype=float) if sd == 0 else (x - x.mean()) / sd


def _magnitude(rng, feats: dict, coefs: dict, noise_sd) -> np.ndarray:
    n = len(next(iter(feats.values())))
    offset = 4.0 * math.sqrt(sum(c * c for c in coefs.values()) + float(np.max(noise_sd)) ** 2)
    units = offset + noise_sd * rng.standard_normal(n)
    for name, c in sorted(coefs.items()):
        units = units + c * _z(feats[name].astype(float))
    return np.abs(units) * NS_PER_UNIT


def generate_frame(n_events: int, n_kernels: int, duration_s: float, seed: int,
                   scm: ScmSpec | dict | None = None, rank: int = 0) -> pd.DataFrame:
    """Synthetic trace as a DataFrame in file layout (kernel rows, then memcpy rows)."""
    if n_events < 1 or n_kernels < 1 or duration_s <= 0:
        raise ValueError("n_events, n_kernels and duration_s must be positive")
    scm = scm if isinstance(scm, ScmSpec) else ScmSpec.from_dict(scm)
    rng = np.random.default_rng(seed)
    n = n_events
    span_ns = int(round(duration_s * 1e9))

    nominal = rng.integers(50_000, 500_000, size=n_kernels)
    names = np.array([f"kernel_{i:03d}" for i in range(n_kernels)], dtype=object)
    kid = rng.integers(0, n_kernels, size=n)
    start = np.sort(rng.integers(0, span_ns, size=n))

    f = {
        "gridX": rng.integers(1, 1025, size=n),
        "gridY": rng.integers(1, 65, size=n),
        "gridZ": np.ones(n, dtype=np.int64),
        "blockX": rng.choice([32, 64, 128, 256, 512, 1024], size=n),
        "blockY": rng.choice([1, 2, 4], size=n),
        "blockZ": np.ones(n, dtype=np.int64),
        "staticSharedMemory": rng.choice([0, 1024, 4096, 16384], size=n),
        "dynamicSharedMemory": 256 * rng.integers(0, 193, size=n),
        "registersPerThread": rng.integers(16, 129, size=n),
    }
    waves = f["gridX"] * f["blockX"] / 64.0
    f["sq_waves"] = np.round(waves * (1 + 0.05 * rng.standard_normal(n))).clip(min=1)
    f["tcc_hit"] = np.round(20 * f["sq_waves"] * rng.uniform(0.8, 1.2, size=n))
    f["tcc_miss"] = np.round(f["dynamicSharedMemory"] / 64.0 + 50 * rng.random(n))
    f["tcp_pending_stall"] = np.round(f["tcc_miss"] * rng.uniform(1.0, 3.0, size=n))

    mag = _magnitude(rng, f, scm.perf_variation, scm.noise)
    direction = rng.choice([-1.0, 1.0], size=n)
    kdur = np.round(nominal[kid] + direction * mag).astype(np.int64).clip(min=0)
    end = start + kdur

    linked = np.flatnonzero(rng.random(n) < scm.memcpy_fraction)
    kinds = np.array(sorted(scm.copy_kinds), dtype=np.int64)
    w = np.array([scm.copy_kinds[k] for k in kinds], dtype=float)
    copy_kind = rng.choice(kinds, size=len(linked), p=w / w.sum())
    nbytes = np.round(2.0 ** rng.uniform(12, 26, size=len(linked))).astype(np.int64)
    mfeats = {name: col[linked] for name, col in f.items()}
    mfeats["bytes"] = np.log2(nbytes.astype(float))
    mfeats["copyKind"] = (copy_kind == DEVICE_TO_DEVICE).astype(float)
    noise_sd = scm.noise * np.where(copy_kind == DEVICE_TO_DEVICE, 3.0, 1.0)
    stall = np.round(_magnitude(rng, mfeats, scm.memory_stall, noise_sd)).astype(np.int64) if len(linked) else np.zeros(0, np.int64)
    lead = rng.integers(0, 2_000, size=len(linked))
    m_start = np.maximum(start[linked] - lead, 0)
    m_end = m_start + kdur[linked] + stall

    def ints(values, rows, total):
        col = pd.array([pd.NA] * total, dtype="Int64")
        col[rows] = values
        return col

    nk, nm = n, len(linked)
    total = nk + nm
    krows = np.arange(nk)
    mrows = np.arange(nk, total)
    cols = {
        "event_type": np.array(["kernel"] * nk + ["memcpy"] * nm, dtype=object),
        "kernel_name": np.concatenate([names[kid], np.full(nm, "", dtype=object)]),
        "rank": np.full(total, rank, dtype=np.int64),
        "start": np.concatenate([start, m_start]),
        "end": np.concatenate([end, m_end]),
        "correlationId": np.concatenate([np.arange(1, nk + 1), linked + 1]),
    }
    for name in KERNEL_FEATURES:
        cols[name] = ints(f[name].astype(np.int64), krows, total)
    cols["copyKind"] = ints(copy_kind, mrows, total)
    cols["bytes"] = ints(nbytes, mrows, total)
    cols["streamId"] = ints(rng.integers(0, 4, size=nm), mrows, total)
    return pd.DataFrame(cols)


def write_frame(df: pd.DataFrame, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        df.to_csv(fh, index=False, lineterminator="\n")


def generate_trace(path, n_events: int, n_kernels: int = 8, duration_s: float = 10.0, seed: int = 0,
                   scm: ScmSpec | dict | None = None, rank: int = 0) -> Path:
    """Write a synthetic CSV trace; identical arguments give identical bytes."""
    write_frame(generate_frame(n_events, n_kernels, duration_s, seed, scm, rank), path)
    return Path(path)


@dataclass
class LinearScm:
    """Samples from a planted linear SCM over named features plus a target."""

    columns: list
    rows: np.ndarray
    target: np.ndarray
    target_name: str
    parents: dict  # feature -> coefficient on the target
    edges: set     # true skeleton as sorted name pairs


def sample_linear_scm(columns, n: int, seed: int, tiers: dict, n_parents: int = 3,
                      edge_prob: float = 0.2, beta_range=(0.5, 1.5), noise: float = 1.0,
                      target_name: str = "perf_variation") -> LinearScm:
    """Random tier-respecting linear DAG; every coefficient has |beta| in ``beta_range``.

    Features only depend on features of a strictly lower tier, and the target
    depends on ``n_parents`` randomly chosen features. All noise terms are
    N(0, noise^2).
    """
    rng = np.random.default_rng(seed)
    order = sorted(columns, key=lambda c: (tiers[c], c))
    lo, hi = beta_range

    def coef():
        return float(rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi))

    data, edges = {}, set()
    for i, c in enumerate(order):
        v = noise * rng.standard_normal(n)
        for d in order[:i]:
            if tiers[d] < tiers[c] and rng.random() < edge_prob:
                v = v + coef() * data[d]
                edges.add(tuple(sorted((c, d))))
        data[c] = v
    chosen = sorted(rng.choice(list(columns), size=n_parents, replace=False).tolist())
    parents = {p: coef() for p in chosen}
    y = noise * rng.standard_normal(n)
    for p in chosen:
        y = y + parents[p] * data[p]
        edges.add(tuple(sorted((p, target_name))))
    cols = list(columns)
    return LinearScm(cols, np.column_stack([data[c] for c in cols]), y, target_name, parents, edges)
