"""Signed, weighted causal graphs over trace features.

Discovery is a PC-style skeleton search with Fisher-z partial-correlation
tests; edges are oriented with the profiler feature taxonomy as background
knowledge (launch configuration -> temporal -> memory system -> target), and
edges into the target are weighted by their share of the absolute
standardized regression coefficients.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .metrics import RecordTable
from .trace_model import ColumnMap, default_column_map

TIER_OF_GROUP = {"launch_config": 1, "temporal": 2, "memory_system": 3}
UNKNOWN_TIER = 2
TARGET_TIER = 4
RIDGE = 1e-8
COND_LIMIT = 1e12


class InsufficientSamplesError(ValueError):
    pass


class ConstantColumnError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    columns: list
    rows: np.ndarray
    target: np.ndarray
    target_name: str
    dropped_columns: dict = field(default_factory=dict)
    dropped_rows: int = 0

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    sign: int = 1
    weight_percent: float = 0.0
    directed: bool = True


@dataclass
class CausalGraph:
    target: str
    nodes: list  # (name, tier), sorted by name
    edges: list  # Edge, sorted by (src, dst)
    notes: list = field(default_factory=list)

    def parents(self, node: str | None = None) -> list[str]:
        node = node or self.target
        return sorted(e.src for e in self.edges if e.directed and e.dst == node)

    def target_edges(self) -> list[Edge]:
        return [e for e in self.edges if e.directed and e.dst == self.target]

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "nodes": [{"name": n, "tier": t} for n, t in self.nodes],
            "edges": [
                {"from": e.src, "to": e.dst, "sign": e.sign,
                 "weight_percent": e.weight_percent, "directed": e.directed}
                for e in self.edges
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def validate(self) -> None:
        tiers = dict(self.nodes)
        seen = set()
        for e in self.edges:
            if e.src == e.dst:
                raise ValueError(f"self loop on {e.src}")
            pair = frozenset((e.src, e.dst))
            if pair in seen:
                raise ValueError(f"duplicate edge {e.src}-{e.dst}")
            seen.add(pair)
            if e.directed and tiers[e.src] > tiers[e.dst]:
                raise ValueError(f"edge {e.src}->{e.dst} against tier order")
            if not 0.0 <= e.weight_percent <= 100.0:
                raise ValueError("weight out of range")
        if max(tiers.values()) != tiers[self.target]:
            raise ValueError("target tier is not maximal")
        into = self.target_edges()
        if into and abs(sum(e.weight_percent for e in into) - 100.0) > 1e-9:
            raise ValueError("weights into target do not sum to 100")


# --------------------------------------------------------------------------
# matrix preparation

def build_feature_matrix(records, feature_allowlist=None, min_coverage: float = 0.99) -> FeatureMatrix:
    """Assemble a complete-case matrix from records.

    Keeps features present in at least ``min_coverage`` of the records, drops
    rows missing any kept feature, then drops constant columns.
    """
    table = records if isinstance(records, RecordTable) else RecordTable.from_records(list(records))
    n0 = len(table)
    dropped: dict = {}
    names = sorted(table.features)
    if feature_allowlist is not None:
        allow = set(feature_allowlist)
        for nm in names:
            if nm not in allow:
                dropped[nm] = "not allowlisted"
        names = [nm for nm in names if nm in allow]
    kept = []
    for nm in names:
        present = int(np.count_nonzero(~np.isnan(table.features[nm])))
        if n0 and present >= min_coverage * n0:
            kept.append(nm)
        else:
            dropped[nm] = f"present in {present}/{n0} records"
    target = np.asarray(table.target, dtype=float)
    mask = np.isfinite(target)
    for nm in kept:
        mask &= np.isfinite(table.features[nm])
    rows = (np.column_stack([table.features[nm][mask] for nm in kept])
            if kept else np.zeros((int(mask.sum()), 0)))
    target = target[mask]
    final = []
    for j, nm in enumerate(kept):
        col = rows[:, j]
        if len(col) == 0 or np.all(col == col[0]):
            dropped[nm] = "zero variance"
        else:
            final.append(j)
    m = FeatureMatrix(
        columns=[kept[j] for j in final],
        rows=rows[:, final],
        target=target,
        target_name=table.target_name,
        dropped_columns=dropped,
        dropped_rows=n0 - int(mask.sum()),
    )
    if m.n < m.p + 4:
        raise InsufficientSamplesError(f"n={m.n} < p+4={m.p + 4}")
    return m


def standardize(m: FeatureMatrix) -> FeatureMatrix:
    def z(col, name):
        sd = col.std(ddof=1) if len(col) > 1 else 0.0
        if not sd > 0:
            raise ConstantColumnError(f"column {name!r} is constant")
        return (col - col.mean()) / sd

    rows = np.empty_like(m.rows, dtype=float)
    for j, nm in enumerate(m.columns):
        rows[:, j] = z(m.rows[:, j], nm)
    return FeatureMatrix(list(m.columns), rows, z(m.target, m.target_name), m.target_name,
                         dict(m.dropped_columns), m.dropped_rows)


# --------------------------------------------------------------------------
# conditional independence

_NORMAL = NormalDist()


def fisher_z_test(r: float, n: int, cond_size: int, alpha: float) -> bool:
    """True when the partial correlation r is judged zero at level alpha."""
    dof = n - cond_size - 3
    if dof < 1:
        raise ValueError(f"n - cond_size - 3 = {dof} < 1")
    if not abs(r) < 1:
        return False
    stat = math.sqrt(dof) * abs(math.atanh(r))
    return stat <= _NORMAL.inv_cdf(1 - alpha / 2)


def partial_correlation(corr: np.ndarray, i: int, j: int, cond: Sequence[int],
                        warnings: list | None = None) -> float:
    """rho(i, j | cond) from the inverse of the correlation submatrix."""
    if not cond:
        return float(corr[i, j])
    idx = [i, j, *cond]
    sub = corr[np.ix_(idx, idx)]
    cond_no = np.linalg.cond(sub)
    if not np.isfinite(cond_no) or cond_no > COND_LIMIT:
        if warnings is not None:
            warnings.append(f"singular correlation submatrix for {idx}; ridge {RIDGE}")
        sub = sub + RIDGE * np.eye(len(idx))
    prec = np.linalg.inv(sub)
    denom = math.sqrt(prec[0, 0] * prec[1, 1])
    return float(np.clip(-prec[0, 1] / denom, -1.0, 1.0))


@dataclass
class Skeleton:
    nodes: list
    edges: set  # sorted (a, b) tuples
    sepsets: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    n_tests: int = 0

    def adjacent(self, a: str, b: str) -> bool:
        return tuple(sorted((a, b))) in self.edges


def pc_skeleton(m: FeatureMatrix, alpha: float = 0.05, max_cond: int = 3) -> Skeleton:
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if max_cond < 0:
        raise ValueError("max_cond must be >= 0")
    names = [*m.columns, m.target_name]
    data = np.column_stack([m.rows, m.target])
    corr = np.corrcoef(data, rowvar=False) if data.shape[1] > 1 else np.ones((1, 1))
    pos = {nm: i for i, nm in enumerate(names)}
    nodes = sorted(names)
    adj = {a: set(nodes) - {a} for a in nodes}
    sk = Skeleton(nodes=nodes, edges=set())

    for level in range(max_cond + 1):
        if m.n - level - 3 < 1:
            break
        # adjacency frozen per level so removal order cannot matter
        frozen = {a: sorted(adj[a]) for a in nodes}
        if all(len(frozen[a]) - 1 < level for a in nodes):
            break
        for a, b in combinations(nodes, 2):
            if b not in adj[a]:
                continue
            removed = False
            for x, y in ((a, b), (b, a)):
                cands = [c for c in frozen[x] if c != y]
                for cond in combinations(cands, level):
                    r = partial_correlation(corr, pos[x], pos[y], [pos[c] for c in cond], sk.warnings)
                    sk.n_tests += 1
                    if fisher_z_test(r, m.n, level, alpha):
                        adj[a].discard(b)
                        adj[b].discard(a)
                        sk.sepsets[(a, b)] = tuple(cond)
                        removed = True
                        break
                if removed:
                    break
    sk.edges = {(a, b) for a, b in combinations(nodes, 2) if b in adj[a]}
    return sk


# --------------------------------------------------------------------------
# orientation and weights

def feature_tiers(columns: Sequence[str], target_name: str, column_map: ColumnMap | None = None) -> dict:
    cmap = column_map or default_column_map()
    tiers = {c: TIER_OF_GROUP.get(cmap.group_of(c), UNKNOWN_TIER) for c in columns}
    tiers[target_name] = TARGET_TIER
    return tiers


def orient_edges(skeleton: Skeleton, tiers: dict, target: str | None = None) -> CausalGraph:
    missing = [n for n in skeleton.nodes if n not in tiers]
    if missing:
        raise ValueError(f"nodes without a tier: {missing}")
    top = max(tiers[n] for n in skeleton.nodes)
    at_top = [n for n in skeleton.nodes if tiers[n] == top]
    if target is None:
        if len(at_top) != 1:
            raise ValueError("target tier is not unique")
        target = at_top[0]
    elif at_top != [target]:
        raise ValueError("target must hold the unique maximal tier")
    edges = []
    for a, b in sorted(skeleton.edges):
        ta, tb = tiers[a], tiers[b]
        if ta == tb:
            edges.append(Edge(a, b, directed=False))
        elif ta < tb:
            edges.append(Edge(a, b))
        else:
            edges.append(Edge(b, a))
    edges.sort(key=lambda e: (e.src, e.dst))
    return CausalGraph(target=target, nodes=[(n, tiers[n]) for n in skeleton.nodes], edges=edges)


def estimate_weights(g: CausalGraph, m: FeatureMatrix) -> CausalGraph:
    """Sign and percentage weight for each parent of the target (m standardized)."""
    col = {nm: j for j, nm in enumerate(m.columns)}
    notes = list(g.notes)
    parents = g.parents()
    n = m.n
    coef: dict = {}
    if parents:
        X = m.rows[:, [col[p] for p in parents]]
        R = X.T @ X / (n - 1)
        rxy = X.T @ m.target / (n - 1)
        if np.linalg.cond(R) > COND_LIMIT:
            notes.append(f"collinear parents {parents}; ridge {RIDGE}")
            R = R + RIDGE * np.eye(len(parents))
        beta = np.linalg.solve(R, rxy)
        coef = dict(zip(parents, beta.tolist()))
    else:
        notes.append("target has no parents; graph left unweighted")
    total = sum(abs(b) for b in coef.values())

    def corr_sign(a, b):
        if a == g.target or b == g.target:
            other = b if a == g.target else a
            r = float(np.dot(m.rows[:, col[other]], m.target))
        else:
            r = float(np.dot(m.rows[:, col[a]], m.rows[:, col[b]]))
        return 1 if r >= 0 else -1

    edges = []
    for e in g.edges:
        if e.directed and e.dst == g.target:
            b = coef[e.src]
            if total > 0:
                w = 100.0 * (abs(b) / total)  # ratio first keeps w <= 100
            else:
                # every coefficient exactly zero: split evenly so shares still sum to 100
                w = 100.0 / len(coef)
            edges.append(Edge(e.src, e.dst, 1 if b >= 0 else -1, w, True))
        else:
            edges.append(Edge(e.src, e.dst, corr_sign(e.src, e.dst), 0.0, e.directed))
    return CausalGraph(g.target, list(g.nodes), edges, notes)


def learn_graph(m: FeatureMatrix, alpha: float = 0.05, max_cond: int = 3,
                tiers: dict | None = None) -> CausalGraph:
    """standardize -> skeleton -> orient -> weights for one matrix."""
    z = standardize(m)
    sk = pc_skeleton(z, alpha, max_cond)
    if tiers is None:
        tiers = feature_tiers(z.columns, z.target_name)
    g = orient_edges(sk, tiers, z.target_name)
    g.notes.extend(sk.warnings)
    g = estimate_weights(g, z)
    return g


@dataclass
class CausalParams:
    alpha: float = 0.05
    max_cond: int = 3
    min_coverage: float = 0.99
    feature_allowlist: frozenset | None = None
    column_map: ColumnMap | None = None


@dataclass
class AnalysisResult:
    graphs: list  # (scope key, CausalGraph)
    skipped: list = field(default_factory=list)
    dropped_columns: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.graphs)

    def __len__(self):
        return len(self.graphs)

    def report(self) -> dict:
        return {
            "graphs": [k for k, _ in self.graphs],
            "skipped": self.skipped,
            "dropped_columns": self.dropped_columns,
            "warnings": {k: g.notes for k, g in self.graphs if g.notes},
        }


def analyze(records, scope: str = "per_kernel", params: CausalParams | None = None) -> AnalysisResult:
    params = params or CausalParams()
    table = records if isinstance(records, RecordTable) else RecordTable.from_records(list(records))
    if len(table) == 0:
        raise ValueError("no records to analyze")
    if scope == "per_kernel":
        order: dict = {}
        for i, nm in enumerate(table.kernel_name):
            order.setdefault(nm, []).append(i)
        scopes = [(str(nm), np.array(idx)) for nm, idx in order.items()]
    elif scope == "whole_dataset":
        scopes = [("all", np.arange(len(table)))]
    else:
        raise ValueError(f"unknown scope {scope!r}")

    result = AnalysisResult(graphs=[])
    for key, idx in scopes:
        sub = table.subset(idx)
        try:
            m = build_feature_matrix(sub, params.feature_allowlist, params.min_coverage)
            tiers = feature_tiers(m.columns, m.target_name, params.column_map)
            g = learn_graph(m, params.alpha, params.max_cond, tiers)
        except (InsufficientSamplesError, ConstantColumnError) as exc:
            result.skipped.append({"scope": key, "n": len(sub), "reason": str(exc)})
            continue
        if m.dropped_columns:
            result.dropped_columns[key] = m.dropped_columns
        result.graphs.append((key, g))
    return result


def records_from_matrix(columns: Sequence[str], rows: np.ndarray, target: np.ndarray,
                        target_name: str, kernel_name: str = "all") -> RecordTable:
    """Wrap a plain matrix as a record table (for the causal-only entry point)."""
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[0]
    return RecordTable(
        target_name=target_name,
        event_ref=np.arange(n, dtype=np.int64),
        kernel_name=np.full(n, kernel_name, dtype=object),
        target=np.asarray(target, dtype=float),
        features={c: rows[:, j] for j, c in enumerate(columns)},
        start_ns=np.zeros(n, dtype=np.int64),
    )
