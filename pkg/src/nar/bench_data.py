"""Record files, the enumerable synthetic search space and dataset splits."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .encoding import (DAG7_LAYOUT, DAG_INTERNAL_OPS, FIXED4_LAYOUT, IN_OP, OUT_OP,
                       ArchitectureRecord, Family, Layout, RecordError, longest_path_depths,
                       synth_layout, validate_record)


class RecordFileError(ValueError):
    """One or more lines of a record file are invalid."""

    def __init__(self, path, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"{path}: {len(problems)} invalid record(s): {lines}{more}")


class SpaceTooLarge(ValueError):
    def __init__(self, count: int, limit: int):
        super().__init__(f"synthetic space has {count} structures, budget is {limit}")
        self.count = count
        self.limit = limit


# --------------------------------------------------------------------------
# canonical keys
# --------------------------------------------------------------------------

def structure_key(adj: np.ndarray, ops: Sequence[int], family: Family = Family.DAG7) -> str:
    """Canonical adjacency+ops key; no isomorphism reduction."""
    if family is Family.FIXED4:
        return "e" + "".join(str(int(o)) for o in ops)
    v = adj.shape[0]
    bits = "".join(str(int(adj[i, j])) for i in range(v) for j in range(i + 1, v))
    return f"n{v}-{int(bits, 2) if bits else 0:x}-" + "".join(str(int(o)) for o in ops)


def prune(adj: np.ndarray, ops: Sequence[int]) -> tuple[np.ndarray, tuple[int, ...]] | None:
    """Drop nodes not on any input-to-output path; None if output is unreachable."""
    v = adj.shape[0]
    fwd = np.zeros(v, bool)
    fwd[0] = True
    for j in range(1, v):
        fwd[j] = bool((adj[:j, j] & fwd[:j]).any())
    bwd = np.zeros(v, bool)
    bwd[v - 1] = True
    for i in range(v - 2, -1, -1):
        bwd[i] = bool((adj[i, i + 1:] & bwd[i + 1:]).any())
    keep = fwd & bwd
    if not keep[0] or not keep[-1]:
        return None
    idx = np.flatnonzero(keep)
    return adj[np.ix_(idx, idx)].copy(), tuple(int(ops[i]) for i in idx)


def record_key(rec: ArchitectureRecord) -> str:
    if rec.family is Family.FIXED4:
        return structure_key(rec.adjacency, rec.edge_ops, Family.FIXED4)
    return structure_key(rec.adjacency, rec.node_ops, rec.family)


# --------------------------------------------------------------------------
# record files
# --------------------------------------------------------------------------

def record_to_json(rec: ArchitectureRecord) -> dict:
    d = {"id": rec.id, "family": rec.family.value,
         "adjacency": rec.adjacency.astype(int).tolist(),
         "node_ops": [int(o) for o in rec.node_ops],
         "cells": [{"flops": [float(x) for x in f], "params": [float(x) for x in p]}
                   for f, p in rec.cells],
         "total_flops": float(rec.total_flops), "total_params": float(rec.total_params),
         "accuracy": rec.accuracy}
    if rec.edge_ops is not None:
        d["edge_ops"] = [int(o) for o in rec.edge_ops]
    return d


def record_from_json(d: dict) -> ArchitectureRecord:
    try:
        fam = Family(d["family"])
        adj = np.asarray(d["adjacency"], dtype=np.int8)
        if adj.ndim != 2:
            raise RecordError("adjacency must be a nested 2-D array")
        cells = [(np.asarray(c["flops"], dtype=np.float64),
                  np.asarray(c["params"], dtype=np.float64)) for c in d.get("cells", [])]
        acc = d.get("accuracy")
        if acc is not None:
            acc = {str(k): float(v) for k, v in acc.items()}
        edge_ops = d.get("edge_ops")
        return ArchitectureRecord(
            id=str(d["id"]), family=fam, adjacency=adj,
            node_ops=tuple(int(o) for o in d.get("node_ops", [])), cells=cells,
            total_flops=float(d.get("total_flops", 0.0)),
            total_params=float(d.get("total_params", 0.0)), accuracy=acc,
            edge_ops=tuple(int(o) for o in edge_ops) if edge_ops is not None else None)
    except KeyError as e:
        raise RecordError(f"missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        raise RecordError(str(e)) from None


def write_records(path, records: Iterable[ArchitectureRecord], header: dict | None = None) -> None:
    """Line-delimited JSON; an optional first line ``{"space": {...}}`` describes a synthetic space."""
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"space": header}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(record_to_json(r)) + "\n")


def read_header(path) -> dict | None:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.strip():
        return None
    try:
        d = json.loads(first)
    except json.JSONDecodeError:
        return None
    return d.get("space") if isinstance(d, dict) else None


def layout_for(family: Family, header: dict | None = None) -> Layout:
    if family is Family.DAG7:
        return DAG7_LAYOUT
    if family is Family.FIXED4:
        return FIXED4_LAYOUT
    if not header:
        raise RecordError("SYNTH records need a space header with nodes/cells/max_edges")
    return synth_layout(int(header["nodes"]), int(header["cells"]), int(header["max_edges"]))


def load_records(path, family: Family | str | None = None) -> list[ArchitectureRecord]:
    """Load and validate every record; all invalid lines are reported together."""
    family = Family(family) if family is not None else None
    header = read_header(path)
    records: list[ArchitectureRecord] = []
    problems: list[tuple[int, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordFileError(path, [(lineno, f"unparseable JSON ({e.msg})")]) from None
            if lineno == 1 and isinstance(d, dict) and "space" in d:
                continue
            try:
                rec = record_from_json(d)
                if family is not None and rec.family is not family:
                    raise RecordError(f"family {rec.family.value}, expected {family.value}")
                validate_record(rec, layout_for(rec.family, header))
                if rec.id in seen:
                    raise RecordError(f"duplicate id {rec.id!r}")
            except RecordError as e:
                problems.append((lineno, str(e)))
                continue
            seen.add(rec.id)
            records.append(rec)
    if problems:
        raise RecordFileError(path, problems)
    return records


# --------------------------------------------------------------------------
# search spaces
# --------------------------------------------------------------------------

class RecordSpace:
    """A finite space of fully specified records with ground-truth accuracies."""

    def __init__(self, records: Sequence[ArchitectureRecord], layout: Layout,
                 metric: str = "validation"):
        self.records = list(records)
        self.layout = layout
        self.metric = metric
        self._by_key = {record_key(r): i for i, r in enumerate(self.records)}
        self._by_id = {r.id: i for i, r in enumerate(self.records)}
        acc = []
        for r in self.records:
            if not r.accuracy or metric not in r.accuracy:
                raise RecordError(f"{r.id}: no {metric!r} accuracy")
            acc.append(r.accuracy[metric])
        self.accuracies = np.asarray(acc, dtype=np.float64)
        # rank 1 = best; ties broken by id
        order = sorted(range(len(self.records)),
                       key=lambda i: (-self.accuracies[i], self.records[i].id))
        self._rank = np.empty(len(order), dtype=np.int64)
        self._rank[order] = np.arange(1, len(order) + 1)
        self._order = np.asarray(order, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def family(self) -> Family:
        return self.layout.family

    def index_of(self, rec_id: str) -> int:
        try:
            return self._by_id[rec_id]
        except KeyError:
            raise KeyError(f"unknown architecture id {rec_id!r}") from None

    def get(self, rec_id: str) -> ArchitectureRecord:
        return self.records[self.index_of(rec_id)]

    def resolve(self, adj: np.ndarray, ops: Sequence[int]) -> ArchitectureRecord | None:
        """Concrete record for a sampled structure, or None if it is not in the space."""
        if self.family is Family.FIXED4:
            i = self._by_key.get(structure_key(adj, ops, Family.FIXED4))
        else:
            pr = prune(adj, ops)
            if pr is None:
                return None
            i = self._by_key.get(structure_key(pr[0], pr[1], self.family))
        return None if i is None else self.records[i]

    def sample_uniform(self, rng: np.random.Generator) -> ArchitectureRecord:
        return self.records[int(rng.integers(len(self.records)))]

    def accuracy(self, rec_id: str) -> float:
        return float(self.accuracies[self.index_of(rec_id)])

    def true_rank(self, rec_id: str) -> tuple[int, float]:
        """(rank, permille) with rank 1 = best."""
        r = int(self._rank[self.index_of(rec_id)])
        return r, 1000.0 * r / len(self.records)

    def best(self) -> ArchitectureRecord:
        return self.records[int(self._order[0])]

    def top_ids(self, fraction: float) -> set[str]:
        n = max(1, int(math.floor(fraction * len(self.records))))
        return {self.records[i].id for i in self._order[:n]}


def true_rank(space: RecordSpace, rec_id: str) -> tuple[int, float]:
    return space.true_rank(rec_id)


# --------------------------------------------------------------------------
# synthetic space
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    nodes: int = 6
    max_edges: int = 7
    cells: int = 3
    seed: int = 0
    noise: float = 0.005
    budget: int = 50_000

    def layout(self) -> Layout:
        return synth_layout(self.nodes, self.cells, self.max_edges)


# base per-node cost for IN, conv1x1, conv3x3, maxpool, OUT (MFLOPs, K-params)
_BASE_FLOPS = {1: 0.0, 2: 12.0, 3: 38.0, 4: 2.0, 5: 3.0}
_BASE_PARAMS = {1: 0.0, 2: 6.0, 3: 20.0, 4: 0.0, 5: 1.5}


def _valid_graphs(n: int, max_edges: int) -> list[np.ndarray]:
    """Upper-triangular graphs on n nodes where every node lies on an IN->OUT path."""
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    out = []
    for m in range(n - 1, min(max_edges, len(pairs)) + 1):
        for sub in itertools.combinations(pairs, m):
            has_pred = [False] * n
            has_succ = [False] * n
            for i, j in sub:
                has_succ[i] = True
                has_pred[j] = True
            if all(has_pred[1:]) and all(has_succ[:-1]):
                a = np.zeros((n, n), dtype=np.int8)
                for i, j in sub:
                    a[i, j] = 1
                out.append(a)
    return out


def count_structures(spec: SyntheticSpec) -> int:
    k = len(DAG_INTERNAL_OPS)
    return sum(len(_valid_graphs(n, spec.max_edges)) * k ** (n - 2)
               for n in range(2, spec.nodes + 1))


class SyntheticSpace(RecordSpace):
    def __init__(self, spec: SyntheticSpec, records, features: np.ndarray, weights: np.ndarray):
        super().__init__(records, spec.layout(), "validation")
        self.spec = spec
        self.features = features
        self.weights = weights

    def header(self) -> dict:
        return asdict(self.spec)


def _cost_tables(rng: np.random.Generator, nodes: int, cells: int):
    depth_jitter = rng.uniform(0.9, 1.1, size=(6, nodes))
    cell_flops = rng.uniform(0.9, 1.1, size=cells)
    cell_params = 2.0 ** np.arange(cells) * rng.uniform(0.9, 1.1, size=cells)

    def flops(op, depth, cell):
        return _BASE_FLOPS[op] * (1 + 0.1 * depth) * depth_jitter[op, depth] * cell_flops[cell]

    def params(op, depth, cell):
        return _BASE_PARAMS[op] * depth_jitter[op, depth] * cell_params[cell]

    return flops, params


def _oracle_weights(rng: np.random.Generator) -> np.ndarray:
    # counts of conv1x1, conv3x3, maxpool; longest path; total FLOPs; total params
    sign = np.array([1.0, 1.0, -1.0, 1.0, 1.0, 0.5])
    return sign * rng.uniform(0.5, 1.5, size=6)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticSpace:
    """Enumerate every structure under the budget and attach the seeded oracle."""
    total = count_structures(spec)
    if total > spec.budget:
        raise SpaceTooLarge(total, spec.budget)
    rng = np.random.default_rng(spec.seed)
    flops_of, params_of = _cost_tables(rng, spec.nodes, spec.cells)
    weights = _oracle_weights(rng)
    records: list[ArchitectureRecord] = []
    feats = []
    v = spec.nodes
    for n in range(2, v + 1):
        for adj in _valid_graphs(n, spec.max_edges):
            depth = longest_path_depths(adj).astype(int)
            for inner in itertools.product(DAG_INTERNAL_OPS, repeat=n - 2):
                ops = (IN_OP,) + inner + (OUT_OP,)
                cells = []
                for c in range(spec.cells):
                    f = np.array([flops_of(o, depth[i], c) for i, o in enumerate(ops)])
                    p = np.array([params_of(o, depth[i], c) for i, o in enumerate(ops)])
                    cells.append((f, p))
                tf = float(sum(f.sum() for f, _ in cells))
                tp = float(sum(p.sum() for _, p in cells))
                records.append(ArchitectureRecord(
                    id=structure_key(adj, ops, Family.SYNTH), family=Family.SYNTH,
                    adjacency=adj, node_ops=ops, cells=cells, total_flops=tf,
                    total_params=tp))
                feats.append([inner.count(2), inner.count(3), inner.count(4),
                              depth[-1], tf, tp])
    feats = np.asarray(feats, dtype=np.float64)
    z = (feats - feats.mean(axis=0)) / feats.std(axis=0)
    score = z @ weights
    score = (score - score.mean()) / score.std()
    noise = rng.uniform(-spec.noise, spec.noise, size=len(records))
    acc = 1.0 / (1.0 + np.exp(-(2.0 + score + noise)))
    for r, a in zip(records, acc):
        r.accuracy = {"validation": float(a), "test": float(a)}
    return SyntheticSpace(spec, records, feats, weights)


def oracle_redraw(space: SyntheticSpace, noise_seed: int) -> np.ndarray:
    """Oracle accuracies with the structural weights fixed and the noise redrawn."""
    z = (space.features - space.features.mean(axis=0)) / space.features.std(axis=0)
    score = z @ space.weights
    score = (score - score.mean()) / score.std()
    noise = np.random.default_rng(noise_seed).uniform(-space.spec.noise, space.spec.noise,
                                                      size=len(space))
    return 1.0 / (1.0 + np.exp(-(2.0 + score + noise)))


def space_from_records(records, header: dict | None = None, metric: str = "validation") -> RecordSpace:
    if not records:
        raise RecordError("empty record set")
    return RecordSpace(records, layout_for(records[0].family, header), metric)


def split_indices(n: int, train: int, val: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint seeded train/validation index sets."""
    if train + val > n:
        raise ValueError(f"split of {train}+{val} exceeds {n} records")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:train]), np.sort(perm[train:train + val])
