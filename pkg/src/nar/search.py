"""Search without a search algorithm: sample candidates under constraints
drawn from tier-1 statistics, let the ranker classify and score them, and
query the oracle only for the best-scored architectures in the top tier.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Callable, Protocol, Sequence

import numpy as np

from .bench_data import RecordSpace
from .encoding import (DAG_INTERNAL_OPS, FIXED4_OPS, IN_OP, OUT_OP, ArchitectureRecord,
                       ChannelStats, Family, Layout, encode_many)
from .model import NAR, Prediction
from .tiers import (FullDistribution, IntervalOnly, Selection, TierBucket, embeddings_of,
                    histograms_at, recorded_iterations, select_distribution,
                    update_tier_embedding)
from .trainer import build_labels

log = logging.getLogger(__name__)

MODES = ("random", "statistics", "interval")
PROPERTIES = ("flops", "params")


@dataclass
class SearchConfig:
    iterations: int = 50
    sample_size: int = 256
    random_proportion: float = 0.5
    reuse: int = 25
    top_k: int = 5
    zeta: float = 2.5
    theta: float = 0.1
    beta: int = 4
    bins: int = 10
    mode: str = "statistics"
    seed: int = 0
    retry_cap: int = 20
    properties: tuple[str, ...] = PROPERTIES
    update_embeddings: bool = True

    def __post_init__(self):
        self.properties = tuple(self.properties)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.random_proportion <= 1.0:
            raise ValueError(f"random_proportion must be in [0, 1], got {self.random_proportion}")
        if self.reuse < 1 or self.reuse > self.sample_size:
            raise ValueError(f"reuse period {self.reuse} must lie in 1..{self.sample_size}")
        if self.top_k < 1 or self.top_k > self.sample_size:
            raise ValueError(f"top_k {self.top_k} must lie in 1..{self.sample_size}")
        bad = set(self.properties) - set(PROPERTIES)
        if bad:
            raise ValueError(f"unknown constraint properties {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["properties"] = list(self.properties)
        return d


# --------------------------------------------------------------------------
# constraint and cell sampling
# --------------------------------------------------------------------------

def sample_bound(selection: Selection | None, rng: np.random.Generator) -> float:
    if selection is None:
        return math.inf
    if isinstance(selection, IntervalOnly):
        if selection.tau_max == selection.tau_min:
            return float(selection.tau_min)
        return float(rng.uniform(selection.tau_min, selection.tau_max))
    h = selection.histogram
    p = h.masses / h.masses.sum()
    j = int(rng.choice(len(p), p=p))
    return float(min(h.edges[j + 1], h.tau_max))


def sample_constraints(flops_sel: Selection | None, params_sel: Selection | None,
                       rng: np.random.Generator) -> tuple[float, float]:
    """Upper bounds on total FLOPs and #params; None selections leave a property free."""
    return sample_bound(flops_sel, rng), sample_bound(params_sel, rng)


def sample_cell_dag7(op_dist, rng: np.random.Generator, nodes: int = 7,
                     max_edges: int = 9, codes: Sequence[int] = DAG_INTERNAL_OPS
                     ) -> ArchitectureRecord:
    """Chain every node to one random predecessor, then add random extra edges."""
    adj = np.zeros((nodes, nodes), dtype=np.int8)
    ops = [IN_OP]
    p = np.asarray(op_dist, dtype=np.float64)
    for j in range(1, nodes):
        adj[int(rng.integers(j)), j] = 1
        if j < nodes - 1:
            ops.append(int(codes[rng.choice(len(codes), p=p)]))
    ops.append(OUT_OP)
    for _ in range(max_edges - (nodes - 1)):
        i, j = sorted(rng.choice(nodes, size=2, replace=False))
        adj[i, j] = 1
    return ArchitectureRecord(id="", family=Family.DAG7, adjacency=adj, node_ops=tuple(ops))


def sample_cell_fixed4(op_dist, rng: np.random.Generator) -> ArchitectureRecord:
    p = np.asarray(op_dist, dtype=np.float64)
    ops = tuple(int(FIXED4_OPS[i]) for i in rng.choice(len(FIXED4_OPS), size=6, p=p))
    adj = np.triu(np.ones((4, 4), dtype=np.int8), 1)
    return ArchitectureRecord(id="", family=Family.FIXED4, adjacency=adj,
                              node_ops=(), edge_ops=ops)


# --------------------------------------------------------------------------
# predictors
# --------------------------------------------------------------------------

class Predictor(Protocol):
    def predict(self, records: Sequence[ArchitectureRecord]) -> Prediction: ...

    def observe(self, tiers: np.ndarray, features: np.ndarray) -> None: ...


class NARPredictor:
    """Trained ranker plus a private copy of the tier buckets."""

    def __init__(self, model: NAR, buckets: Sequence[TierBucket], norm: ChannelStats,
                 layout: Layout):
        self.model = model
        self.buckets = copy.deepcopy(list(buckets))
        self.norm = norm
        self.layout = layout

    def predict(self, records):
        x = self.norm.apply(encode_many(records, self.layout))
        return self.model.predict(x, embeddings_of(self.buckets))

    def observe(self, tiers, features):
        for b in self.buckets:
            update_tier_embedding(b, features[tiers == b.index])


class OraclePredictor:
    """Upper-bound stand-in: tiers from true global quantiles, score = true accuracy."""

    def __init__(self, space: RecordSpace, tiers: int = 5):
        self.space = space
        self.tiers = tiers
        self.labels = build_labels(space.accuracies, tiers, [r.id for r in space.records])

    def predict(self, records):
        idx = np.array([self.space.index_of(r.id) for r in records])
        t = self.labels[idx]
        probs = np.zeros((len(idx), self.tiers))
        probs[np.arange(len(idx)), t] = 1.0
        return Prediction(t, self.space.accuracies[idx].copy(), probs,
                          np.zeros((len(idx), 0)))

    def observe(self, tiers, features):
        pass


# --------------------------------------------------------------------------
# search loop
# --------------------------------------------------------------------------

@dataclass
class SearchReport:
    config: dict
    iterations: list[dict] = field(default_factory=list)
    best_accuracy: float = -math.inf
    best_id: str | None = None
    best_rank: int | None = None
    best_permille: float | None = None
    queries: int = 0
    unique_queries: int = 0
    cache_hits: int = 0
    failures: int = 0

    @property
    def trajectory(self) -> list[float]:
        return [it["best_accuracy"] for it in self.iterations]

    def summary(self) -> dict:
        return {"best_accuracy": self.best_accuracy, "best_id": self.best_id,
                "best_rank": self.best_rank, "best_permille": self.best_permille,
                "queries": self.queries, "unique_queries": self.unique_queries,
                "cache_hits": self.cache_hits, "failed_iterations": self.failures,
                "iterations": len(self.iterations)}

    def to_jsonl(self) -> str:
        lines = [json.dumps(it, sort_keys=True) for it in self.iterations]
        lines.append(json.dumps({"summary": self.summary(), "config": self.config},
                                sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def _selection_name(sel: Selection | None) -> str:
    if sel is None:
        return "none"
    return "full" if isinstance(sel, FullDistribution) else "interval"


def _guided_samples(n: int, space: RecordSpace, buckets: Sequence[TierBucket],
                    selections: dict[str, Selection | None], config: SearchConfig,
                    rng: np.random.Generator) -> tuple[list[ArchitectureRecord], int]:
    layout = space.layout
    if layout.family is Family.FIXED4:
        op_dist = buckets[0].op_distribution(FIXED4_OPS, smoothing=1.0)

        def draw():
            return sample_cell_fixed4(op_dist, rng)
    else:
        op_dist = buckets[0].op_distribution(DAG_INTERNAL_OPS, smoothing=1.0)

        def draw():
            return sample_cell_dag7(op_dist, rng, layout.nodes, layout.max_edges)

    out: list[ArchitectureRecord] = []
    rejected = 0
    fb = pb = math.inf
    for s in range(n):
        if s % config.reuse == 0:
            fb, pb = sample_constraints(selections.get("flops"), selections.get("params"), rng)
        chosen = None
        last = None
        for _ in range(config.retry_cap):
            cell = draw()
            rec = space.resolve(cell.adjacency, cell.op_list())
            if rec is None:
                rejected += 1
                continue
            last = rec
            if rec.total_flops <= fb and rec.total_params <= pb:
                chosen = rec
                break
            rejected += 1
        if chosen is None:
            chosen = last if last is not None else space.sample_uniform(rng)
        out.append(chosen)
    return out, rejected


def search(predictor: Predictor, buckets: Sequence[TierBucket], space: RecordSpace,
           oracle: Callable[[str], float] | None, config: SearchConfig,
           log_file: IO[str] | None = None) -> SearchReport:
    """Run ``config.iterations`` rounds of sample -> classify/score -> query top-k."""
    oracle = oracle or space.accuracy
    rng = np.random.default_rng(config.seed)
    report = SearchReport(config=config.to_dict())
    cache: dict[str, float] = {}
    its = recorded_iterations(buckets)
    k = config.sample_size
    n_random = k if config.mode == "random" else int(math.ceil(config.random_proportion * k))
    for j in range(config.iterations):
        selections: dict[str, Selection | None] = {}
        if n_random < k and its:
            at = its[j % len(its)]
            for prop in config.properties:
                sel = select_distribution(histograms_at(buckets, prop, at), k,
                                          config.theta, config.zeta, config.beta)
                if config.mode == "interval" and isinstance(sel, FullDistribution):
                    sel = IntervalOnly(sel.histogram.tau_min, sel.histogram.tau_max)
                selections[prop] = sel
        batch = [space.sample_uniform(rng) for _ in range(n_random)]
        guided, rejected = _guided_samples(k - n_random, space, buckets, selections,
                                           config, rng)
        batch.extend(guided)
        seen: set[str] = set()
        uniq = []
        for r in batch:
            if r.id not in seen:
                seen.add(r.id)
                uniq.append(r)
        pred = predictor.predict(uniq)
        order = sorted(range(len(uniq)), key=lambda i: (int(pred.tiers[i]), -pred.scores[i],
                                                        uniq[i].id))
        picks = order[:config.top_k]
        entry = {"iteration": j, "sampled": len(batch), "unique": len(uniq),
                 "rejections": rejected,
                 "selection": {p: _selection_name(selections.get(p)) for p in config.properties},
                 "candidates": [uniq[i].id for i in picks],
                 "predicted_tiers": [int(pred.tiers[i]) + 1 for i in picks],
                 "scores": [float(pred.scores[i]) for i in picks]}
        accs = []
        hits = 0
        try:
            for i in picks:
                rid = uniq[i].id
                if rid in cache:
                    hits += 1
                else:
                    cache[rid] = float(oracle(rid))
                accs.append(cache[rid])
        except Exception as e:  # oracle failures abort this iteration only
            log.warning("iteration %d: oracle failed: %s", j, e)
            report.failures += 1
            entry["error"] = str(e)
            accs = []
        else:
            report.queries += len(picks)
            report.cache_hits += hits
            for i, a in zip(picks, accs):
                if a > report.best_accuracy:
                    report.best_accuracy = a
                    report.best_id = uniq[i].id
        entry["accuracies"] = accs
        entry["cache_hits"] = hits
        if config.update_embeddings:
            predictor.observe(pred.tiers, pred.features)
        entry["best_accuracy"] = report.best_accuracy
        entry["best_id"] = report.best_id
        if report.best_id is not None:
            try:
                entry["best_rank"], entry["best_permille"] = space.true_rank(report.best_id)
            except KeyError:
                pass
        report.iterations.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
    report.unique_queries = len(cache)
    if report.best_id is not None:
        try:
            report.best_rank, report.best_permille = space.true_rank(report.best_id)
        except KeyError:
            pass
    return report
