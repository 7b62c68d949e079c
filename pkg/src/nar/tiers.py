"""Per-tier state collected while training: running-mean embeddings, per-batch
FLOPs/#params histograms and op-type counts, plus the KL-gated choice of
which tier-1 statistics drive constraint sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import _kernels

DEFAULT_BINS = 10
KL_SMOOTHING = 1e-8


@dataclass
class BatchHistogram:
    """Masses over bins ``(tau_min + (j-1)*step, tau_min + j*step]``, j = 1..q.

    The first bin is closed at ``tau_min``.  Masses are normalized by the batch
    size, so they sum to ``members / batch_size``.
    """

    tau_min: float
    tau_max: float
    step: int
    masses: np.ndarray
    members: int
    batch_size: int
    iteration: int = -1

    @property
    def bins(self) -> int:
        return len(self.masses)

    @property
    def edges(self) -> np.ndarray:
        return self.tau_min + self.step * np.arange(self.bins + 1, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"tau_min": self.tau_min, "tau_max": self.tau_max, "step": self.step,
                "masses": [float(m) for m in self.masses], "members": self.members,
                "batch_size": self.batch_size, "iteration": self.iteration}

    @classmethod
    def from_dict(cls, d: dict) -> "BatchHistogram":
        return cls(d["tau_min"], d["tau_max"], int(d["step"]),
                   np.asarray(d["masses"], dtype=np.float64), int(d["members"]),
                   int(d["batch_size"]), int(d.get("iteration", -1)))


def build_histogram(values, k: int, q: int = DEFAULT_BINS, iteration: int = -1) -> BatchHistogram:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot build a histogram from no values")
    if k < values.size:
        raise ValueError(f"batch size {k} is smaller than the {values.size} members")
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return BatchHistogram(lo, hi, 1, np.array([values.size / k]), int(values.size), k,
                              iteration)
    step = max(1, math.ceil((hi - lo) / q))
    counts = _kernels.bin_counts(values, lo, step, q)
    return BatchHistogram(lo, hi, step, counts / k, int(values.size), k, iteration)


def _rebin(h: BatchHistogram, lo: float, step: float, nbins: int) -> np.ndarray:
    """Spread each source bin's mass uniformly over its width onto a new grid."""
    out = np.zeros(nbins)
    src = h.edges
    dst = lo + step * np.arange(nbins + 1)
    for j, m in enumerate(h.masses):
        if m == 0:
            continue
        a, b = src[j], src[j + 1]
        overlap = np.clip(np.minimum(dst[1:], b) - np.maximum(dst[:-1], a), 0.0, None)
        out += m * overlap / (b - a)
    return out


def kl_divergence(pa: BatchHistogram, pb: BatchHistogram, eps: float = KL_SMOOTHING) -> float:
    """KL(pa || pb) in nats after re-binning both onto a shared grid."""
    lo = min(pa.tau_min, pb.tau_min)
    hi = max(pa.edges[-1], pb.edges[-1])
    step = min(pa.step, pb.step)
    nbins = max(1, math.ceil((hi - lo) / step - 1e-12))
    p = _rebin(pa, lo, step, nbins)
    q = _rebin(pb, lo, step, nbins)
    return kl_from_masses(p, q, eps)


def kl_from_masses(p, q, eps: float = KL_SMOOTHING) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum() + eps
    q = q / q.sum() + eps
    p /= p.sum()
    q /= q.sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


@dataclass(frozen=True)
class FullDistribution:
    histogram: BatchHistogram


@dataclass(frozen=True)
class IntervalOnly:
    tau_min: float
    tau_max: float


Selection = Union[FullDistribution, IntervalOnly]


def select_distribution(tier_hists: Sequence[BatchHistogram | None], k: int, theta: float,
                        zeta: float, beta: int) -> Selection | None:
    """Keep tier 1's histogram only if it is well populated and differs from
    every low tier ``beta..|T|`` (1-based) by at least ``zeta`` nats.

    Returns None when tier 1 has no histogram at all.
    """
    if beta <= 1:
        raise ValueError(f"beta must exceed 1, got {beta}")
    top = tier_hists[0] if tier_hists else None
    if top is None:
        return None
    interval = IntervalOnly(top.tau_min, top.tau_max)
    for i in range(beta, len(tier_hists) + 1):
        other = tier_hists[i - 1]
        if other is None or top.members < theta * k:
            return interval
        if kl_divergence(top, other) < zeta:
            return interval
    return FullDistribution(top)


@dataclass
class TierBucket:
    index: int
    embedding: np.ndarray
    count: int = 0
    flops_log: list[BatchHistogram] = field(default_factory=list)
    params_log: list[BatchHistogram] = field(default_factory=list)
    op_counts: dict[int, int] = field(default_factory=dict)

    def op_distribution(self, codes: Sequence[int], smoothing: float = 0.0) -> np.ndarray:
        c = np.array([self.op_counts.get(o, 0) for o in codes], dtype=np.float64) + smoothing
        total = c.sum()
        return c / total if total > 0 else np.full(len(codes), 1.0 / len(codes))

    def to_header(self) -> dict:
        return {"index": self.index, "count": self.count,
                "op_counts": {str(k): v for k, v in sorted(self.op_counts.items())},
                "flops_log": [h.to_dict() for h in self.flops_log],
                "params_log": [h.to_dict() for h in self.params_log]}

    @classmethod
    def from_header(cls, d: dict, embedding: np.ndarray) -> "TierBucket":
        return cls(int(d["index"]), embedding, int(d["count"]),
                   [BatchHistogram.from_dict(h) for h in d["flops_log"]],
                   [BatchHistogram.from_dict(h) for h in d["params_log"]],
                   {int(k): int(v) for k, v in d["op_counts"].items()})


def new_buckets(tiers: int, patches: int, d_model: int) -> list[TierBucket]:
    return [TierBucket(i, np.zeros((patches, d_model))) for i in range(tiers)]


def update_tier_embedding(bucket: TierBucket, features) -> TierBucket:
    """Fold a batch of features into the bucket's running mean."""
    feats = np.asarray(features, dtype=np.float64)
    m = len(feats)
    if m == 0:
        return bucket
    total = bucket.count + m
    bucket.embedding = (bucket.embedding * bucket.count + feats.sum(axis=0)) / total
    bucket.count = total
    return bucket


def update_op_counts(bucket: TierBucket, ops: Sequence[int], valid: Sequence[int]) -> TierBucket:
    bad = [o for o in ops if o not in valid]
    if bad:
        raise ValueError(f"unknown op codes {sorted(set(bad))}; expected codes in {tuple(valid)}")
    for o in ops:
        bucket.op_counts[int(o)] = bucket.op_counts.get(int(o), 0) + 1
    return bucket


def embeddings_of(buckets: Sequence[TierBucket]) -> np.ndarray:
    return np.stack([b.embedding for b in buckets])


def histograms_at(buckets: Sequence[TierBucket], prop: str, iteration: int) -> list:
    """Per-tier histogram recorded at a given training iteration (None when absent)."""
    out = []
    for b in buckets:
        log = b.flops_log if prop == "flops" else b.params_log
        out.append(next((h for h in log if h.iteration == iteration), None))
    return out


def recorded_iterations(buckets: Sequence[TierBucket]) -> list[int]:
    its = {h.iteration for h in buckets[0].flops_log} if buckets else set()
    return sorted(its)
