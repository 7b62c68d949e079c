"""Training loop: per-batch tier labels, joint ranking + classification loss,
bucket statistics, and validation metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

import numpy as np

from . import _kernels
from . import numcore as nc
from .encoding import ArchitectureRecord, ChannelStats, Layout, encode_many
from .model import NAR, ModelConfig, no_decay_names, ranking_loss, total_loss
from .tiers import (DEFAULT_BINS, TierBucket, build_histogram, embeddings_of, new_buckets,
                    update_op_counts, update_tier_embedding)

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 35
    warmup: int = 50
    beta1: float = 0.9
    beta2: float = 0.982
    eps: float = 1e-9
    weight_decay: float = 5e-4
    lr_scale: float = 1.0
    clip_norm: float = 5.0
    bins: int = DEFAULT_BINS
    seed: int = 0
    metric: str = "validation"

    def to_dict(self) -> dict:
        return asdict(self)


def build_labels(y: Sequence[float], tiers: int, ids: Sequence[str] | None = None) -> np.ndarray:
    """0-based tier per element: sort by accuracy descending (ties by id), cut into
    ``tiers`` contiguous groups, the first ``k % tiers`` groups one larger."""
    y = np.asarray(y, dtype=np.float64)
    k = len(y)
    if k < tiers:
        raise ValueError(f"batch of {k} cannot be split into {tiers} tiers")
    keys = list(ids) if ids is not None else list(range(k))
    order = sorted(range(k), key=lambda i: (-y[i], keys[i]))
    base, extra = divmod(k, tiers)
    labels = np.empty(k, dtype=np.int64)
    pos = 0
    for g in range(tiers):
        size = base + (1 if g < extra else 0)
        labels[order[pos:pos + size]] = g
        pos += size
    return labels


def one_hot(labels: np.ndarray, tiers: int) -> np.ndarray:
    out = np.zeros((len(labels), tiers))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def kendall_tau(scores, truths) -> float:
    """Tau-a over pairs with distinct truths; score ties count zero."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if scores.shape != truths.shape or scores.size < 2:
        raise ValueError("kendall_tau needs two equal-length sequences of length >= 2")
    c, d, n = _kernels.kendall_counts(scores, truths)
    if n == 0:
        raise ValueError("kendall_tau is undefined when every truth value is tied")
    return (c - d) / n


@dataclass
class TrainResult:
    model: NAR
    buckets: list[TierBucket]
    norm: ChannelStats
    log: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def _accuracies(records: Sequence[ArchitectureRecord], metric: str) -> np.ndarray:
    out = []
    for r in records:
        if not r.accuracy or metric not in r.accuracy:
            raise ValueError(f"record {r.id!r} has no {metric!r} accuracy")
        out.append(r.accuracy[metric])
    return np.asarray(out, dtype=np.float64)


def update_buckets(buckets: list[TierBucket], labels: np.ndarray, features: np.ndarray,
                   records: Sequence[ArchitectureRecord], layout: Layout, bins: int,
                   iteration: int, statistics: bool = True) -> None:
    k = len(labels)
    for b in buckets:
        members = np.flatnonzero(labels == b.index)
        if members.size == 0:
            continue
        update_tier_embedding(b, features[members])
        if not statistics:
            continue
        recs = [records[i] for i in members]
        b.flops_log.append(build_histogram([r.total_flops for r in recs], k, bins, iteration))
        b.params_log.append(build_histogram([r.total_params for r in recs], k, bins, iteration))
        update_op_counts(b, [o for r in recs for o in r.op_list()], layout.op_codes)


def train(records: Sequence[ArchitectureRecord], layout: Layout, model_config: ModelConfig,
          config: TrainConfig, log_file: IO[str] | None = None) -> TrainResult:
    """Fit the ranker on ``records`` and collect per-tier statistics."""
    tiers = model_config.tiers
    if config.batch_size < tiers:
        raise ValueError(f"batch size {config.batch_size} is smaller than {tiers} tiers")
    if (model_config.patches, model_config.resolution) != (layout.channels, layout.nodes):
        raise ValueError(f"model expects ({model_config.patches}, {model_config.resolution}) "
                         f"patches but the layout gives ({layout.channels}, {layout.nodes})")
    y = _accuracies(records, config.metric)
    ids = [r.id for r in records]
    raw = encode_many(records, layout)
    norm = ChannelStats.fit(raw)
    x = norm.apply(raw)

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = NAR(model_config, seed=int(seeds[0].generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    drop_rng = np.random.default_rng(seeds[2]) if model_config.dropout > 0 else None
    buckets = new_buckets(tiers, model_config.patches, model_config.d_model)
    state = nc.OptimizerState(config.beta1, config.beta2, config.eps, config.weight_decay,
                              model_config.d_model, config.warmup,
                              no_decay=no_decay_names(model.params))
    result = TrainResult(model, buckets, norm)
    n = len(records)
    it = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            if len(idx) < tiers:
                continue
            it += 1
            yb = y[idx]
            labels = build_labels(yb, tiers, [ids[i] for i in idx])
            with nc.Tape() as tape:
                out = model.forward(x[idx], embeddings_of(buckets), drop_rng)
                l1 = ranking_loss(out.scores, yb)
                loss = total_loss(out.log_probs, labels, l1, model_config.lam)
            if not np.isfinite(loss.data):
                raise NumericError(it)
            grads = nc.backward(tape, loss, model.params)
            nc.clip_global_norm(grads, config.clip_norm)
            lr = config.lr_scale * nc.lr_at_step(it, model_config.d_model, config.warmup)
            if not math.isfinite(lr):
                raise NumericError(it, "learning rate")
            try:
                nc.adamw_step(model.params, grads, state, lr)
            except nc.NonFiniteGradientError as e:
                raise NumericError(it, f"gradient ({e.name})") from e
            update_buckets(buckets, labels, out.features.data, [records[i] for i in idx],
                           layout, config.bins, it)
            total = float(loss.data)
            l2v = float(-out.log_probs.data[np.arange(len(idx)), labels].mean())
            entry = {"iteration": it, "epoch": epoch, "L1": float(l1.data), "L2": l2v, "total": total, "lr": lr,
                     "tier_counts": [int(b.count) for b in buckets]}
            result.log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
            losses.append(total)
        if losses:
            result.epoch_losses.append(float(np.mean(losses)))
            log.debug("epoch %d mean loss %.5f", epoch, result.epoch_losses[-1])
    return result


def tier_metrics(predicted, truth) -> dict:
    """Exact and within-one tier agreement between two label arrays."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    return {"tier_accuracy": float(np.mean(predicted == truth)),
            "adjacent_tier_accuracy": float(np.mean(np.abs(predicted - truth) <= 1))}


def validate(model: NAR, buckets: Sequence[TierBucket], norm: ChannelStats,
             records: Sequence[ArchitectureRecord], layout: Layout,
             metric: str = "validation") -> tuple[dict, dict]:
    """Kendall tau plus tier / adjacent-tier accuracy against quintile labels of
    the whole validation set taken as one batch.  Returns (metrics, per-record arrays)."""
    if not records:
        raise ValueError("validation set is empty")
    y = _accuracies(records, metric)
    tiers = model.config.tiers
    truth = build_labels(y, tiers, [r.id for r in records])
    pred = model.predict(norm.apply(encode_many(records, layout)), embeddings_of(buckets))
    metrics = {
        "n": len(records),
        "kendall_tau": kendall_tau(pred.scores, y) if len(records) >= 2 else math.nan,
        **tier_metrics(pred.tiers, truth),
    }
    detail = {"ids": [r.id for r in records], "accuracy": y, "true_tier": truth,
              "predicted_tier": pred.tiers, "score": pred.scores}
    return metrics, detail
