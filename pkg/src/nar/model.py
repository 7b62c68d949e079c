"""The ranker network: a pre-norm transformer encoder that scores an
architecture, and a decoder that matches every tier embedding against the
encoded architecture to classify it into a quality tier.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .encoding import patchify, positional_table
from .numcore import ShapeError, Tensor


@dataclass
class ModelConfig:
    layers: int = 6
    d_model: int = 64
    heads: int = 4
    ffn: int = 256
    tiers: int = 5
    patches: int = 19
    resolution: int = 7
    lam: float = 1.0
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.tiers < 2:
            raise ValueError(f"need at least 2 tiers, got {self.tiers}")

    def to_dict(self) -> dict:
        return asdict(self)


def _attn_params(rng, d, prefix, out):
    for w in ("q", "k", "v", "o"):
        out[f"{prefix}.w{w}"] = nc.glorot_uniform(rng, d, d)
        out[f"{prefix}.b{w}"] = np.zeros(d)


def _ln_params(d, prefix, out):
    out[f"{prefix}.g"] = np.ones(d)
    out[f"{prefix}.b"] = np.zeros(d)


def _ffn_params(rng, d, f, prefix, out):
    out[f"{prefix}.w1"] = nc.glorot_uniform(rng, d, f)
    out[f"{prefix}.b1"] = np.zeros(f)
    out[f"{prefix}.w2"] = nc.glorot_uniform(rng, f, d)
    out[f"{prefix}.b2"] = np.zeros(d)


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.ffn
    raw: dict[str, np.ndarray] = {}
    raw["embed.proj"] = nc.glorot_uniform(rng, config.resolution ** 2, d)
    for l in range(config.layers):
        p = f"enc.{l}"
        _ln_params(d, f"{p}.ln1", raw)
        _attn_params(rng, d, f"{p}.attn", raw)
        _ln_params(d, f"{p}.ln2", raw)
        _ffn_params(rng, d, f, f"{p}.ffn", raw)
    _ln_params(d, "enc.ln", raw)
    for l in range(config.layers):
        p = f"dec.{l}"
        _ln_params(d, f"{p}.ln1", raw)
        _attn_params(rng, d, f"{p}.self", raw)
        _ln_params(d, f"{p}.ln2", raw)
        _attn_params(rng, d, f"{p}.cross", raw)
        _ln_params(d, f"{p}.ln3", raw)
        _ffn_params(rng, d, f, f"{p}.ffn", raw)
    _ln_params(d, "dec.ln", raw)
    raw["score.w1"] = nc.glorot_uniform(rng, d, d)
    raw["score.w2"] = nc.glorot_uniform(rng, d, 1)
    raw["tier.w1"] = nc.glorot_uniform(rng, d, d)
    raw["tier.w2"] = nc.glorot_uniform(rng, d, config.tiers)
    return {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in raw.items()}


def no_decay_names(params) -> set[str]:
    return {k for k, v in params.items() if v.ndim < 2}


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nc.matmul(x, w)
    return nc.add(y, b) if b is not None else y


def _ln(params, prefix, x):
    return nc.layernorm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    x = nc.reshape(x, tuple(lead) + (n, h, d // h))
    r = x.ndim
    axes = tuple(range(r - 3)) + (r - 2, r - 3, r - 1)
    return nc.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    r = x.ndim
    axes = tuple(range(r - 3)) + (r - 2, r - 3, r - 1)
    x = nc.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return nc.reshape(x, tuple(lead) + (n, h * dh))


def multihead_attention(params, prefix, xq: Tensor, xkv: Tensor, heads: int) -> Tensor:
    q = _split_heads(_linear(xq, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), heads)
    k = _split_heads(_linear(xkv, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), heads)
    v = _split_heads(_linear(xkv, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), heads)
    out = _merge_heads(nc.attention(q, k, v))
    return _linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ffn(params, prefix, x):
    h = nc.relu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


# --------------------------------------------------------------------------
# network pieces
# --------------------------------------------------------------------------

def encoder_forward(params, config: ModelConfig, x0: Tensor,
                    rng: np.random.Generator | None = None) -> Tensor:
    if x0.shape[-1] != config.d_model:
        raise ShapeError(f"encoder: feature size {x0.shape[-1]} != d_model {config.d_model}")
    x = x0
    rate = config.dropout
    for l in range(config.layers):
        p = f"enc.{l}"
        h = _ln(params, f"{p}.ln1", x)
        x = nc.add(x, nc.dropout(multihead_attention(params, f"{p}.attn", h, h, config.heads),
                                 rate, rng))
        x = nc.add(x, nc.dropout(_ffn(params, f"{p}.ffn", _ln(params, f"{p}.ln2", x)),
                                 rate, rng))
    return _ln(params, "enc.ln", x)


def score_head(params, x_alpha: Tensor) -> Tensor:
    """Mean-pool over patches, then two bias-free projections with ReLU between."""
    pooled = nc.mean(x_alpha, axis=-2)
    h = nc.relu(nc.matmul(pooled, params["score.w1"]))
    y = nc.matmul(h, params["score.w2"])
    return nc.reshape(y, y.shape[:-1])


def decoder_forward(params, config: ModelConfig, e, x_alpha: Tensor, pos: np.ndarray,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Match tier embedding(s) ``e`` against encoded architecture(s) ``x_alpha``.

    ``e`` of shape ``(N, D)`` with ``x_alpha`` ``(N, D)`` gives ``(N, D)``;
    ``e`` of shape ``(T, N, D)`` with ``x_alpha`` ``(B, N, D)`` gives
    ``(T, B, N, D)``, one decoder pass per tier and architecture.
    """
    e = np.asarray(e.data if isinstance(e, Tensor) else e)
    nd = x_alpha.shape[-2:]
    if e.shape[-2:] != nd:
        raise ShapeError(f"decoder: tier embedding {e.shape} vs features {x_alpha.shape}")
    z0 = e + pos
    if e.ndim == 3 and x_alpha.ndim == 3:
        t, b = e.shape[0], x_alpha.shape[0]
        full = (t, b) + nd
        z = Tensor(np.broadcast_to(z0[:, None], full).copy())
        mem = nc.broadcast_to(nc.reshape(x_alpha, (1, b) + nd), full)
    else:
        z = Tensor(z0)
        mem = x_alpha
    rate = config.dropout
    for l in range(config.layers):
        p = f"dec.{l}"
        h = _ln(params, f"{p}.ln1", z)
        q = nc.add(z, nc.dropout(multihead_attention(params, f"{p}.self", h, h, config.heads),
                                 rate, rng))
        zc = nc.add(q, nc.dropout(
            multihead_attention(params, f"{p}.cross", _ln(params, f"{p}.ln2", q), mem,
                                config.heads), rate, rng))
        z = nc.add(zc, nc.dropout(_ffn(params, f"{p}.ffn", _ln(params, f"{p}.ln3", zc)),
                                  rate, rng))
    return _ln(params, "dec.ln", z)


def tier_logits(params, z_list) -> Tensor:
    """Sum the per-tier decoder outputs, mean-pool over patches, project to |T| logits.

    ``z_list`` is a sequence of tensors or one tensor whose leading axis is the tier axis.
    """
    if isinstance(z_list, Tensor):
        z = nc.reduce_sum(z_list, axis=0)
    else:
        z = z_list[0]
        for zi in z_list[1:]:
            z = nc.add(z, zi)
    pooled = nc.mean(z, axis=-2)
    h = nc.relu(nc.matmul(pooled, params["tier.w1"]))
    return nc.matmul(h, params["tier.w2"])


def tier_probs(params, z_list) -> Tensor:
    return nc.softmax(tier_logits(params, z_list), axis=-1)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def ranking_loss(yhat: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] < 2:
        raise ValueError(f"ranking loss needs a batch of at least 2, got {y.shape[0]}")
    return nc.pairwise_logistic(yhat, y)


def _label_indices(labels, tiers: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    labels = labels.astype(np.int64)
    if (labels < 0).any() or (labels >= tiers).any():
        raise ValueError(f"tier label outside 0..{tiers - 1}: {labels[(labels < 0) | (labels >= tiers)][:5]}")
    return labels


def classification_loss(log_probs: Tensor, labels) -> Tensor:
    return nc.nll(log_probs, _label_indices(labels, log_probs.shape[-1]))


def total_loss(log_probs: Tensor, labels, l1: Tensor, lam: float) -> Tensor:
    """Cross-entropy over tier labels plus ``lam`` times the ranking loss."""
    l2 = classification_loss(log_probs, labels)
    if lam == 0:
        return l2
    return nc.add(l2, nc.scale(l1, lam))


# --------------------------------------------------------------------------
# the assembled ranker
# --------------------------------------------------------------------------

class ForwardOut(NamedTuple):
    features: Tensor     # x_alpha, (B, N, D)
    scores: Tensor       # (B,)
    log_probs: Tensor    # (B, T)


class Prediction(NamedTuple):
    tiers: np.ndarray     # 0-based predicted tier
    scores: np.ndarray
    probs: np.ndarray
    features: np.ndarray


class NAR:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        self.params = init_params(config, seed, dtype)
        self.pos = positional_table(config.patches, config.d_model).astype(dtype)

    def forward(self, x: np.ndarray, embeddings: np.ndarray,
                rng: np.random.Generator | None = None) -> ForwardOut:
        """``x`` is a standardized ``(B, N, P, P)`` batch; ``embeddings`` is ``(T, N, D)``."""
        cfg = self.config
        x = np.asarray(x, dtype=self.dtype)
        x0 = patchify(x, self.params["embed.proj"], self.pos)
        feats = encoder_forward(self.params, cfg, x0, rng)
        scores = score_head(self.params, feats)
        z = decoder_forward(self.params, cfg, np.asarray(embeddings, dtype=self.dtype),
                            feats, self.pos, rng)
        log_probs = nc.log_softmax(tier_logits(self.params, z), axis=-1)
        return ForwardOut(feats, scores, log_probs)

    def predict(self, x: np.ndarray, embeddings: np.ndarray, chunk: int = 256) -> Prediction:
        """Inference without a tape; pure given frozen parameters."""
        parts = []
        for s in range(0, len(x), chunk):
            out = self.forward(x[s:s + chunk], embeddings)
            parts.append((out.features.data, out.scores.data, np.exp(out.log_probs.data)))
        if not parts:
            t, n, d = self.config.tiers, self.config.patches, self.config.d_model
            return Prediction(np.zeros(0, int), np.zeros(0), np.zeros((0, t)), np.zeros((0, n, d)))
        feats = np.concatenate([p[0] for p in parts])
        scores = np.concatenate([p[1] for p in parts])
        probs = np.concatenate([p[2] for p in parts])
        return Prediction(probs.argmax(axis=1), scores, probs, feats)
