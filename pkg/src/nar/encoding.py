"""Architecture records and their channel-stacked feature tensors.

A record is a cell DAG (strictly upper-triangular adjacency, nodes in
topological order) plus per-cell node FLOPs (MFLOPs) and #params (K).  The
feature tensor stacks ``[O, F_1, P_1, ..., F_C, P_C]`` where each matrix is a
node vector broadcast along the source-node axis and masked by the adjacency:
``M[i, j] = A[i, j] * v[i]``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import Tensor, ShapeError, add, matmul, reshape

IN_OP = 1
OUT_OP = 5
DAG_OPS = (1, 2, 3, 4, 5)   # IN, conv1x1, conv3x3, maxpool3x3, OUT
DAG_INTERNAL_OPS = (2, 3, 4)
FIXED4_OPS = (0, 1, 2, 3, 4)  # zeroize, skip, conv1x1, conv3x3, avgpool3x3


class Family(str, enum.Enum):
    DAG7 = "DAG7"
    FIXED4 = "FIXED4"
    SYNTH = "SYNTH"


class RecordError(ValueError):
    """A record violates its family invariants."""


@dataclass(frozen=True)
class Layout:
    """Tensor geometry for a family: ``nodes`` is the patch resolution P."""

    family: Family
    nodes: int
    cells: int
    max_edges: int

    @property
    def channels(self) -> int:
        return 1 + 2 * self.cells

    @property
    def op_codes(self) -> tuple[int, ...]:
        return FIXED4_OPS if self.family is Family.FIXED4 else DAG_OPS


DAG7_LAYOUT = Layout(Family.DAG7, 7, 9, 9)
FIXED4_LAYOUT = Layout(Family.FIXED4, 4, 15, 6)


def synth_layout(nodes: int, cells: int, max_edges: int) -> Layout:
    return Layout(Family.SYNTH, nodes, cells, max_edges)


@dataclass
class ArchitectureRecord:
    id: str
    family: Family
    adjacency: np.ndarray
    node_ops: tuple[int, ...]
    cells: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    total_flops: float = 0.0
    total_params: float = 0.0
    accuracy: dict[str, float] | None = None
    # FIXED4 only: op codes of the six edges in row-major upper-triangular order
    edge_ops: tuple[int, ...] | None = None

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum())

    def op_list(self) -> tuple[int, ...]:
        """The op codes counted into tier statistics."""
        return self.edge_ops if self.family is Family.FIXED4 else self.node_ops


def fixed4_edges() -> list[tuple[int, int]]:
    return [(i, j) for i in range(4) for j in range(i + 1, 4)]


def validate_record(rec: ArchitectureRecord, layout: Layout | None = None,
                    require_cells: bool = True) -> None:
    """Raise :class:`RecordError` if ``rec`` breaks its family invariants."""
    if layout is None:
        layout = {Family.DAG7: DAG7_LAYOUT, Family.FIXED4: FIXED4_LAYOUT}.get(rec.family)
        if layout is None:
            raise RecordError(f"{rec.id}: SYNTH records need an explicit layout")
    if rec.family is not layout.family:
        raise RecordError(f"{rec.id}: family {rec.family.value} does not match "
                          f"layout {layout.family.value}")
    a = rec.adjacency
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise RecordError(f"{rec.id}: adjacency must be square, got shape {a.shape}")
    v = a.shape[0]
    if not np.isin(a, (0, 1)).all():
        raise RecordError(f"{rec.id}: adjacency must be binary")
    if np.tril(a).any():
        raise RecordError(f"{rec.id}: adjacency must be strictly upper-triangular")
    if rec.family is Family.FIXED4:
        if v != 4:
            raise RecordError(f"{rec.id}: FIXED4 needs 4 nodes, got {v}")
        if not (a == np.triu(np.ones((4, 4), dtype=a.dtype), 1)).all():
            raise RecordError(f"{rec.id}: FIXED4 nodes must connect to all predecessors")
        if rec.edge_ops is None or len(rec.edge_ops) != 6:
            raise RecordError(f"{rec.id}: FIXED4 needs 6 edge ops")
        bad = [o for o in rec.edge_ops if o not in FIXED4_OPS]
        if bad:
            raise RecordError(f"{rec.id}: op codes {bad} outside {FIXED4_OPS}")
    else:
        if len(rec.node_ops) != v:
            raise RecordError(f"{rec.id}: node count mismatch "
                              f"({v}-node adjacency, {len(rec.node_ops)} op codes)")
        if v > layout.nodes:
            raise RecordError(f"{rec.id}: {v} nodes exceeds the limit of {layout.nodes}")
        if rec.num_edges > layout.max_edges:
            raise RecordError(f"{rec.id}: {rec.num_edges} edges exceeds the limit "
                              f"of {layout.max_edges}")
        bad = [o for o in rec.node_ops if o not in DAG_OPS]
        if bad:
            raise RecordError(f"{rec.id}: op codes {bad} outside {DAG_OPS}")
    if require_cells:
        if len(rec.cells) != layout.cells:
            raise RecordError(f"{rec.id}: expected {layout.cells} cells, got {len(rec.cells)}")
        for c, (f, p) in enumerate(rec.cells):
            if len(f) != v or len(p) != v:
                raise RecordError(f"{rec.id}: cell {c} vectors must have length {v}")
            if (np.asarray(f) < 0).any() or (np.asarray(p) < 0).any():
                raise RecordError(f"{rec.id}: cell {c} has negative FLOPs/#params")


def _masked(adj: np.ndarray, vec: np.ndarray, size: int) -> np.ndarray:
    v = adj.shape[0]
    out = np.zeros((size, size))
    out[:v, :v] = adj * np.asarray(vec, dtype=np.float64)[:, None]
    return out


def encode(rec: ArchitectureRecord, layout: Layout) -> np.ndarray:
    """Feature tensor of shape ``(layout.channels, layout.nodes, layout.nodes)``."""
    validate_record(rec, layout)
    size = layout.nodes
    adj = rec.adjacency.astype(np.float64)
    out = np.empty((layout.channels, size, size))
    if rec.family is Family.FIXED4:
        ops = np.zeros((4, 4))
        for (i, j), o in zip(fixed4_edges(), rec.edge_ops):
            ops[i, j] = o
        out[0] = ops
    else:
        out[0] = _masked(adj, rec.node_ops, size)
    for c, (f, p) in enumerate(rec.cells):
        out[1 + 2 * c] = _masked(adj, f, size)
        out[2 + 2 * c] = _masked(adj, p, size)
    return out


def encode_dag7(rec: ArchitectureRecord) -> np.ndarray:
    if rec.family is not Family.DAG7:
        raise RecordError(f"{rec.id}: encode_dag7 needs a DAG7 record, got {rec.family.value}")
    return encode(rec, DAG7_LAYOUT)


def encode_fixed4(rec: ArchitectureRecord) -> np.ndarray:
    if rec.family is not Family.FIXED4:
        raise RecordError(f"{rec.id}: encode_fixed4 needs a FIXED4 record, "
                          f"got {rec.family.value}")
    return encode(rec, FIXED4_LAYOUT)


def encode_many(records, layout: Layout) -> np.ndarray:
    return np.stack([encode(r, layout) for r in records]) if records else \
        np.zeros((0, layout.channels, layout.nodes, layout.nodes))


@dataclass
class ChannelStats:
    """Per-channel standardization fitted on training tensors."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, tensors: np.ndarray) -> "ChannelStats":
        mu = tensors.mean(axis=(0, 2, 3))
        sd = tensors.std(axis=(0, 2, 3))
        sd = np.where(sd > 1e-12, sd, 1.0)
        return cls(mu, sd)

    @classmethod
    def identity(cls, channels: int) -> "ChannelStats":
        return cls(np.zeros(channels), np.ones(channels))

    def apply(self, tensors: np.ndarray) -> np.ndarray:
        return (tensors - self.mean[:, None, None]) / self.std[:, None, None]


def positional_table(n: int, d: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd columns cos."""
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


def patchify(t: np.ndarray, proj: Tensor, pos: np.ndarray | Tensor) -> Tensor:
    """Flatten each channel row-major, project to D and add positions.

    ``t`` is ``(N, P, P)`` or batched ``(B, N, P, P)``; returns ``(..., N, D)``.
    """
    t = np.asarray(t, dtype=np.float64) if not isinstance(t, Tensor) else t.data
    if t.ndim < 3 or t.shape[-1] != t.shape[-2]:
        raise ShapeError(f"patchify: expected (..., N, P, P), got {t.shape}")
    n, p = t.shape[-3], t.shape[-1]
    if proj.shape[0] != p * p:
        raise ShapeError(f"patchify: projection {proj.shape} does not take {p * p} inputs")
    pos_shape = pos.shape
    if pos_shape != (n, proj.shape[1]):
        raise ShapeError(f"patchify: positional table {pos_shape} != ({n}, {proj.shape[1]})")
    flat = reshape(Tensor(t), t.shape[:-2] + (p * p,))
    return add(matmul(flat, proj), pos)


def recover_structure(op_channel: np.ndarray) -> tuple[np.ndarray, dict[int, int]]:
    """Adjacency and the op codes of nodes with outgoing edges, read off channel 0."""
    adj = (op_channel != 0).astype(np.int8)
    ops = {i: int(op_channel[i, np.flatnonzero(adj[i])[0]])
           for i in range(adj.shape[0]) if adj[i].any()}
    return adj, ops


def longest_path_depths(adj: np.ndarray) -> np.ndarray:
    """Longest-path distance from node 0 for a topologically indexed DAG."""
    v = adj.shape[0]
    depth = np.full(v, -math.inf)
    depth[0] = 0
    for j in range(1, v):
        preds = np.flatnonzero(adj[:j, j])
        if preds.size:
            depth[j] = depth[preds].max() + 1
    return depth
