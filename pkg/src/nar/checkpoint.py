"""Single-file checkpoint: magic, little-endian u64 header length, a JSON
header, then raw little-endian float64 arrays addressed from the header.

Header keys: ``config`` (model config), ``normalization`` (per-channel mean
and std), ``tiers`` (per-bucket counts, op counts, histogram logs and the
location of the embedding buffer), ``tensors`` (name -> offset/shape), and
any caller-supplied ``extra`` metadata.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoding import ChannelStats
from .model import NAR, ModelConfig
from .tiers import TierBucket

MAGIC = b"NARCKPT1"


class CheckpointError(ValueError):
    pass


def _pack(arrays: dict[str, np.ndarray]) -> tuple[dict, bytes]:
    index = {}
    chunks = []
    offset = 0
    for name, a in arrays.items():
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        index[name] = {"offset": offset, "shape": list(a.shape)}
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def save_checkpoint(path, model: NAR, buckets: list[TierBucket], norm: ChannelStats,
                    extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    for b in buckets:
        arrays[f"tier/{b.index}/embedding"] = b.embedding
    index, payload = _pack(arrays)
    header = {
        "format": 1,
        "config": model.config.to_dict(),
        "normalization": {"mean": [float(x) for x in norm.mean],
                          "std": [float(x) for x in norm.std]},
        "tiers": [dict(b.to_header(), embedding=f"tier/{b.index}/embedding") for b in buckets],
        "tensors": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def read_header(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    return header, blob[16 + n:]


def load_checkpoint(path) -> tuple[NAR, list[TierBucket], ChannelStats, dict]:
    header, payload = read_header(path)

    def arr(name):
        meta = header["tensors"][name]
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        out = np.frombuffer(payload, dtype="<f8", count=count, offset=meta["offset"])
        return out.reshape(meta["shape"]).astype(np.float64)

    model = NAR(ModelConfig(**header["config"]))
    for k, p in model.params.items():
        p.data = arr(f"param/{k}")
    buckets = [TierBucket.from_header(t, arr(t["embedding"])) for t in header["tiers"]]
    norm = ChannelStats(np.asarray(header["normalization"]["mean"]),
                        np.asarray(header["normalization"]["std"]))
    return model, buckets, norm, header
