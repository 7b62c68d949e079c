"""Regenerate the encoding golden fixtures under tests/fixtures/golden.

The records use dyadic values so every tensor entry is exact in float64.
Run only when the encoding format changes on purpose; the tests compare
fresh encodings to these bytes.
"""
import hashlib
import json
from pathlib import Path

import numpy as np

from nar.bench_data import record_to_json
from nar.encoding import ArchitectureRecord, Family, encode_dag7, encode_fixed4

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "golden"


def dag7_record() -> ArchitectureRecord:
    adj = np.zeros((7, 7), dtype=np.int8)
    for i, j in [(0, 1), (0, 2), (1, 3), (2, 3), (2, 4), (3, 5), (4, 5), (5, 6), (0, 6)]:
        adj[i, j] = 1
    ops = (1, 3, 2, 4, 3, 2, 5)
    cells = []
    for c in range(9):
        f = np.array([0.0, 1.5, 0.25, 2.0, 0.75, 0.5, 0.125]) * (c + 1)
        p = np.array([0.0, 0.5, 0.125, 0.0, 0.25, 1.0, 0.0625]) * 2.0 ** (c // 3)
        cells.append((f, p))
    return ArchitectureRecord(id="golden-dag7", family=Family.DAG7, adjacency=adj,
                              node_ops=ops, cells=cells, total_flops=float(sum(f.sum() for f, _ in cells)),
                              total_params=float(sum(p.sum() for _, p in cells)),
                              accuracy={"validation": 0.9375, "test": 0.9375})


def fixed4_record() -> ArchitectureRecord:
    adj = np.triu(np.ones((4, 4), dtype=np.int8), 1)
    cells = []
    for c in range(15):
        f = np.array([0.5, 1.0, 0.25, 0.0]) + 0.125 * c
        p = np.array([0.25, 0.0, 0.5, 0.0]) * (1 + c % 4)
        cells.append((f, p))
    return ArchitectureRecord(id="golden-fixed4", family=Family.FIXED4, adjacency=adj,
                              node_ops=(0, 0, 0, 0), cells=cells,
                              total_flops=float(sum(f.sum() for f, _ in cells)),
                              total_params=float(sum(p.sum() for _, p in cells)),
                              accuracy={"validation": 0.875, "test": 0.875},
                              edge_ops=(3, 1, 0, 2, 4, 1))


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, rec, enc in [("dag7", dag7_record(), encode_dag7),
                           ("fixed4", fixed4_record(), encode_fixed4)]:
        t = enc(rec)
        raw = t.astype("<f8").tobytes()
        (OUT / f"{name}.bin").write_bytes(raw)
        (OUT / f"{name}.record.json").write_text(json.dumps(record_to_json(rec), sort_keys=True) + "\n")
        manifest[name] = {"shape": list(t.shape), "dtype": "<f8",
                          "sha256": hashlib.sha256(raw).hexdigest()}
    (OUT / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps(manifest, indent=2))


if __name__ == "__main__":
    main()
