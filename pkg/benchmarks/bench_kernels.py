"""Compare the numba kernels with their numpy fallbacks.

Part one times each kernel in-process with both implementations.  Part two
times a full training step in fresh interpreters with NAR_USE_NUMBA=1 and 0,
since the backend is picked at import time.

Usage: python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from nar import _kernels

STEP_SNIPPET = r"""
import time, numpy as np
from nar import _kernels, numcore as nc
from nar.model import NAR, ModelConfig, ranking_loss, total_loss
from nar.trainer import build_labels
cfg = ModelConfig(layers=2, d_model=32, heads=4, ffn=64, patches=7, resolution=6, dropout=0.0)
m = NAR(cfg, seed=0)
rng = np.random.default_rng(0)
x = rng.normal(size=(64, 7, 6, 6)); y = rng.uniform(size=64); lab = build_labels(y, 5)
emb = rng.normal(size=(5, 7, 32))
def step():
    with nc.Tape() as tape:
        out = m.forward(x, emb)
        loss = total_loss(out.log_probs, lab, ranking_loss(out.scores, y), 1.0)
    nc.backward(tape, loss, m.params)
step()
t = []
for _ in range(REPEAT):
    t0 = time.perf_counter(); step(); t.append(time.perf_counter() - t0)
print(_kernels.BACKEND, min(t), sorted(t)[len(t) // 2])
"""


def kernel_cases(rng):
    x = rng.normal(size=(64, 5, 7, 32))
    g, b = rng.normal(size=32), rng.normal(size=32)
    out, xhat, rstd = _kernels.NUMPY_KERNELS["layernorm_forward"](x, g, b, 1e-5)
    yhat, y = rng.normal(size=256), rng.uniform(size=256)
    s, t = rng.normal(size=2048), rng.normal(size=2048)
    v = rng.uniform(0, 500, size=256)
    return {
        "layernorm_forward": (x, g, b, 1e-5),
        "layernorm_backward": (rng.normal(size=x.shape), xhat, rstd, g),
        "pairwise_logistic": (yhat, y),
        "kendall_counts": (s, t),
        "bin_counts": (v, 0.0, 50, 10),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    report = {"kernels": {}, "train_step": {}}
    cases = kernel_cases(rng)
    impls = {"numpy": _kernels.NUMPY_KERNELS}
    if _kernels.NUMBA_KERNELS is not None:
        impls["numba"] = _kernels.NUMBA_KERNELS
    print(f"{'kernel':22s} " + " ".join(f"{k:>12s}" for k in impls) + "   speedup")
    for name, case in cases.items():
        row = {}
        for label, table in impls.items():
            fn = table[name]
            fn(*case)  # warm up / compile
            row[label] = min(timeit.repeat(lambda: fn(*case), number=5, repeat=args.repeat)) / 5
        report["kernels"][name] = row
        speed = row["numpy"] / row["numba"] if "numba" in row else float("nan")
        print(f"{name:22s} " + " ".join(f"{row[k] * 1e3:10.3f}ms" for k in impls) + f"   {speed:6.1f}x")
    for flag in ("1", "0"):
        env = dict(os.environ, NAR_USE_NUMBA=flag)
        code = STEP_SNIPPET.replace("REPEAT", str(max(3, args.repeat // 4)))
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        report["train_step"][out[0]] = {"min_s": float(out[1]), "median_s": float(out[2])}
        print(f"train step (batch 64), backend {out[0]:6s}: min {float(out[1]) * 1e3:.1f} ms, "
              f"median {float(out[2]) * 1e3:.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2)


if __name__ == "__main__":
    main()
