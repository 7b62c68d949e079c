"""Calibrate the desk-scale acceptance thresholds on the default synthetic space.

For several training seeds: held-out Kendall tau and tier accuracies, then
guided search (statistics and random modes, 5 search seeds each).  Two
reference points bracket the ranker: a perfect-oracle classifier substituted
for it (upper bound) and plain uniform sampling with the same query budget.

Writes calibration/calibration.json and calibration/CALIBRATION.md.
Usage: python3 scripts/calibrate.py [--train-seeds 5]
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from nar.bench_data import generate_synthetic
from nar.cli import train_split
from nar.config import build_config
from nar.search import NARPredictor, OraclePredictor, search
from nar.trainer import train, validate

OUT = Path(__file__).resolve().parents[1] / "calibration"


def ranks_of(space, predictor_factory, buckets, cfg, mode, seeds=5, iterations=None):
    out = []
    for s in range(seeds):
        sc = cfg.search_config(s)
        sc.mode = mode
        if iterations is not None:
            sc.iterations = iterations
        rep = search(predictor_factory(), buckets, space, None, sc)
        out.append(rep.best_rank)
    return out


def random_baseline(n, queries, runs, seed=0):
    rng = np.random.default_rng(seed)
    # best rank among `queries` distinct uniform draws
    return [int(np.min(rng.choice(n, size=queries, replace=False)) + 1) for _ in range(runs)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train-seeds", type=int, default=5)
    args = ap.parse_args()
    cfg0 = build_config(profile="synth")
    space = generate_synthetic(cfg0.synth_spec())
    n = len(space)
    top = n // 100
    lay = space.layout
    rows = []
    oracle = None
    for seed in range(args.train_seeds):
        cfg = build_config(profile="synth", seed=seed)
        cfg.model.update(patches=lay.channels, resolution=lay.nodes)
        tr, va = train_split(cfg, n)
        t0 = time.perf_counter()
        res = train([space.records[i] for i in tr], lay, cfg.model_config(), cfg.train_config())
        secs = time.perf_counter() - t0
        m, _ = validate(res.model, res.buckets, res.norm, [space.records[i] for i in va], lay)

        def nar():
            return NARPredictor(res.model, res.buckets, res.norm, lay)

        stats = ranks_of(space, nar, res.buckets, cfg, "statistics")
        rand = ranks_of(space, nar, res.buckets, cfg, "random")
        if oracle is None:
            oracle = {
                "iterations_10": ranks_of(space, lambda: OraclePredictor(space), res.buckets,
                                          cfg, "statistics", iterations=10),
                "iterations_50": ranks_of(space, lambda: OraclePredictor(space), res.buckets,
                                          cfg, "statistics"),
            }
        rows.append({"train_seed": seed, "train_seconds": round(secs, 1),
                     "kendall_tau": m["kendall_tau"], "tier_accuracy": m["tier_accuracy"],
                     "adjacent_tier_accuracy": m["adjacent_tier_accuracy"],
                     "statistics_ranks": stats, "random_mode_ranks": rand})
        print(json.dumps(rows[-1]))
    base = random_baseline(n, 250, 1000)
    result = {"space_size": n, "top_one_percent": top, "runs": rows, "oracle_harness": oracle,
              "uniform_250": {"median_best_rank": float(np.median(base)),
                              "hit_rate": float(np.mean(np.asarray(base) <= top)),
                              "analytic_hit_rate": 1 - (1 - top / n) ** 250}}
    OUT.mkdir(exist_ok=True)
    (OUT / "calibration.json").write_text(json.dumps(result, indent=2) + "\n")
    (OUT / "CALIBRATION.md").write_text(render(result))
    print(render(result))


def render(r):
    top = r["top_one_percent"]
    lines = [
        "# Calibration of the synthetic acceptance thresholds",
        "",
        f"Space: default synthetic space, {r['space_size']} structures; top 1% = rank <= {top}.",
        "Profile: `synth` (2 layers, D 32, 4 heads, FFN 64, batch 64, 40 epochs, 2% train split,",
        "1024 held-out records). Search: 50 iterations, 64 samples, top-5 (250 queries).",
        "Regenerate with `python3 scripts/calibrate.py`.",
        "",
        "## Upper bound: perfect-oracle classifier",
        "",
        f"- 10 iterations, 5 search seeds: best ranks {r['oracle_harness']['iterations_10']}",
        f"- 50 iterations, 5 search seeds: best ranks {r['oracle_harness']['iterations_50']}",
        "",
        "## Lower reference: uniform sampling, 250 distinct queries",
        "",
        f"- median best rank {r['uniform_250']['median_best_rank']:.0f};"
        f" top-1% hit rate {r['uniform_250']['hit_rate']:.3f}"
        f" (analytic {r['uniform_250']['analytic_hit_rate']:.3f})",
        "",
        "## Trained ranker",
        "",
        "| train seed | tau | tier acc | adjacent | statistics ranks | hits | random-mode ranks | hits |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for row in r["runs"]:
        s, q = row["statistics_ranks"], row["random_mode_ranks"]
        lines.append(f"| {row['train_seed']} | {row['kendall_tau']:.3f} | {row['tier_accuracy']:.3f} | "
                     f"{row['adjacent_tier_accuracy']:.3f} | {s} | {sum(x <= top for x in s)}/5 | "
                     f"{q} | {sum(x <= top for x in q)}/5 |")
    taus = [row["kendall_tau"] for row in r["runs"]]
    tiers = [row["tier_accuracy"] for row in r["runs"]]
    adj = [row["adjacent_tier_accuracy"] for row in r["runs"]]
    med = float(np.median([x for row in r["runs"] for x in row["statistics_ranks"]]))
    lines += [
        "",
        "## Frozen thresholds",
        "",
        f"- Kendall tau >= 0.6 (observed min {min(taus):.3f})",
        f"- tier accuracy > 0.35 (observed min {min(tiers):.3f}); adjacent > 0.75 (observed min {min(adj):.3f})",
        f"- best rank within the top 1% in >= 4 of 5 search seeds; median guided best rank {med:.0f}"
        f" versus {r['uniform_250']['median_best_rank']:.0f} for uniform sampling",
        "",
        "The top-1% criterion is weak on this space: uniform sampling with the same budget",
        "already reaches it most of the time. The median best rank above is the more",
        "informative comparison and is recorded here rather than gated.",
        "",
        "## Notes",
        "",
        "- Random mode (uniform samples only) matches or beats statistics mode here. Guided",
        "  cells are built by chaining each node to a random predecessor and adding random",
        "  edges, which yields short paths (mean longest path 2.6 edges versus 4.0 for",
        "  uniform structures); the synthetic oracle rewards long paths. Measured",
        "  with the seed-0 ranker, guided samples have median true rank ~16,000 (~15,000",
        "  without FLOPs/params bounds) against ~9,400 for uniform samples. Search still",
        "  wins over plain uniform querying because the ranker picks the candidates.",
        "- The perfect-oracle run at 10 iterations misses the top 1% on one search seed.",
        "  Half of each batch is uniform, so 320 uniform draws miss the top 1% with",
        "  probability ~4%; the 10-iteration guarantee is probabilistic, not certain.",
        "- Search seeds are train seed + repeat, so random-mode rows share draws across",
        "  train seeds and are not independent. The oracle at 50 iterations and the",
        "  seed-0 ranker reach identical ranks: the best found is bounded by what gets sampled.",
        "",
    ]
    return "\n".join(lines)


if __name__ == "__main__":
    main()
