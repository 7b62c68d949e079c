"""Command line entry point: ``nar {synth,train,search,eval}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bench_data import (RecordFileError, SpaceTooLarge, generate_synthetic, layout_for,
                         load_records, read_header, space_from_records, split_indices,
                         write_records)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PROFILES, ConfigError, RunConfig, load_config
from .encoding import RecordError
from .search import NARPredictor, search
from .trainer import NumericError, train, validate

log = logging.getLogger("nar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _outdir(cfg: RunConfig, text: str | None) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if text is not None:
        (out / "config.source.json").write_text(text)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(path: str | None, what: str, metric: str):
    if not path:
        raise ConfigError(f"no {what} file given (set data.{what} or pass --{what})")
    if not Path(path).exists():
        raise DataError(f"{what} file {path} does not exist")
    records = load_records(path)
    if not records:
        raise DataError(f"{what} file {path} holds no records")
    for r in records:
        if not r.accuracy or metric not in r.accuracy:
            raise DataError(f"record {r.id!r} in {path} has no {metric!r} accuracy")
    header = read_header(path)
    return records, header, layout_for(records[0].family, header)


def train_split(cfg: RunConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation indices from the data section of the config."""
    if cfg.data.train_size is not None:
        n_train = int(cfg.data.train_size)
    elif cfg.data.train_fraction is not None:
        n_train = int(round(cfg.data.train_fraction * n))
    else:
        n_train = n - min(cfg.data.val_size, n // 10)
    n_val = min(cfg.data.val_size, n - n_train)
    split_seed = cfg.seed if cfg.data.split_seed is None else cfg.data.split_seed
    try:
        return split_indices(n, n_train, n_val, split_seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    spec = cfg.synth_spec()
    space = generate_synthetic(spec)
    path = out / "space.jsonl"
    write_records(path, space.records, space.header())
    best = space.best()
    info = {"records": str(path), "count": len(space), "best_id": best.id,
            "best_accuracy": space.accuracy(best.id)}
    _write_json(out / "space.json", info)
    log.info("wrote %d structures to %s", len(space), path)
    return info


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    metric = cfg.data.metric
    records, header, layout = _load(cfg.data.records, "records", metric)
    tr, va = train_split(cfg, len(records))
    # the patch grid always follows the data
    cfg.model.update(patches=layout.channels, resolution=layout.nodes)
    mc = cfg.model_config()
    tc = cfg.train_config()
    tc.metric = metric
    t0 = time.perf_counter()
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        res = train([records[i] for i in tr], layout, mc, tc, fh)
    elapsed = time.perf_counter() - t0
    val_recs = [records[i] for i in va]
    extra = {"space": header, "family": layout.family.value, "records": cfg.data.records,
             "train_ids": [records[i].id for i in tr], "val_ids": [r.id for r in val_recs],
             "train_config": tc.to_dict()}
    save_checkpoint(out / "checkpoint.nar", res.model, res.buckets, res.norm, extra)
    # wall-clock goes to its own file so reports stay byte-reproducible
    _write_json(out / "timing.json", {"train_seconds": elapsed})
    metrics = {"train_size": len(tr), "val_size": len(va), "iterations": len(res.log),
               "final_epoch_loss": res.epoch_losses[-1] if res.epoch_losses else None}
    if val_recs:
        vm, _ = validate(res.model, res.buckets, res.norm, val_recs, layout, metric)
        metrics.update(vm)
    _write_json(out / "metrics.json", metrics)
    log.info("trained on %d records in %.1fs; validation %s", len(tr), elapsed, metrics)
    return metrics


def _checkpoint(path: str | None):
    if not path:
        raise ConfigError("--checkpoint is required")
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def cmd_search(cfg: RunConfig, out: Path, checkpoint: str | None) -> dict:
    model, buckets, norm, header = _checkpoint(checkpoint)
    extra = header.get("extra", {})
    path = cfg.data.space or cfg.data.records or extra.get("records")
    records, rheader, layout = _load(path, "space", cfg.data.metric)
    space = space_from_records(records, rheader, cfg.data.metric)
    runs = []
    for r in range(cfg.repeats):
        sc = cfg.search_config(r)
        predictor = NARPredictor(model, buckets, norm, layout)
        with open(out / f"search_{r}.jsonl", "w", encoding="utf-8") as fh:
            rep = search(predictor, buckets, space, None, sc, fh)
            fh.write(json.dumps({"summary": rep.summary(), "config": rep.config},
                                sort_keys=True) + "\n")
        s = dict(rep.summary(), seed=sc.seed)
        runs.append(s)
        log.info("repeat %d: best %.5f rank %s", r, rep.best_accuracy, rep.best_rank)
    best = np.array([s["best_accuracy"] for s in runs], dtype=np.float64)
    summary = {"repeats": cfg.repeats, "mode": cfg.search_config().mode,
               "best_accuracy_mean": float(best.mean()),
               "best_accuracy_std": float(best.std()),
               "space_size": len(space), "runs": runs}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: str | None, subset: str) -> dict:
    model, buckets, norm, header = _checkpoint(checkpoint)
    extra = header.get("extra", {})
    path = cfg.data.records or extra.get("records")
    records, _, layout = _load(path, "records", cfg.data.metric)
    if subset == "val":
        keep = set(extra.get("val_ids", []))
        records = [r for r in records if r.id in keep]
        if not records:
            raise DataError("checkpoint lists no validation ids present in the record file")
    metrics, detail = validate(model, buckets, norm, records, layout, cfg.data.metric)
    metrics["subset"] = subset
    _write_json(out / "metrics.json", metrics)
    with open(out / "scatter.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "accuracy", "true_rank", "score", "true_tier", "predicted_tier"])
        acc = detail["accuracy"]
        order = sorted(range(len(acc)), key=lambda i: (-acc[i], detail["ids"][i]))
        rank = np.empty(len(acc), dtype=np.int64)
        rank[order] = np.arange(1, len(acc) + 1)
        for i, rid in enumerate(detail["ids"]):
            w.writerow([rid, repr(float(acc[i])), int(rank[i]), repr(float(detail["score"][i])),
                        int(detail["true_tier"][i]) + 1, int(detail["predicted_tier"][i]) + 1])
    return metrics


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nar", description="Neural architecture ranker")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--profile", choices=sorted(PROFILES))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("synth", help="enumerate a synthetic search space")
    common(sp)
    sp.add_argument("--nodes", type=int)
    sp.add_argument("--max-edges", type=int)
    sp.add_argument("--cells", type=int)
    sp.add_argument("--budget", type=int)

    sp = sub.add_parser("train", help="train the ranker on a record file")
    common(sp)
    sp.add_argument("--records")

    sp = sub.add_parser("search", help="run guided search with a trained checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--space", help="record file defining the search space")
    sp.add_argument("--mode", choices=["statistics", "interval", "random"])
    sp.add_argument("--repeats", type=int)

    sp = sub.add_parser("eval", help="score a record file with a trained checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--records")
    sp.add_argument("--subset", choices=["all", "val"], default="all")
    return p


def _resolve(args) -> tuple[RunConfig, str | None]:
    cfg, text = load_config(args.config, profile=args.profile, seed=args.seed, out=args.out,
                            repeats=getattr(args, "repeats", None),
                            mode=getattr(args, "mode", None))
    if args.command == "synth":
        for key, attr in (("nodes", "nodes"), ("max_edges", "max_edges"),
                          ("cells", "cells"), ("budget", "budget")):
            val = getattr(args, attr)
            if val is not None:
                cfg.synth[key] = val
        try:
            cfg.synth_spec()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
    if getattr(args, "records", None):
        cfg.data.records = args.records
    if getattr(args, "space", None):
        cfg.data.space = args.space
    return cfg, text


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, text = _resolve(args)
        out = _outdir(cfg, text)
        if args.command == "synth":
            result = cmd_synth(cfg, out)
        elif args.command == "train":
            result = cmd_train(cfg, out)
        elif args.command == "search":
            result = cmd_search(cfg, out, args.checkpoint)
        else:
            result = cmd_eval(cfg, out, args.checkpoint, args.subset)
    except (ConfigError, SpaceTooLarge) as e:
        print(f"nar: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RecordFileError, RecordError, CheckpointError, OSError) as e:
        print(f"nar: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"nar: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({k: v for k, v in result.items() if k != "runs"}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
