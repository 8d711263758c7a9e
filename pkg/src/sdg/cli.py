"""Command-line surface: ingest, train, eval, export-emb.

Exit codes: 2 input/format errors, 3 non-finite training loss, 4 I/O
failure, 5 checkpoint/config mismatch. Identical inputs and seeds give
byte-identical primary outputs (metrics JSON modulo the wall_time field).
The SDG_THREADS environment variable caps tensor-op threads (0 = auto).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np
import torch

from . import dataio
from .checkpoint import (CheckpointMismatchError, config_hash,
                         load_checkpoint, save_checkpoint)
from .config import format_config, load_run_config
from .events import build_index, chronological_split, load_events, load_negatives_file
from .evaluation import evaluate_ranking, export_embeddings
from .model import SDGModel
from .training import NonFiniteLossError, TrainConfig, train

EXIT_FORMAT = 2
EXIT_NONFINITE = 3
EXIT_IO = 4
EXIT_MISMATCH = 5


def _apply_thread_cap() -> None:
    raw = os.environ.get("SDG_THREADS", "").strip()
    if raw and raw != "0":
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"SDG_THREADS must be an integer, got {raw!r}")
        if n > 0:
            torch.set_num_threads(n)


def cmd_ingest(args) -> int:
    undirected = args.undirected_history or not args.bipartite
    log = load_events(args.events, bipartite=args.bipartite)
    stats = dataio.save_ingested(log, args.out, undirected_history=undirected)
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    log, stats = dataio.load_ingested(args.data)
    split = chronological_split(log, cfg["train_frac"], cfg["val_frac"])
    index = build_index(log, undirected_history=stats["undirected_history"])

    model_cfg = cfg.model_config()
    train_cfg: TrainConfig = cfg.train_config()
    model = SDGModel(model_cfg, log.num_nodes, seed=train_cfg.seed)
    chash = config_hash(model_cfg, log.num_nodes)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as f:
        f.write(format_config(cfg))

    metrics_path = os.path.join(args.out, "metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as metrics_file:
        def emit(record: dict) -> None:
            line = dict(record)
            line["seed"] = train_cfg.seed
            line["config_hash"] = chash
            metrics_file.write(json.dumps(line, sort_keys=True) + "\n")
            metrics_file.flush()
            val = line["val_mrr"]
            print(f"epoch {line['epoch']}: "
                  f"loss={line['train_loss']['total']:.4f} "
                  f"val_mrr={val if val is None else format(val, '.4f')}")

        result = train(model, log, index, split, train_cfg, metrics_fn=emit)

    ckpt_path = os.path.join(args.out, "checkpoint.sdg")
    save_checkpoint(model, ckpt_path, extra={
        "seed": train_cfg.seed,
        "train_frac": cfg["train_frac"],
        "val_frac": cfg["val_frac"],
        "best_epoch": result.best_epoch,
        "best_val_mrr": result.best_val_mrr,
    })
    print(f"best epoch {result.best_epoch} val_mrr={result.best_val_mrr:.4f} "
          f"-> {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    log, stats = dataio.load_ingested(args.data)
    if header["num_nodes"] != log.num_nodes:
        raise CheckpointMismatchError(
            f"checkpoint was trained with num_nodes={header['num_nodes']}, "
            f"data directory has {log.num_nodes}")
    extra = header.get("extra", {})
    split = chronological_split(log, extra.get("train_frac", 0.70),
                                extra.get("val_frac", 0.15))
    ev_range = split.range_of(args.split)
    if ev_range[1] <= ev_range[0]:
        raise ValueError(f"{args.split} range is empty")
    index = build_index(log, undirected_history=stats["undirected_history"])

    seed = args.seed if args.seed is not None else extra.get("seed", 0)
    if args.negatives is not None:
        negatives = load_negatives_file(args.negatives, log.num_nodes,
                                        expected_events=ev_range[1] - ev_range[0])
    else:
        negatives = args.num_neg

    t0 = time.time()
    report = evaluate_ranking(model, index, log, ev_range, negatives,
                              seed=seed, sigma=args.sigma)
    payload = report.to_dict()
    payload.update({"split": args.split, "sigma": args.sigma, "seed": seed,
                    "config_hash": header["config_hash"],
                    "wall_time": time.time() - t0})
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    print(json.dumps({k: payload[k] for k in ("mrr", "hr", "ap", "auc")},
                     sort_keys=True))
    return 0


def cmd_export_emb(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    export_embeddings(model, args.out)
    print(f"wrote {model.num_nodes} embeddings to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdg",
                                description="Sequence diffusion for temporal "
                                            "link prediction")
    sub = p.add_subparsers(dest="command", required=True)

    pi = sub.add_parser("ingest", help="convert a src,dst,ts CSV into a data dir")
    pi.add_argument("--events", required=True)
    pi.add_argument("--out", required=True)
    pi.add_argument("--bipartite", action="store_true")
    pi.add_argument("--undirected-history", action="store_true",
                    dest="undirected_history",
                    help="force two-sided histories (default: on unless "
                         "--bipartite)")
    pi.set_defaults(fn=cmd_ingest)

    pt = sub.add_parser("train", help="train on an ingested data dir")
    pt.add_argument("--config", default=None)
    pt.add_argument("--set", action="append", metavar="KEY=VALUE")
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True)
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--split", default="test", choices=["train", "val", "test"])
    group = pe.add_mutually_exclusive_group()
    group.add_argument("--negatives", default=None,
                       help="predefined negatives file, one id list per event")
    group.add_argument("--num-neg", type=int, default=100, dest="num_neg")
    pe.add_argument("--sigma", type=float, default=0.0,
                    help="history corruption ratio in [0, 1]")
    pe.add_argument("--seed", type=int, default=None)
    pe.add_argument("--out", required=True)
    pe.set_defaults(fn=cmd_eval)

    px = sub.add_parser("export-emb", help="dump the node embedding table")
    px.add_argument("--checkpoint", required=True)
    px.add_argument("--out", required=True)
    px.set_defaults(fn=cmd_export_emb)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.fn(args)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except CheckpointMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
