"""On-disk layout for ingested datasets.

A data directory holds exactly three files, all byte-deterministic for a
given input so re-ingestion is idempotent:

  events.npy    structured array (src <i8, dst <i8, ts <f8), remapped ids,
                chronological order
  node_map.csv  original_id,internal_id
  stats.json    num_events, num_nodes, repeat_ratio, bipartite,
                undirected_history, sort_warning
"""

from __future__ import annotations

import json
import os

import numpy as np

from .events import EventLog, repeat_ratio

EVENTS_FILE = "events.npy"
NODE_MAP_FILE = "node_map.csv"
STATS_FILE = "stats.json"

_EVENT_DTYPE = np.dtype([("src", "<i8"), ("dst", "<i8"), ("ts", "<f8")])


def save_ingested(log: EventLog, out_dir, undirected_history: bool) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    arr = np.empty(len(log), dtype=_EVENT_DTYPE)
    arr["src"], arr["dst"], arr["ts"] = log.src, log.dst, log.ts
    np.save(os.path.join(out_dir, EVENTS_FILE), arr)
    with open(os.path.join(out_dir, NODE_MAP_FILE), "w", encoding="utf-8") as f:
        f.write("original_id,internal_id\n")
        for internal, original in enumerate(log.original_ids):
            f.write(f"{int(original)},{internal}\n")
    stats = {
        "num_events": len(log),
        "num_nodes": log.num_nodes,
        "repeat_ratio": repeat_ratio(log),
        "bipartite": log.bipartite,
        "undirected_history": bool(undirected_history),
        "sort_warning": log.sort_warning,
    }
    with open(os.path.join(out_dir, STATS_FILE), "w", encoding="utf-8") as f:
        json.dump(stats, f, sort_keys=True, indent=2)
        f.write("\n")
    return stats


def load_ingested(data_dir) -> tuple[EventLog, dict]:
    stats_path = os.path.join(data_dir, STATS_FILE)
    events_path = os.path.join(data_dir, EVENTS_FILE)
    map_path = os.path.join(data_dir, NODE_MAP_FILE)
    for p in (stats_path, events_path, map_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"not an ingested data directory: missing {p}")
    with open(stats_path, encoding="utf-8") as f:
        stats = json.load(f)
    arr = np.load(events_path)
    original = np.empty(stats["num_nodes"], dtype=np.int64)
    with open(map_path, encoding="utf-8") as f:
        next(f)
        for line in f:
            orig, internal = line.strip().split(",")
            original[int(internal)] = int(orig)
    log = EventLog(arr["src"], arr["dst"], arr["ts"],
                   num_nodes=stats["num_nodes"], bipartite=stats["bipartite"],
                   original_ids=original, sort_warning=stats["sort_warning"])
    return log, stats
