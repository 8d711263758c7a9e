"""Event streams, time-sorted adjacency, and history extraction.

A dynamic graph is a chronological stream of (src, dst, ts) interactions.
This module owns everything that happens before tensors exist:

- EventLog: the remapped, chronologically sorted interaction stream
- AdjacencyIndex: per-node neighbor lists sorted by (ts, event idx), so the
  L most recent neighbors strictly before a query time come out of one
  binary search plus a slice
- chronological train/val/test splits, repeat-ratio statistics
- uniform negative sampling and predefined-negatives files

EventLog and AdjacencyIndex are immutable after construction; concurrent
reads are safe.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

# Timestamp stored in left-padded history slots. The padding *node* id is
# `num_nodes` (real ids are 0..num_nodes-1); the embedding table reserves
# one extra row for it.
PAD_TIME = 0.0


@dataclass(frozen=True)
class Event:
    """One timestamped interaction; `idx` is its ordinal in the log."""

    src: int
    dst: int
    ts: float
    idx: int


class EventLog:
    """Chronologically sorted interaction stream over nodes 0..num_nodes-1.

    Backed by flat arrays (src, dst int64; ts float64). `original_ids[i]`
    is the raw dataset id that internal id i was remapped from; remapping
    is stable (first-appearance order over src then dst, row by row).
    `sort_warning` is set when the input was not chronological and a
    stable sort was applied.
    """

    def __init__(self, src, dst, ts, num_nodes, bipartite=False,
                 original_ids=None, sort_warning=False):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        ts = np.asarray(ts, dtype=np.float64)
        if not (src.shape == dst.shape == ts.shape) or src.ndim != 1:
            raise ValueError("src, dst, ts must be 1-D arrays of equal length")
        if len(src) and (src.min() < 0 or dst.min() < 0):
            raise ValueError("node ids must be non-negative")
        if len(src) and max(src.max(), dst.max()) >= num_nodes:
            raise ValueError("node id out of range for num_nodes=%d" % num_nodes)
        if len(ts) and ts.min() < 0:
            raise ValueError("timestamps must be non-negative")
        if len(ts) > 1 and np.any(np.diff(ts) < 0):
            raise ValueError("EventLog requires non-decreasing timestamps")
        self.src = src
        self.dst = dst
        self.ts = ts
        self.num_nodes = int(num_nodes)
        self.bipartite = bool(bipartite)
        self.original_ids = (np.arange(num_nodes, dtype=np.int64)
                             if original_ids is None
                             else np.asarray(original_ids, dtype=np.int64))
        self.sort_warning = bool(sort_warning)

    def __len__(self):
        return len(self.src)

    def __getitem__(self, i) -> Event:
        return Event(int(self.src[i]), int(self.dst[i]), float(self.ts[i]), int(i) % len(self))

    @property
    def pad_id(self) -> int:
        return self.num_nodes


@dataclass(frozen=True)
class HistorySequence:
    """The most recent neighbors of one node strictly before a query time.

    Fixed length L, left-padded: valid entries form a suffix. `nodes` uses
    the padding id for invalid slots, `times` uses PAD_TIME.
    """

    nodes: np.ndarray       # (L,) int64
    times: np.ndarray       # (L,) float64
    valid_mask: np.ndarray  # (L,) bool


@dataclass(frozen=True)
class HistoryBatch:
    """Stacked HistorySequence rows for a batch of queries."""

    nodes: np.ndarray       # (B, L) int64
    times: np.ndarray       # (B, L) float64
    valid_mask: np.ndarray  # (B, L) bool

    def __len__(self):
        return self.nodes.shape[0]

    @property
    def length(self) -> int:
        return self.nodes.shape[1]


@dataclass(frozen=True)
class DatasetSplit:
    """Contiguous chronological [start, end) event ranges."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]
    boundaries: tuple[float, float]

    def range_of(self, name: str) -> tuple[int, int]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split name: {name!r}") from None


class AdjacencyIndex:
    """Per-node neighbor lists sorted by (timestamp, event idx).

    Every event (u, v, t) appears in u's list; with undirected_history it
    also appears in v's list. Chronological construction is O(n) since
    appends already arrive in (ts, idx) order.
    """

    def __init__(self, log: EventLog, undirected_history: bool = True):
        n = log.num_nodes
        nbr: list[list[int]] = [[] for _ in range(n)]
        tss: list[list[float]] = [[] for _ in range(n)]
        idxs: list[list[int]] = [[] for _ in range(n)]
        for i in range(len(log)):
            u, v, t = int(log.src[i]), int(log.dst[i]), float(log.ts[i])
            nbr[u].append(v)
            tss[u].append(t)
            idxs[u].append(i)
            if undirected_history and v != u:  # self-loops enter once
                nbr[v].append(u)
                tss[v].append(t)
                idxs[v].append(i)
        self.num_nodes = n
        self.pad_id = log.pad_id
        self.undirected_history = bool(undirected_history)
        self.neighbors = [np.array(a, dtype=np.int64) for a in nbr]
        self.times = [np.array(a, dtype=np.float64) for a in tss]
        self.event_idx = [np.array(a, dtype=np.int64) for a in idxs]

    def degree(self, u: int) -> int:
        return len(self.neighbors[u])


def load_events(path, fmt: str = "csv", bipartite: bool = False) -> EventLog:
    """Read a `src,dst,ts` CSV into an EventLog.

    Node ids are remapped to 0..num_nodes-1 in first-appearance order and
    the reverse map is kept on the returned log (`original_ids`). Extra
    columns are ignored. Rows out of chronological order are stably sorted
    and `sort_warning` is set on the result.
    """
    if fmt != "csv":
        raise ValueError(f"unsupported format: {fmt!r}")
    if not os.path.exists(path):
        raise FileNotFoundError(f"events file not found: {path}")

    src_raw, dst_raw, ts = [], [], []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:3]] != ["src", "dst", "ts"]:
            raise ValueError(f"{path}: expected header starting with src,dst,ts")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                u = int(row[0])
                v = int(row[1])
                t = float(row[2])
            except (ValueError, IndexError) as e:
                raise ValueError(f"{path}: malformed row at line {lineno}: {row!r}") from e
            if u < 0 or v < 0:
                raise ValueError(f"{path}: negative node id at line {lineno}")
            if t < 0:
                raise ValueError(f"{path}: negative timestamp at line {lineno}")
            src_raw.append(u)
            dst_raw.append(v)
            ts.append(t)

    id_map: dict[int, int] = {}
    for u, v in zip(src_raw, dst_raw):
        if u not in id_map:
            id_map[u] = len(id_map)
        if v not in id_map:
            id_map[v] = len(id_map)
    src = np.array([id_map[u] for u in src_raw], dtype=np.int64)
    dst = np.array([id_map[v] for v in dst_raw], dtype=np.int64)
    ts = np.array(ts, dtype=np.float64)
    original = np.empty(len(id_map), dtype=np.int64)
    for raw, internal in id_map.items():
        original[internal] = raw

    sort_warning = bool(len(ts) > 1 and np.any(np.diff(ts) < 0))
    if sort_warning:
        order = np.argsort(ts, kind="stable")
        src, dst, ts = src[order], dst[order], ts[order]

    return EventLog(src, dst, ts, num_nodes=len(id_map), bipartite=bipartite,
                    original_ids=original, sort_warning=sort_warning)


def build_index(log: EventLog, undirected_history: bool = True) -> AdjacencyIndex:
    return AdjacencyIndex(log, undirected_history=undirected_history)


def recent_neighbors(index: AdjacencyIndex, u: int, t: float, L: int) -> HistorySequence:
    """The (up to) L most recent neighbors of u with ts strictly < t.

    Binary search on the per-node time array locates the cut point in
    O(log deg(u)); ties at equal timestamps resolve by event idx (already
    the storage order). Returns a left-padded length-L sequence.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if not (0 <= u < index.num_nodes):
        raise ValueError(f"node id {u} out of range")
    cut = int(np.searchsorted(index.times[u], t, side="left"))
    lo = max(cut - L, 0)
    k = cut - lo
    nodes = np.full(L, index.pad_id, dtype=np.int64)
    times = np.full(L, PAD_TIME, dtype=np.float64)
    mask = np.zeros(L, dtype=bool)
    if k > 0:
        nodes[L - k:] = index.neighbors[u][lo:cut]
        times[L - k:] = index.times[u][lo:cut]
        mask[L - k:] = True
    return HistorySequence(nodes, times, mask)


def history_batch(index: AdjacencyIndex, src, t, L: int) -> HistoryBatch:
    """recent_neighbors for a batch of (u, t) queries, stacked to (B, L)."""
    src = np.asarray(src, dtype=np.int64)
    t = np.asarray(t, dtype=np.float64)
    B = len(src)
    nodes = np.full((B, L), index.pad_id, dtype=np.int64)
    times = np.full((B, L), PAD_TIME, dtype=np.float64)
    mask = np.zeros((B, L), dtype=bool)
    for b in range(B):
        u = int(src[b])
        cut = int(np.searchsorted(index.times[u], t[b], side="left"))
        lo = max(cut - L, 0)
        k = cut - lo
        if k > 0:
            nodes[b, L - k:] = index.neighbors[u][lo:cut]
            times[b, L - k:] = index.times[u][lo:cut]
            mask[b, L - k:] = True
    return HistoryBatch(nodes, times, mask)


def chronological_split(log: EventLog, train_frac: float = 0.70,
                        val_frac: float = 0.15) -> DatasetSplit:
    """Split event indices at floor(n*train_frac) and floor(n*(train+val))."""
    if not (0.0 < train_frac < 1.0) or not (0.0 < val_frac < 1.0):
        raise ValueError("split fractions must lie in (0, 1)")
    if train_frac + val_frac >= 1.0:
        raise ValueError("train_frac + val_frac must be < 1")
    n = len(log)
    a = int(np.floor(n * train_frac))
    b = int(np.floor(n * (train_frac + val_frac)))
    t_a = float(log.ts[min(a, n - 1)]) if n else 0.0
    t_b = float(log.ts[min(b, n - 1)]) if n else 0.0
    return DatasetSplit(train=(0, a), val=(a, b), test=(b, n), boundaries=(t_a, t_b))


def repeat_ratio(log: EventLog) -> float:
    """Fraction of events whose (src, dst) pair appeared earlier in the log."""
    if len(log) == 0:
        return 0.0
    seen: set[tuple[int, int]] = set()
    repeats = 0
    for u, v in zip(log.src.tolist(), log.dst.tolist()):
        if (u, v) in seen:
            repeats += 1
        else:
            seen.add((u, v))
    return repeats / len(log)


def sample_negatives(rng: np.random.Generator, n: int, pool_size: int,
                     exclude=()) -> np.ndarray:
    """n ids drawn uniformly from {0..pool_size-1} minus `exclude`.

    Draws are i.i.d. (with replacement across the n slots) and
    deterministic under a fixed generator state. Rejection resampling is
    used while the exclusion set is small relative to the pool; otherwise
    the allowed ids are materialized.
    """
    exclude = set(int(e) for e in exclude)
    allowed = pool_size - len(exclude)
    if allowed <= 0:
        raise ValueError("candidate pool exhausted by exclusion set")
    if len(exclude) == 0:
        return rng.integers(0, pool_size, size=n, dtype=np.int64)
    if len(exclude) * 2 >= pool_size:
        ids = np.array(sorted(set(range(pool_size)) - exclude), dtype=np.int64)
        return ids[rng.integers(0, len(ids), size=n)]
    out = rng.integers(0, pool_size, size=n, dtype=np.int64)
    bad = np.isin(out, list(exclude))
    while bad.any():
        out[bad] = rng.integers(0, pool_size, size=int(bad.sum()), dtype=np.int64)
        bad = np.isin(out, list(exclude))
    return out


def load_negatives_file(path, num_nodes: int, expected_events: int | None = None):
    """Per-event candidate lists: one whitespace-separated id line per event."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"negatives file not found: {path}")
    lists: list[list[int]] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                raise ValueError(f"{path}: empty candidate list at line {lineno}")
            ids = []
            for p in parts:
                v = int(p)
                if not (0 <= v < num_nodes):
                    raise ValueError(
                        f"{path}: unknown node id {v} at line {lineno} "
                        f"(num_nodes={num_nodes})")
                ids.append(v)
            lists.append(ids)
    if expected_events is not None and len(lists) != expected_events:
        raise ValueError(
            f"{path}: {len(lists)} candidate lists but {expected_events} "
            f"evaluation events")
    return lists
