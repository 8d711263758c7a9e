"""Ranking evaluation, point-wise metrics, robustness perturbation, export.

Each evaluation event (u, v, t) ranks the true destination v among a set
of negative candidates by generating a destination embedding conditioned
on u's history and scoring every candidate at the final sequence position.
Ranks are pessimistic: a positive tied with negatives is placed after all
of them, so constant-score models cannot inflate MRR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .events import (AdjacencyIndex, EventLog, HistoryBatch, history_batch,
                     sample_negatives)
from .model import SDGModel

DEFAULT_HR_KS = (1, 5, 10)


@dataclass
class EvalReport:
    mrr: float
    hr_at_k: dict[int, float]
    ap: float
    roc_auc: float
    num_events: int
    ranks: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"mrr": self.mrr,
                "hr": {str(k): v for k, v in sorted(self.hr_at_k.items())},
                "ap": self.ap, "auc": self.roc_auc,
                "num_events": self.num_events}


# ----- metric primitives ----------------------------------------------------

def ranks_from_scores(pos_scores: np.ndarray, neg_scores: np.ndarray) -> np.ndarray:
    """Pessimistic rank of each positive among its negatives (1-based)."""
    pos = np.asarray(pos_scores, dtype=np.float64)[:, None]
    neg = np.asarray(neg_scores, dtype=np.float64)
    return 1 + (neg > pos).sum(axis=1) + (neg == pos).sum(axis=1)


def mrr_from_ranks(ranks: np.ndarray) -> float:
    return float(np.mean(1.0 / ranks))


def hr_from_ranks(ranks: np.ndarray, k: int) -> float:
    return float(np.mean(ranks <= k))


def average_precision(labels: np.ndarray, scores: np.ndarray) -> float:
    """AP over a pooled score list, computed by threshold sweep.

    Equals the mean of precision-at-rank over positives when scores are
    tie-free; with ties, all items sharing a threshold enter together.
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("average_precision needs both classes present")
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    s = scores[order]
    tp = np.cumsum(y)
    n_seen = np.arange(1, len(y) + 1)
    boundary = np.ones(len(s), dtype=bool)
    boundary[:-1] = s[1:] != s[:-1]
    precision = tp[boundary] / n_seen[boundary]
    recall = tp[boundary] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ----- history corruption ---------------------------------------------------

def perturb_history(history: HistoryBatch, sigma: float,
                    rng: np.random.Generator, num_nodes: int) -> HistoryBatch:
    """Corrupt floor(sigma * L) valid positions per sequence.

    Chosen positions get a uniform random real node id and a timestamp
    drawn uniformly within that sequence's valid time span. Evaluation-
    time only; sigma = 0 returns the batch untouched without consuming
    randomness.
    """
    if not (0.0 <= sigma <= 1.0):
        raise ValueError("sigma must lie in [0, 1]")
    L = history.length
    m = int(math.floor(sigma * L))
    if m == 0:
        return history
    nodes = history.nodes.copy()
    times = history.times.copy()
    for b in range(len(history)):
        valid_idx = np.flatnonzero(history.valid_mask[b])
        mm = min(m, len(valid_idx))
        if mm == 0:
            continue
        pick = rng.choice(valid_idx, size=mm, replace=False)
        nodes[b, pick] = rng.integers(0, num_nodes, size=mm)
        lo, hi = times[b, valid_idx].min(), times[b, valid_idx].max()
        times[b, pick] = rng.uniform(lo, hi, size=mm)
    return HistoryBatch(nodes, times, history.valid_mask)


# ----- evaluation drivers ---------------------------------------------------

def generate_eval_negatives(log: EventLog, ev_range: tuple[int, int],
                            count: int, seed: int) -> list[list[int]]:
    """Per-event random negatives, excluding each event's positive."""
    rng = np.random.default_rng([seed, 1])
    lo, hi = ev_range
    out = []
    for i in range(lo, hi):
        negs = sample_negatives(rng, count, log.num_nodes,
                                exclude={int(log.dst[i])})
        out.append([int(x) for x in negs])
    return out


def _final_scores(model: SDGModel, index: AdjacencyIndex, log: EventLog,
                  ev_range: tuple[int, int], neg_lists: list[list[int]],
                  seed: int, sigma: float = 0.0, batch_size: int = 256):
    """Generate once per event and score positive + negatives.

    Returns (pos_scores (E,), neg_scores (E, N)). Requires rectangular
    negative lists. Diffusion noise and perturbation draw from separate
    seed-derived streams, so rankings are identical whether negatives came
    from a file or a generator. Reports are a deterministic function of
    (model, data, negatives, seed, sigma, batch_size); the sampling noise
    stream is consumed per batch, so batch_size is part of the protocol.
    """
    lo, hi = ev_range
    E = hi - lo
    if len(neg_lists) != E:
        raise ValueError(f"{len(neg_lists)} negative lists for {E} events")
    widths = {len(x) for x in neg_lists}
    if len(widths) > 1:
        raise ValueError("negative lists must all have the same length")
    N = widths.pop() if widths else 0
    if N == 0:
        raise ValueError("need at least one negative per event")
    neg_arr = np.asarray(neg_lists, dtype=np.int64)

    rng_diff = np.random.default_rng([seed, 2])
    rng_perturb = np.random.default_rng([seed, 3])
    pos_out = np.empty(E, dtype=np.float64)
    neg_out = np.empty((E, N), dtype=np.float64)
    L = model.config.L
    for start in range(0, E, batch_size):
        end = min(start + batch_size, E)
        idx = np.arange(lo + start, lo + end)
        u, v, t = log.src[idx], log.dst[idx], log.ts[idx]
        hist = history_batch(index, u, t, L)
        if sigma > 0:
            hist = perturb_history(hist, sigma, rng_perturb, log.num_nodes)
        x_last = model.generate(hist, t, rng_diff)
        cands = np.concatenate([v[:, None], neg_arr[start:end]], axis=1)
        scores = model.score_final(x_last, cands, t).to(torch.float64).numpy()
        pos_out[start:end] = scores[:, 0]
        neg_out[start:end] = scores[:, 1:]
    return pos_out, neg_out


def evaluate_ranking(model: SDGModel, index: AdjacencyIndex, log: EventLog,
                     ev_range: tuple[int, int], negatives, seed: int = 0,
                     k_list=DEFAULT_HR_KS, sigma: float = 0.0,
                     batch_size: int = 256, keep_ranks: bool = False) -> EvalReport:
    """Rank each positive against its negatives and aggregate metrics.

    `negatives` is either a per-event list of id lists or an int count, in
    which case lists are generated from the seed. AP/AUC are computed on
    the pooled positive scores against the first negative of each event
    (the one-negative-per-positive protocol).
    """
    if isinstance(negatives, int):
        neg_lists = generate_eval_negatives(log, ev_range, negatives, seed)
    else:
        neg_lists = negatives
    pos, neg = _final_scores(model, index, log, ev_range, neg_lists,
                             seed=seed, sigma=sigma, batch_size=batch_size)
    ranks = ranks_from_scores(pos, neg)
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(pos))])
    pooled = np.concatenate([pos, neg[:, 0]])
    return EvalReport(
        mrr=mrr_from_ranks(ranks),
        hr_at_k={int(k): hr_from_ranks(ranks, int(k)) for k in k_list},
        ap=average_precision(labels, pooled),
        roc_auc=roc_auc(labels, pooled),
        num_events=len(pos),
        ranks=ranks if keep_ranks else None)


def evaluate_pointwise(model: SDGModel, index: AdjacencyIndex, log: EventLog,
                       ev_range: tuple[int, int], negatives=1,
                       seed: int = 0, batch_size: int = 256):
    """(AP, ROC-AUC) with one negative per positive."""
    if isinstance(negatives, int):
        neg_lists = generate_eval_negatives(log, ev_range, 1, seed)
    else:
        neg_lists = [x[:1] for x in negatives]
    pos, neg = _final_scores(model, index, log, ev_range, neg_lists,
                             seed=seed, batch_size=batch_size)
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(pos))])
    pooled = np.concatenate([pos, neg[:, 0]])
    return average_precision(labels, pooled), roc_auc(labels, pooled)


def export_embeddings(model: SDGModel, path) -> None:
    """CSV of the node embedding table (padding row excluded), float32."""
    weights = model.node_emb.weight.detach().to(torch.float32).numpy()
    d = weights.shape[1]
    with open(path, "w", encoding="utf-8") as f:
        f.write("node_id," + ",".join(f"dim_{j}" for j in range(d)) + "\n")
        for i in range(model.num_nodes):
            row = ",".join(format(float(x), ".9g") for x in weights[i])
            f.write(f"{i},{row}\n")
