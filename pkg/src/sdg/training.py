"""Training loop: chronological mini-batches, Adam, early stopping.

Each epoch walks the train range in order, one forward_train + loss +
Adam step per batch (gradients clipped at global norm 5). After every
epoch the model is scored on the validation range by ranking MRR with
`eval_negatives` random negatives; the best-validation parameters are
kept and training stops after `patience` epochs without improvement.

Everything random flows from the single TrainConfig seed: torch dropout,
the per-batch diffusion/negative draws, and the per-epoch validation
candidate sets (each epoch gets its own derived seed so re-evaluating a
checkpoint reproduces its recorded val MRR).
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import numpy as np
import torch

from .events import AdjacencyIndex, DatasetSplit, EventLog, history_batch
from .evaluation import evaluate_ranking
from .model import SDGModel

GRAD_CLIP_NORM = 5.0


class NonFiniteLossError(RuntimeError):
    """Training loss became NaN/inf; message carries epoch and batch index."""


@dataclass
class TrainConfig:
    batch_size: int = 200
    lr: float = 1e-4
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    eval_negatives: int = 100

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.patience < 1 or self.patience > self.max_epochs:
            raise ValueError("need 1 <= patience <= max_epochs")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.eval_negatives < 1:
            raise ValueError("eval_negatives must be >= 1")


@dataclass
class TrainResult:
    epochs: list[dict]
    best_epoch: int
    best_val_mrr: float
    best_state: dict


def val_eval_seed(seed: int, epoch: int) -> int:
    """Seed for epoch-level validation candidate sets and sampling noise."""
    return (seed * 1_000_003 + epoch) % (2**31 - 1)


def train(model: SDGModel, log: EventLog, index: AdjacencyIndex,
          split: DatasetSplit, cfg: TrainConfig, metrics_fn=None,
          hr_ks=(10,)) -> TrainResult:
    """Optimize the model on the train range; returns per-epoch metrics
    and the best-validation state dict (also restored into `model`)."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                           betas=(0.9, 0.999), eps=1e-8)

    lo, hi = split.train
    train_idx = np.arange(lo, hi)
    if len(train_idx) == 0:
        raise ValueError("empty training range")
    hist_all = history_batch(index, log.src[train_idx], log.ts[train_idx],
                             model.config.L)

    best_mrr = -1.0
    best_epoch = -1
    best_state = copy.deepcopy(model.state_dict())
    epochs: list[dict] = []

    for epoch in range(cfg.max_epochs):
        t_start = time.time()
        model.train()
        sums = {"diff": 0.0, "last": 0.0, "inter": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(train_idx), cfg.batch_size):
            end = min(start + cfg.batch_size, len(train_idx))
            sl = slice(start, end)
            hist = type(hist_all)(hist_all.nodes[sl], hist_all.times[sl],
                                  hist_all.valid_mask[sl])
            ev = train_idx[sl]
            out = model.forward_train(hist, log.dst[ev], log.ts[ev], rng)
            breakdown = model.compute_losses(out)
            loss = breakdown.l_total
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} batch {n_batches}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP_NORM)
            opt.step()
            for key, val in breakdown.detach_floats().items():
                sums[key] += val
            n_batches += 1

        vseed = val_eval_seed(cfg.seed, epoch)
        if split.val[1] > split.val[0]:
            val_mrr = evaluate_ranking(model, index, log, split.val,
                                       negatives=cfg.eval_negatives,
                                       seed=vseed, k_list=hr_ks).mrr
        else:
            val_mrr = None  # no validation data: every epoch counts as best
        record = {
            "epoch": epoch,
            "train_loss": {k: v / n_batches for k, v in sums.items()},
            "val_mrr": val_mrr,
            "val_seed": vseed,
            "wall_time": time.time() - t_start,
        }
        epochs.append(record)
        if metrics_fn is not None:
            metrics_fn(record)

        if val_mrr is None or val_mrr > best_mrr:
            best_mrr = val_mrr if val_mrr is not None else best_mrr
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= cfg.patience:
            break

    model.load_state_dict(best_state)
    return TrainResult(epochs=epochs, best_epoch=best_epoch,
                       best_val_mrr=best_mrr, best_state=best_state)
