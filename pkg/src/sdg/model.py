"""SDG model: history encoder, sequence targets, denoiser, scoring head.

Pipeline for one interaction (u, v, t):

  1. history  = the L most recent neighbors of u before t (left-padded)
  2. context  = causal transformer over history embeddings + positions
  3. target   = history shifted left by one with (v, t) appended
  4. x0       = embeddings of the target sequence; corrupted to x_k
  5. x0_hat   = denoiser(x_k, k | context): step embedding added to x_k,
                context refined by a causal transformer, cross-attention
                with queries from the refined context and keys/values
                from the time-conditioned noisy sequence
  6. scores   = MLP over concat(x0_hat * candidate embedding, projected
                elapsed-time feature), one scalar per position/candidate

Position alignment: output row i of the denoiser (query = history slot i)
predicts target slot i, i.e. the interaction after history slot i; the
final row predicts the destination at time t.

Ablation switches on SDGConfig:
  sequence_diffusion=False  noise/denoise the final position only and
                            restrict losses to it
  diffusion_enabled=False   skip the diffusion path entirely and score
                            the encoder output directly
  denoiser_kind="mlp"       replace the transformer denoiser with a
                            position-wise MLP over (context, noisy input)
  diff_loss_kind="mse"      squared-error reconstruction instead of cosine
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from . import losses as losses_mod
from .diffusion import SequenceTensor, forward_marginal, sample_loop
from .events import AdjacencyIndex, HistoryBatch, history_batch
from .layers import (MLP, CausalBlock, CrossBlock, embed_lookup,
                     init_head_params, init_transformer_params,
                     sinusoidal_pe, step_embedding)
from .schedule import make_schedule

TASK_LOSSES = ("bce", "bpr")
DENOISER_KINDS = ("cross_attention", "mlp")
DIFF_LOSS_KINDS = ("cosine", "mse")


@dataclass
class SDGConfig:
    L: int = 30
    d: int = 64
    K: int = 32
    n_layers: int = 1
    schedule_kind: str = "cosine"
    lambda_diff: float = 0.2
    lambda_inter: float = 1.0
    task_loss: str = "bce"
    heads: int = 2
    ffn_dim: int | None = None
    dropout: float = 0.1
    sequence_diffusion: bool = True
    diffusion_enabled: bool = True
    diff_loss_kind: str = "cosine"
    denoiser_kind: str = "cross_attention"
    # extension hook for recurring-interaction datasets; scoring with a
    # repeat-time feature is not implemented, the flag only reserves the
    # configuration surface
    repeat_time_encoding: bool = False

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("L must be >= 2 (target construction shifts by one)")
        if self.d % 2 != 0:
            raise ValueError("d must be even")
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.lambda_diff < 0 or self.lambda_inter < 0:
            raise ValueError("loss weights must be non-negative")
        if self.task_loss not in TASK_LOSSES:
            raise ValueError(f"task_loss must be one of {TASK_LOSSES}")
        if self.denoiser_kind not in DENOISER_KINDS:
            raise ValueError(f"denoiser_kind must be one of {DENOISER_KINDS}")
        if self.diff_loss_kind not in DIFF_LOSS_KINDS:
            raise ValueError(f"diff_loss_kind must be one of {DIFF_LOSS_KINDS}")
        if self.repeat_time_encoding:
            raise NotImplementedError(
                "repeat_time_encoding is a reserved extension hook; only the "
                "default scoring path (no repeat-time feature) is implemented")

    @property
    def resolved_ffn_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.d

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ContextTensor:
    """Encoder output (B, L, d) plus the history validity mask (B, L)."""

    values: torch.Tensor
    valid_mask: torch.Tensor


@dataclass(frozen=True)
class TargetSequence:
    """History shifted left by one with the ground-truth (v, t) appended."""

    nodes: np.ndarray       # (B, L) int64
    times: np.ndarray       # (B, L) float64
    valid_mask: np.ndarray  # (B, L) bool


@dataclass
class ForwardTrainOutput:
    x0: SequenceTensor
    x0_hat: SequenceTensor | None   # None when diffusion is disabled
    scores_pos: torch.Tensor        # (B, L)
    scores_neg: torch.Tensor        # (B, L)
    target: TargetSequence
    loss_mask: torch.Tensor         # (B, L) positions entering the losses
    scoring_values: torch.Tensor    # (B, L, d) tensor the scores came from
    k: int | None
    negatives: np.ndarray           # (B, L) int64


def build_target(history: HistoryBatch, dst, t) -> TargetSequence:
    """Shift the history one step left and append the destination."""
    dst = np.asarray(dst, dtype=np.int64)
    t = np.asarray(t, dtype=np.float64)
    nodes = np.concatenate([history.nodes[:, 1:], dst[:, None]], axis=1)
    times = np.concatenate([history.times[:, 1:], t[:, None]], axis=1)
    mask = np.concatenate(
        [history.valid_mask[:, 1:], np.ones((len(dst), 1), dtype=bool)], axis=1)
    return TargetSequence(nodes, times, mask)


def shifted_target_mask(history_mask: np.ndarray) -> np.ndarray:
    """Validity mask a target sequence would have, without knowing dst."""
    B = history_mask.shape[0]
    return np.concatenate(
        [history_mask[:, 1:], np.ones((B, 1), dtype=bool)], axis=1)


class SDGModel(nn.Module):
    """Parameter bundle and forward passes; see module docstring."""

    def __init__(self, config: SDGConfig, num_nodes: int, seed: int = 0):
        super().__init__()
        if num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        self.config = config
        self.num_nodes = int(num_nodes)
        self.pad_id = self.num_nodes
        self.emb_scale = math.sqrt(config.d)
        self.schedule = make_schedule(config.schedule_kind, config.K)

        c = config
        ffn = c.resolved_ffn_dim
        # The extra row is the padding token. It is zero-initialized but
        # deliberately trainable: predictions at the first valid target
        # position are conditioned on padded query slots, so this row acts
        # as the learned no-history prior and must receive gradients.
        self.node_emb = nn.Embedding(num_nodes + 1, c.d)
        self.encoder_blocks = nn.ModuleList(
            CausalBlock(c.d, c.heads, ffn, c.dropout) for _ in range(c.n_layers))
        self.step_mlp = MLP([c.d, c.d, c.d])
        self.ctx_blocks = nn.ModuleList(
            CausalBlock(c.d, c.heads, ffn, c.dropout) for _ in range(c.n_layers))
        if c.denoiser_kind == "cross_attention":
            self.cross_blocks = nn.ModuleList(
                CrossBlock(c.d, c.heads, ffn, c.dropout) for _ in range(c.n_layers))
            self.mlp_denoiser = None
        else:
            self.cross_blocks = None
            self.mlp_denoiser = MLP([2 * c.d, ffn, c.d])
        self.dt_proj = nn.Linear(1, c.d)
        self.scoring_mlp = MLP([2 * c.d, c.d, 1])

        self.register_buffer(
            "pos_encoding", sinusoidal_pe(c.L, c.d), persistent=False)
        steps = torch.stack(
            [step_embedding(k, c.d) for k in range(1, c.K + 1)])
        self.register_buffer("step_table", steps, persistent=False)

        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.node_emb.weight.normal_(0.0, 0.02, generator=gen)
            self.node_emb.weight[self.pad_id].zero_()
        init_transformer_params(self.encoder_blocks, gen)
        init_head_params(self.step_mlp, gen)
        init_transformer_params(self.ctx_blocks, gen)
        if self.cross_blocks is not None:
            init_transformer_params(self.cross_blocks, gen)
        else:
            init_transformer_params(self.mlp_denoiser, gen)
        init_head_params(self.dt_proj, gen)
        init_head_params(self.scoring_mlp, gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.node_emb.weight.dtype

    # ----- encoding -------------------------------------------------------

    def encode_history(self, history: HistoryBatch) -> ContextTensor:
        """Causal transformer over node embeddings plus positional encoding.

        Lookups are scaled by sqrt(d) before the unit-amplitude positional
        encoding is added (the usual transformer convention); without it
        the 0.02-scale content drowns under the positional signal and
        training stalls. Ids stored at padded slots are ignored: they are
        forced to the padding token before lookup so garbage in masked
        positions can never reach any output.
        """
        nodes = torch.from_numpy(history.nodes)
        mask = torch.from_numpy(history.valid_mask)
        nodes = torch.where(mask, nodes, torch.full_like(nodes, self.pad_id))
        z = embed_lookup(self.node_emb, nodes) * self.emb_scale + self.pos_encoding
        for blk in self.encoder_blocks:
            z = blk(z, mask)
        return ContextTensor(z, mask)

    # ----- denoising ------------------------------------------------------

    def refine_context(self, ctx: ContextTensor) -> ContextTensor:
        """Step-independent half of the denoiser (causal pass over the
        context); sampling loops compute it once and reuse it."""
        if self.mlp_denoiser is not None:
            return ctx
        z = ctx.values
        for blk in self.ctx_blocks:
            z = blk(z, ctx.valid_mask)
        return ContextTensor(z, ctx.valid_mask)

    def denoise_refined(self, xk: SequenceTensor, k: int,
                        refined: ContextTensor) -> SequenceTensor:
        self.schedule._check_step(k)
        if xk.values.shape != refined.values.shape:
            raise ValueError("noisy sequence and context shapes must match")
        step_vec = self.step_mlp(self.step_table[k - 1].to(self.dtype))
        x_cond = xk.values + step_vec
        if self.mlp_denoiser is not None:
            out = self.mlp_denoiser(torch.cat([refined.values, x_cond], dim=-1))
            return SequenceTensor(out, xk.valid_mask)
        x = refined.values
        for blk in self.cross_blocks:
            x = blk(x, x_cond, xk.valid_mask)
        return SequenceTensor(x, xk.valid_mask)

    def denoise(self, xk: SequenceTensor, k: int, ctx: ContextTensor) -> SequenceTensor:
        """Predict the clean target sequence from its noisy version at step k."""
        return self.denoise_refined(xk, k, self.refine_context(ctx))

    # ----- scoring --------------------------------------------------------

    def score(self, x_values: torch.Tensor, candidates: torch.Tensor,
              target_times: np.ndarray, t: np.ndarray,
              valid_mask: np.ndarray | None = None) -> torch.Tensor:
        """(B, L, N) candidate scores from denoised (or encoder) positions.

        Per position i and candidate c: elementwise product of x_values[i]
        with the candidate embedding, concatenated with a linear projection
        of log(1 + t - target_times[i]), fed to the scoring MLP. Elapsed
        times are validated (and used) at valid positions only; invalid
        positions take a zero time feature so stale values there cannot
        poison anything downstream.
        """
        B, L, _ = x_values.shape
        if candidates.shape[:2] != (B, L):
            raise ValueError("candidates must have shape (B, L, N)")
        dt = np.asarray(t, dtype=np.float64)[:, None] - np.asarray(target_times)
        if valid_mask is not None:
            if np.any(dt[valid_mask] < 0):
                raise ValueError("negative elapsed time: target times exceed query time")
            dt = np.where(valid_mask, dt, 0.0)
        elif dt.min() < 0:
            raise ValueError("negative elapsed time: target times exceed query time")
        dt_feat = torch.from_numpy(np.log1p(dt)).to(self.dtype)[..., None]
        dt_vec = self.dt_proj(dt_feat)                      # (B, L, d)
        cand_emb = embed_lookup(self.node_emb, candidates)  # (B, L, N, d)
        prod = x_values[:, :, None, :] * cand_emb
        dt_exp = dt_vec[:, :, None, :].expand_as(prod)
        return self.scoring_mlp(torch.cat([prod, dt_exp], dim=-1)).squeeze(-1)

    # ----- training forward ----------------------------------------------

    def forward_train(self, history: HistoryBatch, dst, t,
                      rng: np.random.Generator) -> ForwardTrainOutput:
        """Full training pass for a batch of interactions.

        Draw order from `rng` (fixed, so runs are replayable): diffusion
        step k, noise eps, then per-position negatives. The negative
        sequence reuses the positive timestamps and replaces every node by
        an independent uniform draw excluding that position's positive.
        """
        c = self.config
        dst = np.asarray(dst, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        B = len(dst)

        ctx = self.encode_history(history)
        target = build_target(history, dst, t)
        # canonicalize: whatever sits in padded slots is replaced before any
        # use, so masked-position content can never influence the pass
        t_nodes = np.where(target.valid_mask, target.nodes, self.pad_id)
        t_times = np.where(target.valid_mask, target.times, 0.0)
        target = TargetSequence(t_nodes, t_times, target.valid_mask)
        if c.sequence_diffusion:
            loss_mask_np = target.valid_mask
        else:
            loss_mask_np = np.zeros_like(target.valid_mask)
            loss_mask_np[:, -1] = True
        loss_mask = torch.from_numpy(loss_mask_np)

        x0_vals = embed_lookup(self.node_emb, torch.from_numpy(target.nodes))
        x0 = SequenceTensor(x0_vals, loss_mask)

        if c.diffusion_enabled:
            k = int(rng.integers(1, c.K + 1))
            eps = SequenceTensor(
                torch.from_numpy(rng.standard_normal(x0_vals.shape)).to(self.dtype),
                loss_mask)
            xk = forward_marginal(x0, k, eps, self.schedule)
            x0_hat = self.denoise(xk, k, ctx)
            scoring_values = x0_hat.values
        else:
            k = None
            x0_hat = None
            scoring_values = ctx.values

        negatives = self._sample_negative_nodes(target.nodes, rng)
        cands = torch.from_numpy(np.stack([target.nodes, negatives], axis=-1))
        scores = self.score(scoring_values, cands, target.times, t,
                            valid_mask=target.valid_mask)
        return ForwardTrainOutput(
            x0=x0, x0_hat=x0_hat, scores_pos=scores[..., 0],
            scores_neg=scores[..., 1], target=target, loss_mask=loss_mask,
            scoring_values=scoring_values, k=k, negatives=negatives)

    def _sample_negative_nodes(self, positive_nodes: np.ndarray,
                               rng: np.random.Generator) -> np.ndarray:
        neg = rng.integers(0, self.num_nodes, size=positive_nodes.shape,
                           dtype=np.int64)
        clash = neg == positive_nodes
        while clash.any():
            neg[clash] = rng.integers(0, self.num_nodes, size=int(clash.sum()),
                                      dtype=np.int64)
            clash = neg == positive_nodes
        return neg

    def compute_losses(self, out: ForwardTrainOutput) -> losses_mod.LossBreakdown:
        c = self.config
        if c.diffusion_enabled:
            l_diff = losses_mod.diff_loss(out.x0_hat.values, out.x0.values,
                                          out.loss_mask, kind=c.diff_loss_kind)
        else:
            l_diff = torch.zeros((), dtype=out.scores_pos.dtype)
        task_fn = (losses_mod.task_loss_bce if c.task_loss == "bce"
                   else losses_mod.task_loss_bpr)
        l_last, l_inter = task_fn(out.scores_pos, out.scores_neg, out.loss_mask)
        return losses_mod.total_loss(l_diff, l_last, l_inter,
                                     c.lambda_diff, c.lambda_inter)

    # ----- inference ------------------------------------------------------

    def generate(self, history: HistoryBatch, t,
                 rng: np.random.Generator) -> torch.Tensor:
        """Sample a destination-sequence embedding; returns the final
        position (B, d) used for candidate ranking."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                ctx = self.encode_history(history)
                if not self.config.diffusion_enabled:
                    return ctx.values[:, -1]
                if self.config.sequence_diffusion:
                    mask = shifted_target_mask(history.valid_mask)
                else:
                    mask = np.zeros_like(history.valid_mask)
                    mask[:, -1] = True
                B, L = mask.shape
                refined = self.refine_context(ctx)
                out = sample_loop(
                    lambda xk, k, rc: self.denoise_refined(xk, k, rc), refined,
                    (B, L, self.config.d), self.schedule, rng,
                    valid_mask=torch.from_numpy(mask), dtype=self.dtype)
                return out.values[:, -1]
        finally:
            self.train(was_training)

    def score_final(self, x_last: torch.Tensor, candidates: np.ndarray,
                    t) -> torch.Tensor:
        """Scores (B, N) for candidates at the final sequence position,
        where the elapsed-time feature is exactly zero."""
        t = np.asarray(t, dtype=np.float64)
        with torch.no_grad():
            cands = torch.from_numpy(np.asarray(candidates, dtype=np.int64))
            scores = self.score(x_last[:, None, :], cands[:, None, :],
                                t[:, None], t)
        return scores[:, 0, :]


def generate_and_rank(model: SDGModel, index: AdjacencyIndex, u: int, t: float,
                      candidates, rng: np.random.Generator):
    """Rank candidate destinations for source u at time t.

    Returns [(candidate_id, score)] sorted by descending score; equal
    scores break by ascending candidate id, so rankings are deterministic.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size == 0:
        raise ValueError("candidate list must not be empty")
    hist = history_batch(index, np.array([u]), np.array([t]), model.config.L)
    x_last = model.generate(hist, np.array([t]), rng)
    scores = model.score_final(x_last, cand[None, :], np.array([t]))[0]
    scores = scores.numpy()
    order = sorted(range(len(cand)), key=lambda i: (-float(scores[i]), int(cand[i])))
    return [(int(cand[i]), float(scores[i])) for i in order]
