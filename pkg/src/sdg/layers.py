"""Differentiable building blocks with explicit masking semantics.

Shapes are (B, L, d) in and out of every block. Masking rules:

- self-attention: position i may attend to positions j <= i that are
  valid; cross-attention: any query may attend to any valid key.
- a query row whose mask admits no keys gets zero attention output (the
  block degenerates to its residual + FFN path), never NaN.
- key-side masking is exact: changing the content of a masked position
  cannot change any other position's output, bit for bit.

Blocks are pre-norm residual transformers (LN -> attention -> residual,
LN -> FFN -> residual). grad_check verifies analytic gradients against
central finite differences in double precision.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_STD = 0.02


def sinusoidal_pe(L: int, d: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(L, d) table with PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(...)."""
    if d % 2 != 0:
        raise ValueError("sinusoidal encoding requires even d")
    pos = np.arange(L, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)[None, :]
    pe = np.empty((L, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return torch.from_numpy(pe).to(dtype)


def step_embedding(k: int, d: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of a diffusion step; equals sinusoidal_pe row k."""
    if k < 0:
        raise ValueError("step must be non-negative")
    return sinusoidal_pe(k + 1, d, dtype=dtype)[k]


def make_embedding(num_rows: int, d: int, padding_idx: int | None = None,
                   generator: torch.Generator | None = None) -> nn.Embedding:
    """Embedding table, normal(0, 0.02) init, zeroed padding row."""
    emb = nn.Embedding(num_rows, d, padding_idx=padding_idx)
    with torch.no_grad():
        emb.weight.normal_(0.0, INIT_STD, generator=generator)
        if padding_idx is not None:
            emb.weight[padding_idx].zero_()
    return emb


def embed_lookup(table: nn.Embedding, ids: torch.Tensor) -> torch.Tensor:
    """Row gather with range validation; gradients flow to selected rows only."""
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.num_embeddings):
        raise ValueError(
            f"id out of range [0, {table.num_embeddings}) in embedding lookup")
    return table(ids)


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     allowed: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention under a boolean permission mask.

    q, k, v: (B, H, Lq|Lk, dh); allowed: (B, 1|H, Lq, Lk), True where the
    query may attend. Fully-masked query rows yield exactly zero output.
    """
    dh = q.shape[-1]
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(dh)
    neg = torch.finfo(scores.dtype).min
    scores = scores.masked_fill(~allowed, neg)
    weights = torch.softmax(scores, dim=-1)
    # rows with no allowed key softmax to uniform over the fill value;
    # zero them out so padding never leaks into the residual stream
    any_allowed = allowed.any(dim=-1, keepdim=True).to(weights.dtype)
    weights = weights * any_allowed
    return torch.matmul(weights, v)


class MultiHeadAttention(nn.Module):
    """Q/K/V projections around masked_attention; query and key inputs may differ."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads != 0:
            raise ValueError("model dim must be divisible by heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor,
                allowed: torch.Tensor) -> torch.Tensor:
        B, Lq, _ = q_in.shape
        q = self._split(self.q_proj(q_in))
        k = self._split(self.k_proj(kv_in))
        v = self._split(self.v_proj(kv_in))
        out = masked_attention(q, k, v, allowed.unsqueeze(1))
        out = out.transpose(1, 2).contiguous().view(B, Lq, self.d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class CausalBlock(nn.Module):
    """Pre-norm self-attention block with causal + key-validity masking.

    Position i attends to positions j <= i with key_valid[j]; a row whose
    mask admits nothing (fully padded prefix) keeps its residual + FFN
    path with zero attention contribution.
    """

    def __init__(self, d: int, heads: int = 2, ffn_dim: int | None = None,
                 dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads)
        self.ffn = FeedForward(d, ffn_dim if ffn_dim is not None else 4 * d, dropout)
        self.ln_attn = nn.LayerNorm(d)
        self.ln_ffn = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        tri = torch.tril(torch.ones(L, L, dtype=torch.bool, device=x.device))
        allowed = key_valid[:, None, :].expand(B, L, L) & tri
        xn = self.ln_attn(x)
        x = x + self.drop(self.attn(xn, xn, allowed))
        x = x + self.drop(self.ffn(self.ln_ffn(x)))
        return x


class CrossBlock(nn.Module):
    """Pre-norm cross-attention block: queries from x, keys/values from kv.

    Any query may attend to any key with key_valid[j]; no causal
    restriction. Residual stream follows the query side.
    """

    def __init__(self, d: int, heads: int = 2, ffn_dim: int | None = None,
                 dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads)
        self.ffn = FeedForward(d, ffn_dim if ffn_dim is not None else 4 * d, dropout)
        self.ln_q = nn.LayerNorm(d)
        self.ln_kv = nn.LayerNorm(d)
        self.ln_ffn = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, kv: torch.Tensor,
                key_valid: torch.Tensor) -> torch.Tensor:
        if x.shape[0] != kv.shape[0] or x.shape[2] != kv.shape[2]:
            raise ValueError("query and key/value streams must share batch and dim")
        B, Lq, _ = x.shape
        Lk = kv.shape[1]
        allowed = key_valid[:, None, :].expand(B, Lq, Lk)
        x = x + self.drop(self.attn(self.ln_q(x), self.ln_kv(kv), allowed))
        x = x + self.drop(self.ffn(self.ln_ffn(x)))
        return x


class MLP(nn.Module):
    """Affine-activation chain; the final layer is affine."""

    def __init__(self, sizes, activation=F.gelu):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


def init_transformer_params(module: nn.Module,
                            generator: torch.Generator | None = None) -> None:
    """normal(0, 0.02) projections, zero biases; LayerNorm left at identity."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def init_head_params(module: nn.Module,
                     generator: torch.Generator | None = None) -> None:
    """Fan-in uniform init (the nn.Linear default), replayable via generator.

    Used for the scoring and conditioning heads, where the tiny transformer
    init would start the model in a vanishing-signal regime.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)


def grad_check(f, params, eps: float = 1e-5, max_coords: int = 200,
               rng: np.random.Generator | None = None,
               atol_scale: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` is a scalar-valued function of nothing (it closes over `params`);
    `params` is a list of float64 tensors with requires_grad. A random
    subset of up to `max_coords` coordinates per call is probed (all
    coordinates when fewer). Run in double precision.

    The error denominator is floored at `atol_scale`: coordinates whose
    gradient sits below the floor are judged by absolute difference, since
    central differences carry ~|f|*eps_machine/eps of irreducible noise
    that would otherwise dominate the ratio on near-zero gradients.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check requires float64 parameters")
    out = f()
    if not torch.isfinite(out):
        raise FloatingPointError("non-finite objective in grad_check")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    coords = []
    for pi, p in enumerate(params):
        for flat in range(p.numel()):
            coords.append((pi, flat))
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in pick]

    max_rel = 0.0
    with torch.no_grad():
        for pi, flat in coords:
            p = params[pi].view(-1)
            old = p[flat].item()
            p[flat] = old + eps
            f_plus = float(f())
            p[flat] = old - eps
            f_minus = float(f())
            p[flat] = old
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = float(grads[pi].view(-1)[flat])
            scale = max(abs(fd), abs(an), atol_scale)
            max_rel = max(max_rel, abs(fd - an) / scale)
    return max_rel
