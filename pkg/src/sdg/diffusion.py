"""Forward noising, single reverse step, and the iterative sampling loop.

All operations act on SequenceTensor batches of shape (B, L, d) and are
pure functions of their inputs; the sampling loop owns its RNG for the
duration of one call. Steps are 1-indexed (k in 1..K), matching the
schedule module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .schedule import NoiseSchedule, posterior_coefficients


@dataclass
class SequenceTensor:
    """A (B, L, d) real tensor plus its (B, L) validity mask."""

    values: torch.Tensor
    valid_mask: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"expected (B, L, d) values, got shape {tuple(self.values.shape)}")
        if self.valid_mask.shape != self.values.shape[:2]:
            raise ValueError("valid_mask must have shape (B, L)")

    @property
    def shape(self):
        return tuple(self.values.shape)


def _check_like(a: SequenceTensor, b: SequenceTensor, name: str):
    if a.values.shape != b.values.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.values.shape)} vs "
                         f"{tuple(b.values.shape)}")


def forward_marginal(x0: SequenceTensor, k: int, eps: SequenceTensor,
                     s: NoiseSchedule) -> SequenceTensor:
    """Closed-form corruption: sqrt(ab_k) * x0 + sqrt(1 - ab_k) * eps."""
    _check_like(x0, eps, "forward_marginal")
    s._check_step(k)
    ab = s.alpha_bar(k)
    out = math.sqrt(ab) * x0.values + math.sqrt(1.0 - ab) * eps.values
    return SequenceTensor(out, x0.valid_mask)


def reverse_step(xk: SequenceTensor, x0_hat: SequenceTensor, k: int,
                 noise: SequenceTensor | None, s: NoiseSchedule) -> SequenceTensor:
    """One posterior-mean step: c_xk * x_k + c_x0 * x0_hat + sqrt(var) * noise.

    At k=1 the posterior is degenerate and the output is exactly x0_hat
    (noise is forced to zero).
    """
    _check_like(xk, x0_hat, "reverse_step")
    s._check_step(k)
    if k == 1:
        return SequenceTensor(x0_hat.values.clone(), xk.valid_mask)
    if noise is None:
        raise ValueError("reverse_step requires noise for k > 1")
    _check_like(xk, noise, "reverse_step")
    c_xk, c_x0, var = posterior_coefficients(s, k)
    out = c_xk * xk.values + c_x0 * x0_hat.values + math.sqrt(var) * noise.values
    return SequenceTensor(out, xk.valid_mask)


def sample_loop(denoiser: Callable[[SequenceTensor, int, object], SequenceTensor],
                context, shape: tuple[int, int, int], s: NoiseSchedule,
                rng: np.random.Generator,
                valid_mask: torch.Tensor | None = None,
                dtype: torch.dtype = torch.float32) -> SequenceTensor:
    """Iterative generation from pure Gaussian noise.

    Starts at X^K ~ N(0, I) and walks k = K..1, calling
    denoiser(x_k, k, context) for x0_hat and stepping through the
    posterior. `context` is opaque to the loop and handed to the callback
    unchanged. Deterministic under a fixed rng state.
    """
    B, L, d = shape
    if valid_mask is None:
        valid_mask = torch.ones(B, L, dtype=torch.bool)
    x = SequenceTensor(
        torch.from_numpy(rng.standard_normal(shape)).to(dtype), valid_mask)
    for k in range(s.K, 0, -1):
        x0_hat = denoiser(x, k, context)
        if x0_hat.values.shape != x.values.shape:
            raise ValueError(
                f"denoiser returned shape {tuple(x0_hat.values.shape)}, "
                f"expected {tuple(x.values.shape)} at step k={k}")
        if k > 1:
            noise = SequenceTensor(
                torch.from_numpy(rng.standard_normal(shape)).to(dtype), valid_mask)
        else:
            noise = None
        x = reverse_step(x, x0_hat, k, noise, s)
        if not torch.isfinite(x.values).all():
            raise FloatingPointError(f"non-finite values in reverse step k={k}")
    return x
