"""Diffusion noise schedules and posterior coefficients.

A schedule fixes the per-step corruption variances beta_1..beta_K. From
those we keep alpha_k = 1 - beta_k and the cumulative products
alpha_bar_k = prod_{k'<=k} alpha_k' (with alpha_bar_0 == 1 by convention).
Steps are 1-indexed throughout: k in 1..K.

All tables are float64 and immutable after construction. Checkpoints
store only (kind, K); tables are rebuilt deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine", "sqrt", "truncated_linear")

# The corruption endpoints commonly used on a 1000-step reference scale;
# for K steps the linear betas are rescaled by 1000/K and clamped.
_LINEAR_BETA_START = 1e-4
_LINEAR_BETA_END = 0.02
_REFERENCE_STEPS = 1000
_BETA_MIN = 1e-6
_BETA_MAX = 0.999
_TRUNCATED_BETA_CAP = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    K: int
    betas: np.ndarray       # (K,) beta_k, index k-1
    alphas: np.ndarray      # (K,) 1 - beta_k
    alpha_bars: np.ndarray  # (K,) cumulative products

    def alpha_bar(self, k: int) -> float:
        """alpha_bar_k with the alpha_bar_0 == 1 convention."""
        if k == 0:
            return 1.0
        return float(self.alpha_bars[k - 1])

    def _check_step(self, k: int) -> None:
        if not (1 <= k <= self.K):
            raise ValueError(f"step k={k} out of range 1..{self.K}")


def _linear_betas(K: int, cap: float = _BETA_MAX) -> np.ndarray:
    if K == 1:
        base = np.array([_LINEAR_BETA_START])
    else:
        base = np.linspace(_LINEAR_BETA_START, _LINEAR_BETA_END, K)
    betas = base * (_REFERENCE_STEPS / K)
    return np.clip(betas, _BETA_MIN, min(cap, _BETA_MAX))


def _betas_from_alpha_bar(K: int, alpha_bar_fn) -> np.ndarray:
    """beta_k = 1 - alpha_bar(k/K)/alpha_bar((k-1)/K), clipped to (0, 0.999]."""
    betas = np.empty(K)
    for k in range(1, K + 1):
        ratio = alpha_bar_fn(k / K) / alpha_bar_fn((k - 1) / K)
        betas[k - 1] = 1.0 - ratio
    return np.clip(betas, _BETA_MIN, _BETA_MAX)


def _cosine_alpha_bar(t: float) -> float:
    s = 0.008
    return math.cos((t + s) / (1 + s) * math.pi / 2) ** 2 / \
        math.cos(s / (1 + s) * math.pi / 2) ** 2


def _sqrt_alpha_bar(t: float) -> float:
    return 1.0 - math.sqrt(t + 1e-4)


def make_schedule(kind: str = "cosine", K: int = 32) -> NoiseSchedule:
    """Build the beta/alpha/alpha_bar tables for one of the four kinds.

    cosine is the default (it is the strongest performer among the four).
    alpha_bars are always recomputed as cumprod(1 - beta) after clipping,
    so the recurrence alpha_bar_k = alpha_bar_{k-1} * alpha_k holds exactly.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if kind == "linear":
        betas = _linear_betas(K)
    elif kind == "truncated_linear":
        betas = _linear_betas(K, cap=_TRUNCATED_BETA_CAP)
    elif kind == "cosine":
        betas = _betas_from_alpha_bar(K, _cosine_alpha_bar)
    elif kind == "sqrt":
        betas = _betas_from_alpha_bar(K, _sqrt_alpha_bar)
    else:
        raise ValueError(f"unknown schedule kind: {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(kind=kind, K=K, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars)


def posterior_coefficients(s: NoiseSchedule, k: int) -> tuple[float, float, float]:
    """Coefficients of the exact Gaussian posterior over the previous step.

    Given the forward corruption x_k = sqrt(alpha_bar_k) x_0 +
    sqrt(1-alpha_bar_k) eps, the distribution of x_{k-1} given (x_k, x_0)
    is Gaussian with

        mean = c_xk * x_k + c_x0 * x_0,
        c_xk = sqrt(alpha_k) (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k)
        c_x0 = sqrt(alpha_bar_{k-1}) beta_k / (1 - alpha_bar_k)
        var  = beta_k (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k)

    At k=1 the posterior collapses onto x_0: returns (0, 1, 0) exactly.
    """
    s._check_step(k)
    if k == 1:
        return 0.0, 1.0, 0.0
    beta_k = float(s.betas[k - 1])
    alpha_k = float(s.alphas[k - 1])
    ab_k = float(s.alpha_bars[k - 1])
    ab_prev = float(s.alpha_bars[k - 2])
    denom = 1.0 - ab_k
    c_xk = math.sqrt(alpha_k) * (1.0 - ab_prev) / denom
    c_x0 = math.sqrt(ab_prev) * beta_k / denom
    var = beta_k * (1.0 - ab_prev) / denom
    return c_xk, c_x0, var
