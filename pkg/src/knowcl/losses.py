"""Supervised, contrastive and fused training objectives."""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_TOLERANCE = 1e-4


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[target]; targets are 0-based class indices."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    k = logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target index out of range for {k} classes")
    return F.cross_entropy(logits, targets)


def cosine_sim(z, zhat) -> float:
    z = torch.as_tensor(z, dtype=torch.float64)
    zhat = torch.as_tensor(zhat, dtype=torch.float64)
    nz, nh = torch.linalg.vector_norm(z), torch.linalg.vector_norm(zhat)
    if nz == 0 or nh == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(z @ zhat / (nz * nh))


def contrastive_loss(z: torch.Tensor, zhat: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """InfoNCE over the 2N pooled projections of two branches.

    Row i of ``z`` and row i of ``zhat`` are positives; every other pooled
    sample is a negative and self-similarity is excluded.  The loss averages
    both directions over the N pairs.
    """
    if z.ndim != 2 or z.shape != zhat.shape:
        raise ValueError(f"branches must be equal-shape (N, d) batches, got {tuple(z.shape)} and {tuple(zhat.shape)}")
    n = z.shape[0]
    if n == 0:
        raise ValueError("contrastive loss needs at least one pair")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    pooled = torch.cat([z, zhat], dim=0)
    with torch.no_grad():
        dev = (pooled.norm(dim=1) - 1).abs().max()
    if dev > NORM_TOLERANCE:
        raise ValueError(f"projections must be unit-norm (max deviation {float(dev):.2e})")
    sim = pooled @ pooled.T / tau
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=sim.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    partner = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(sim.device)
    positives = sim[torch.arange(2 * n, device=sim.device), partner]
    return (torch.logsumexp(sim, dim=1) - positives).mean()


def combined_fixed(losses: Sequence, weights: Sequence):
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} losses but {len(weights)} weights")
    return sum(l * w for l, w in zip(losses, weights))


def adaptive_fused(losses, weights) -> torch.Tensor:
    """sum_t L_t / (2 w_t^2) + ln(1 + w_t^2)."""
    losses = torch.as_tensor(losses) if not isinstance(losses, torch.Tensor) else losses
    weights = torch.as_tensor(weights) if not isinstance(weights, torch.Tensor) else weights
    if losses.shape != weights.shape:
        raise ValueError(f"{tuple(losses.shape)} losses but {tuple(weights.shape)} weights")
    if not torch.all(torch.isfinite(weights)) or torch.any(weights == 0):
        raise ValueError("task weights must be finite and nonzero")
    w2 = weights * weights
    return (losses / (2 * w2) + torch.log1p(w2)).sum()


def adaptive_fused_grad(losses: Sequence[float], weights: Sequence[float]) -> tuple[list[float], list[float]]:
    """Closed-form partial derivatives (d/dL_t, d/dw_t) of :func:`adaptive_fused`."""
    d_loss = [1.0 / (2 * w * w) for w in weights]
    d_w = [-l / w**3 + 2 * w / (1 + w * w) for l, w in zip(losses, weights)]
    return d_loss, d_w


def optimal_weight(loss: float) -> float:
    """Positive w minimizing L/(2w^2) + ln(1+w^2): root of 2w^4/(1+w^2) = L."""
    if loss <= 0:
        raise ValueError("the minimizer exists only for positive losses")
    # quadratic in u = w^2: 2u^2 - L u - L = 0
    u = (loss + math.sqrt(loss * loss + 8 * loss)) / 4
    return math.sqrt(u)


class LossWeights(nn.Module):
    """Learnable per-task weights, initialised to one."""

    def __init__(self, num_tasks: int = 2):
        super().__init__()
        self.w = nn.Parameter(torch.ones(num_tasks))

    def forward(self, losses) -> torch.Tensor:
        return adaptive_fused(losses, self.w)
