"""Gumbel-Softmax / Gumbel-Top-k with exploration scaling and straight-through gradients."""

from __future__ import annotations

import torch

_TINY = 1e-20


def gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u.clamp(_TINY, 1.0 - 1e-7)))


def gumbel_softmax(
    logits: torch.Tensor,
    tau: float,
    epsilon: float = 0.0,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    dim: int = -1,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(probs, perturbed_logits)`` for softmax((logits + epsilon * N) / tau).

    Entries at ``-inf`` stay masked (probability 0). Noise is drawn only when
    ``epsilon > 0`` and no explicit ``noise`` is given.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    perturbed = logits
    if epsilon > 0:
        if noise is None:
            noise = gumbel_noise(logits.shape, generator, logits.dtype)
        perturbed = logits + epsilon * noise
    return torch.softmax(perturbed / tau, dim=dim), perturbed


def stable_topk_indices(values: torch.Tensor, k: int, dim: int = -1) -> torch.Tensor:
    """Indices of the k largest entries; ties go to the lower index."""
    order = torch.argsort(-values, dim=dim, stable=True)
    return order.narrow(dim, 0, k)


def gumbel_top_k(
    logits: torch.Tensor,
    k: int,
    tau: float,
    epsilon: float = 0.0,
    generator: torch.Generator | None = None,
    straight_through: bool = True,
    dim: int = -1,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Select k entries along ``dim``.

    Returns ``(weights, indices)``. With ``straight_through`` the weights are
    the hard k-hot vector in the forward pass and carry the Gumbel-Softmax
    gradient backward; otherwise they are the soft probabilities themselves.
    """
    size = logits.shape[dim]
    if not 0 <= k <= size:
        raise ValueError(f"k={k} outside [0, {size}]")
    probs, perturbed = gumbel_softmax(logits, tau, epsilon, generator, dim=dim)
    idx = stable_topk_indices(perturbed.detach(), k, dim=dim)
    if not straight_through:
        return probs, idx
    hard = torch.zeros_like(probs).scatter(dim, idx, 1.0)
    return hard - probs.detach() + probs, idx


def annealed(start: float, end: float, rate: float, epoch: int) -> float:
    """Exponential decay ``start * rate**epoch`` clamped from below at ``end``."""
    return max(start * rate ** epoch, end)
