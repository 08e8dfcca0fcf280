"""Sinusoidal positional encoding with a coarse-to-fine frequency schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class EncodingConfig:
    num_frequencies: int = 10
    include_raw_input: bool = True
    anneal_duration: int = 1

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError(f"num_frequencies must be >= 0, got {self.num_frequencies}")
        if self.anneal_duration < 1:
            raise ValueError(f"anneal_duration must be >= 1, got {self.anneal_duration}")

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (1 if self.include_raw_input else 0) + input_dim * 2 * self.num_frequencies

    def progress(self, step: int) -> float:
        return min(max(step / self.anneal_duration, 0.0), 1.0)


def anneal_weight(k: int, progress: float, num_frequencies: int) -> float:
    """Weight of frequency band ``k``: off until ``progress * L`` reaches ``k``, on after ``k + 1``."""
    if not 0 <= k < num_frequencies:
        raise ValueError(f"frequency index {k} outside [0, {num_frequencies})")
    a = min(max(progress * num_frequencies - k, 0.0), 1.0)
    return (1.0 - math.cos(math.pi * a)) / 2.0


def anneal_weights(progress: float, num_frequencies: int) -> torch.Tensor:
    """All band weights at once, shape ``(L,)``, float64."""
    k = torch.arange(num_frequencies, dtype=torch.float64)
    a = (progress * num_frequencies - k).clamp(0.0, 1.0)
    return (1.0 - torch.cos(math.pi * a)) / 2.0


def positional_encode(x: torch.Tensor, cfg: EncodingConfig, progress: float = 1.0) -> torch.Tensor:
    """Encode the last axis of ``x``.

    Layout: ``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``
    with each sin/cos block spanning all input coordinates and scaled by its band weight.
    """
    if not torch.isfinite(x).all():
        raise FloatingPointError("positional_encode received non-finite input")
    parts = [x] if cfg.include_raw_input else []
    L = cfg.num_frequencies
    if L:
        w = anneal_weights(progress, L).to(x.dtype)
        freqs = (2.0 ** torch.arange(L, dtype=x.dtype)) * math.pi
        arg = x[..., None, :] * freqs[:, None]  # (..., L, D)
        enc = torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1) * w[:, None]
        parts.append(enc.flatten(-2))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)
