"""Conditional radiance field: (point, direction, shape code, appearance code) -> (density, color)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoding import EncodingConfig, positional_encode

CODE_DIM = 64

_ACTIVATIONS = {"relu": nn.ReLU, "softplus": nn.Softplus, "silu": nn.SiLU, "tanh": nn.Tanh}


@dataclass
class LatentCodes:
    shape: torch.Tensor
    appearance: torch.Tensor

    def __post_init__(self):
        for name in ("shape", "appearance"):
            value = getattr(self, name)
            if value.shape[-1] != CODE_DIM:
                raise ValueError(f"{name} code must have dimension {CODE_DIM}, got {value.shape[-1]}")
            if not torch.isfinite(value).all():
                raise ValueError(f"{name} code contains non-finite values")


@dataclass(frozen=True)
class FieldConfig:
    mlp_depth: int = 6
    mlp_width: int = 128
    scene_box_half_extent: float = 0.4
    symmetry_enabled: bool = False
    code_dim: int = CODE_DIM
    hidden_activation: str = "relu"
    position_encoding: EncodingConfig = field(default_factory=EncodingConfig)
    direction_encoding: EncodingConfig = field(default_factory=EncodingConfig)

    def __post_init__(self):
        if self.mlp_depth < 1 or self.mlp_width < 1:
            raise ValueError(f"mlp depth/width must be >= 1, got {self.mlp_depth}x{self.mlp_width}")
        if not self.scene_box_half_extent > 0:
            raise ValueError("scene_box_half_extent must be positive")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")

    @classmethod
    def from_dict(cls, d: dict) -> FieldConfig:
        d = dict(d)
        for key in ("position_encoding", "direction_encoding"):
            if isinstance(d.get(key), dict):
                d[key] = EncodingConfig(**d[key])
        return cls(**d)


class RadianceSample(NamedTuple):
    density: torch.Tensor
    rgb: torch.Tensor


def symmetrize_point(x: torch.Tensor) -> torch.Tensor:
    """Reflect onto the half-space ``x2 >= 0``: ``(x1, |x2|, x3)``."""
    return torch.cat([x[..., 0:1], x[..., 1:2].abs(), x[..., 2:3]], dim=-1)


def box_mask(x: torch.Tensor, half_extent: float) -> torch.Tensor:
    """True where the point lies in the closed axis-aligned box ``[-h, h]^3``."""
    return x.abs().amax(dim=-1) <= half_extent


class RadianceField(nn.Module):
    """Density trunk on ``gamma(x)`` + shape code; color head adds ``gamma(d)`` + appearance code.

    Codes enter by concatenation with the first-layer inputs of their branch; the
    first layer is stored split (encoded input part + code part) so each code's
    projection is computed once per object instead of once per sample.
    """

    def __init__(self, cfg: FieldConfig = FieldConfig()):
        super().__init__()
        self.cfg = cfg
        act = _ACTIVATIONS[cfg.hidden_activation]
        w = cfg.mlp_width
        pos_dim = cfg.position_encoding.output_dim(3)
        dir_dim = cfg.direction_encoding.output_dim(3)

        self.trunk_in = nn.Linear(pos_dim, w)
        self.trunk_code = nn.Linear(cfg.code_dim, w, bias=False)
        self.trunk = nn.ModuleList(nn.Linear(w, w) for _ in range(cfg.mlp_depth - 1))
        self.act = act()
        self.density_out = nn.Linear(w, 1)
        self.feature_out = nn.Linear(w, w)
        half = max(w // 2, 1)
        self.color_in = nn.Linear(w + dir_dim, half)
        self.color_code = nn.Linear(cfg.code_dim, half, bias=False)
        self.color_out = nn.Linear(half, 3)

    def forward(
        self,
        points: torch.Tensor,
        dirs: torch.Tensor,
        shape_code: torch.Tensor,
        appearance_code: torch.Tensor,
        progress: float = 1.0,
    ) -> RadianceSample:
        """``points``/``dirs``: ``(B, ..., 3)``; codes: ``(B, code_dim)``."""
        if points.shape[-1] != 3 or dirs.shape != points.shape:
            raise ValueError(f"points {tuple(points.shape)} and dirs {tuple(dirs.shape)} must match (..., 3)")
        if shape_code.shape[-1] != self.cfg.code_dim or appearance_code.shape[-1] != self.cfg.code_dim:
            raise ValueError(
                f"codes must have dimension {self.cfg.code_dim}, got {shape_code.shape[-1]}/{appearance_code.shape[-1]}"
            )
        extra = points.dim() - 2
        if shape_code.dim() != 2 or shape_code.shape[0] != points.shape[0]:
            raise ValueError("codes must be (B, code_dim) with B matching the point batch")

        def per_object(v):
            return v.reshape(v.shape[0], *([1] * extra), v.shape[-1])

        x = symmetrize_point(points) if self.cfg.symmetry_enabled else points
        h = self.trunk_in(positional_encode(x, self.cfg.position_encoding, progress))
        h = self.act(h + per_object(self.trunk_code(shape_code)))
        for layer in self.trunk:
            h = self.act(layer(h))
        density = F.softplus(self.density_out(h)[..., 0])
        density = density * box_mask(points, self.cfg.scene_box_half_extent).to(density.dtype)

        d_enc = positional_encode(dirs, self.cfg.direction_encoding, progress)
        c = self.color_in(torch.cat([self.feature_out(h), d_enc], dim=-1))
        c = self.act(c + per_object(self.color_code(appearance_code)))
        rgb = torch.sigmoid(self.color_out(c))
        return RadianceSample(density, rgb)


def query_field(points, dirs, codes: LatentCodes, model: RadianceField, progress: float = 1.0) -> RadianceSample:
    """Functional entry point; ``codes`` fields are ``(B, 64)`` or a single ``(64,)`` object."""
    shape, app = codes.shape, codes.appearance
    if shape.dim() == 1:
        out = model(points[None], dirs[None], shape[None], app[None], progress)
        return RadianceSample(out.density[0], out.rgb[0])
    return model(points, dirs, shape, app, progress)
