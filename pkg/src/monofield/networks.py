"""Two-tower image encoder and the color/alpha patch discriminators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .field import CODE_DIM, LatentCodes
from .geometry import CameraPose, normalize_pose_params

BACKBONE_PRESETS = {
    "tiny": (8, 16, 32),
    "small": (32, 64, 128, 256),
}


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 112
    backbone: str = "full"
    use_mask_channel: bool = True
    code_dim: int = CODE_DIM
    feature_dim: int = 256
    min_tz: float = 0.2
    tz_init: float = 1.8
    pretrained_weights: str | None = None

    def __post_init__(self):
        if self.backbone not in (*BACKBONE_PRESETS, "full"):
            raise ValueError(f"unknown backbone preset {self.backbone!r}")
        if not self.tz_init > self.min_tz:
            raise ValueError("tz_init must exceed min_tz")


@dataclass(frozen=True)
class DiscriminatorConfig:
    patch_size: int = 80
    channels: tuple[int, ...] = (64, 128, 256)
    dropout: float = 0.5
    negative_slope: float = 0.2

    @classmethod
    def from_dict(cls, d: dict) -> DiscriminatorConfig:
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


class EncoderOutput(NamedTuple):
    shape_code: torch.Tensor
    appearance_code: torch.Tensor
    pose: torch.Tensor  # (B, 7) normalized (cos_az, sin_az, cos_el, sin_el, t_x, t_y, t_z)

    @property
    def codes(self) -> LatentCodes:
        return LatentCodes(self.shape_code, self.appearance_code)

    def camera_poses(self) -> list[CameraPose]:
        return [CameraPose.from_vector(row) for row in self.pose.detach().double().cpu().numpy()]


class ConvBackbone(nn.Module):
    """Stride-2 3x3 conv stages with SiLU, pooled to 4x4 and projected to ``out_dim``."""

    def __init__(self, in_channels: int, channels: tuple[int, ...], out_dim: int):
        super().__init__()
        layers = []
        c = in_channels
        for width in channels:
            layers += [nn.Conv2d(c, width, 3, stride=2, padding=1), nn.GroupNorm(1, width), nn.SiLU()]
            c = width
        self.stages = nn.Sequential(*layers)
        self.proj = nn.Linear(c * 16, out_dim)

    def forward(self, x):
        h = F.adaptive_avg_pool2d(self.stages(x), 4)
        return F.silu(self.proj(h.flatten(1)))


class ResNetBackbone(nn.Module):
    """ResNet-50 trunk (randomly initialized unless weights are loaded)."""

    def __init__(self, in_channels: int, out_dim: int):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        net.fc = nn.Identity()
        self.net = net
        self.proj = nn.Linear(2048, out_dim)

    def forward(self, x):
        return F.silu(self.proj(self.net(x)))


def make_backbone(cfg: EncoderConfig) -> nn.Module:
    in_ch = 4 if cfg.use_mask_channel else 3
    if cfg.backbone == "full":
        return ResNetBackbone(in_ch, cfg.feature_dim)
    return ConvBackbone(in_ch, BACKBONE_PRESETS[cfg.backbone], cfg.feature_dim)


def load_backbone_weights(encoder: Encoder, path: str):
    """Pretraining hook: load a state dict into both towers' backbones (non-strict; extra keys ignored)."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    for tower in (encoder.code_backbone, encoder.pose_backbone):
        target = tower.net if isinstance(tower, ResNetBackbone) else tower
        own = target.state_dict()
        usable = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
        target.load_state_dict(usable, strict=False)


class Encoder(nn.Module):
    """Codes tower -> ``(z_s, z_a)``; pose tower -> normalized rotation pairs and translation (``t_z > min_tz``)."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.code_backbone = make_backbone(cfg)
        self.pose_backbone = make_backbone(cfg)
        self.code_head = nn.Linear(cfg.feature_dim, 2 * cfg.code_dim)
        self.pose_head = nn.Linear(cfg.feature_dim, 7)
        with torch.no_grad():
            self.pose_head.weight.mul_(0.1)
            self.pose_head.bias[4:6].zero_()
            # softplus(bias) + min_tz == tz_init at initialization
            self.pose_head.bias[6] = math.log(math.expm1(cfg.tz_init - cfg.min_tz))
        if cfg.pretrained_weights:
            load_backbone_weights(self, cfg.pretrained_weights)

    def forward(self, image: torch.Tensor, mask: torch.Tensor | None = None) -> EncoderOutput:
        """``image``: ``(B, 3, S, S)`` masked, ``mask``: ``(B, 1, S, S)``."""
        s = self.cfg.image_size
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-2:] != (s, s):
            raise ValueError(f"encoder expects (B, 3, {s}, {s}) images, got {tuple(image.shape)}")
        x = image
        if self.cfg.use_mask_channel:
            if mask is None or mask.shape != (image.shape[0], 1, s, s):
                raise ValueError(f"encoder expects a (B, 1, {s}, {s}) mask, got {None if mask is None else tuple(mask.shape)}")
            x = torch.cat([image, mask], dim=1)
        codes = self.code_head(self.code_backbone(x))
        raw = self.pose_head(self.pose_backbone(x))
        tz = F.softplus(raw[:, 6:7]) + self.cfg.min_tz
        pose = normalize_pose_params(torch.cat([raw[:, :6], tz], dim=1))
        d = self.cfg.code_dim
        return EncoderOutput(codes[:, :d], codes[:, d:], pose)


def encode_image(image, mask, encoder: Encoder) -> tuple[LatentCodes, CameraPose]:
    """Encode one ``HxWx3`` image with its ``HxW`` mask (numpy or tensors) in evaluation mode."""
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    img = torch.as_tensor(np.asarray(image), dtype=dtype).permute(2, 0, 1)[None]
    m = torch.as_tensor(np.asarray(mask), dtype=dtype)[None, None]
    with torch.no_grad():
        out = encoder(img, m)
    encoder.train(was_training)
    return LatentCodes(out.shape_code[0], out.appearance_code[0]), out.camera_poses()[0]


class Discriminator(nn.Module):
    """Three strided LeakyReLU convolutions, dropout, then a linear layer to one logit."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig(), channel_mode: str = "color"):
        super().__init__()
        if channel_mode not in ("color", "alpha"):
            raise ValueError(f"channel_mode must be 'color' or 'alpha', got {channel_mode!r}")
        self.cfg = cfg
        self.channel_mode = channel_mode
        self.in_channels = 3 if channel_mode == "color" else 1
        layers = []
        c = self.in_channels
        size = cfg.patch_size
        for width in cfg.channels:
            layers += [nn.Conv2d(c, width, 4, stride=2, padding=1), nn.LeakyReLU(cfg.negative_slope)]
            c = width
            size = size // 2
        self.features = nn.Sequential(*layers)
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(c * size * size, 1)

    def forward(self, patch: torch.Tensor) -> torch.Tensor:
        """``(B, C, P, P)`` -> ``(B,)`` logits."""
        p = self.cfg.patch_size
        if patch.dim() != 4 or patch.shape[1] != self.in_channels or patch.shape[-2:] != (p, p):
            raise ValueError(
                f"{self.channel_mode} discriminator expects (B, {self.in_channels}, {p}, {p}), got {tuple(patch.shape)}"
            )
        h = self.features(patch).flatten(1)
        return self.fc(self.dropout(h))[:, 0]


def discriminate(patch, channel_mode: str, disc: Discriminator) -> torch.Tensor:
    """Logit(s) for ``PxPxC`` or ``(B, C, P, P)`` patches."""
    if channel_mode != disc.channel_mode:
        raise ValueError(f"patch mode {channel_mode!r} does not match the {disc.channel_mode!r} discriminator")
    x = torch.as_tensor(patch, dtype=next(disc.parameters()).dtype)
    if x.dim() == 2:
        x = x[..., None]
    if x.dim() == 3:
        x = x.permute(2, 0, 1)[None]
    return disc(x)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
