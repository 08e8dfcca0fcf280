"""Training losses and their weighted aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from .geometry import normalize_pose_params

LOG_CLAMP = math.log(1e-7)

TERM_NAMES = ("recon_color", "recon_alpha", "adv_color", "adv_alpha", "pose_consistency", "pose_supervised")


@dataclass(frozen=True)
class LossWeights:
    recon_color: float = 1.0
    recon_alpha: float = 1.0
    adv_color: float = 1.0
    adv_alpha: float = 1.0
    pose_consistency: float = 50.0
    pose_supervised: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossReport:
    """Per-term values, their weighted total, and side metrics (e.g. discriminator losses) not in the total."""

    terms: dict[str, float]
    weights: dict[str, float]
    total: float
    extras: dict[str, float] = field(default_factory=dict)
    loss: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def recompute_total(self) -> float:
        return math.fsum(self.weights[k] * v for k, v in self.terms.items())

    def to_record(self, **context) -> dict:
        rec = dict(context)
        rec.update(self.terms)
        rec.update(self.extras)
        rec["total"] = self.total
        return rec

    def to_json(self, **context) -> str:
        return json.dumps(self.to_record(**context), sort_keys=True)


def reconstruction_loss(target: torch.Tensor, rendered: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels and channels."""
    if target.shape != rendered.shape:
        raise ValueError(f"shape mismatch: target {tuple(target.shape)} vs rendered {tuple(rendered.shape)}")
    return ((target - rendered) ** 2).mean()


def _log_sigmoid(x: torch.Tensor) -> torch.Tensor:
    # log(max(s(x), 1e-7)) evaluated stably
    return F.logsigmoid(x).clamp_min(LOG_CLAMP)


def adversarial_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor, saturating: bool = False):
    """Return ``(discriminator_loss, generator_loss)`` for one stream (color or alpha).

    The discriminator minimizes ``-mean[log s(real) + log(1 - s(fake))]``.  The generator minimizes
    ``-mean[log s(fake)]`` or, with ``saturating``, ``mean[log(1 - s(fake))]``.
    """
    d_loss = -(_log_sigmoid(real_logits).mean() + _log_sigmoid(-fake_logits).mean())
    return d_loss, generator_adversarial_loss(fake_logits, saturating)


def generator_adversarial_loss(fake_logits: torch.Tensor, saturating: bool = False) -> torch.Tensor:
    """Generator side of ``adversarial_losses`` alone (no real logits needed)."""
    if saturating:
        return _log_sigmoid(-fake_logits).mean()
    return -_log_sigmoid(fake_logits).mean()


def _as_pose_tensor(pose) -> torch.Tensor:
    if hasattr(pose, "to_vector"):
        return torch.as_tensor(pose.to_vector())[None]
    t = torch.as_tensor(pose)
    return t[None] if t.dim() == 1 else t


def pose_consistency_loss(sampled, reestimated) -> torch.Tensor:
    """Mean squared difference of the normalized 7-number pose vectors."""
    a = normalize_pose_params(_as_pose_tensor(sampled))
    b = normalize_pose_params(_as_pose_tensor(reestimated))
    return ((a - b.to(a.dtype)) ** 2).mean()


def pose_supervised_loss(pred, gt) -> torch.Tensor:
    """Translation MSE plus MSE over the four normalized rotation parameters."""
    if gt is None:
        raise ValueError("pose-supervised loss requires a ground-truth pose")
    p = normalize_pose_params(_as_pose_tensor(pred))
    g = normalize_pose_params(_as_pose_tensor(gt)).to(p.dtype)
    return ((p[:, 4:] - g[:, 4:]) ** 2).mean() + ((p[:, :4] - g[:, :4]) ** 2).mean()


def combine_losses(terms: dict, weights: LossWeights, extras: dict | None = None) -> LossReport:
    """Weighted sum over ``TERM_NAMES``; absent terms contribute 0.  Keeps the differentiable total in ``.loss``."""
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    w = {name: float(getattr(weights, name)) for name in TERM_NAMES}
    values = {}
    loss = None
    for name in TERM_NAMES:
        term = terms.get(name)
        if term is None:
            values[name] = 0.0
            continue
        values[name] = float(term.detach()) if isinstance(term, torch.Tensor) else float(term)
        if w[name] == 0:
            continue
        contrib = w[name] * term
        loss = contrib if loss is None else loss + contrib
    total = math.fsum(w[k] * v for k, v in values.items())
    if not isinstance(loss, torch.Tensor):
        loss = None
    return LossReport(values, w, total, dict(extras or {}), loss)
