"""Alternating generator/discriminator optimization and the supervision regimes."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import read_checkpoint, save_checkpoint
from .data import DatasetRecord, stack_records
from .encoding import EncodingConfig
from .field import FieldConfig, RadianceField
from .geometry import Intrinsics, PosePrior, batched_rays, poses_to_tensor, sample_pose_prior
from .networks import Discriminator, DiscriminatorConfig, Encoder, EncoderConfig
from .objectives import (
    LossReport,
    LossWeights,
    adversarial_losses,
    combine_losses,
    generator_adversarial_loss,
    pose_consistency_loss,
    pose_supervised_loss,
    reconstruction_loss,
)
from .rendering import PatchSpec, SamplingConfig, render_rays, sample_patch

log = logging.getLogger(__name__)

REGIMES = ("unsupervised", "weak", "full")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    initial_lr: float = 1e-3
    decay_rate: float = 0.96
    regime: str = "unsupervised"
    labeled_fraction: float = 0.0
    seed: int = 0
    # weak regime: phase-1 epochs on the labeled subset (None: same as ``epochs``), and whether
    # phase 2 fine-tunes on the full set (False gives the labeled-only baseline)
    phase1_epochs: int | None = None
    finetune_unlabeled: bool = True
    max_steps: int | None = None  # per phase
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    encoder: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    discriminator: DiscriminatorConfig = dataclasses.field(default_factory=DiscriminatorConfig)
    sampling: SamplingConfig = dataclasses.field(default_factory=SamplingConfig)
    prior: PosePrior = dataclasses.field(default_factory=PosePrior)
    recon_patch: int = 80
    anneal_fraction: float = 0.25
    anneal_steps: int | None = None
    symmetry: str = "auto"  # auto | on | off
    saturating_generator: bool = False
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        f = self.labeled_fraction
        if self.regime == "unsupervised" and f != 0:
            raise ConfigError("unsupervised regime requires labeled_fraction = 0")
        if self.regime == "full" and f != 1:
            raise ConfigError("full regime requires labeled_fraction = 1")
        if self.regime == "weak" and not 0 < f < 1:
            raise ConfigError("weak regime requires 0 < labeled_fraction < 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 < self.decay_rate <= 1 or not self.initial_lr > 0:
            raise ConfigError("need initial_lr > 0 and 0 < decay_rate <= 1")
        if self.symmetry not in ("auto", "on", "off"):
            raise ConfigError(f"symmetry must be auto|on|off, got {self.symmetry!r}")
        if self.discriminator.patch_size < 8:
            raise ConfigError("discriminator patch_size must be >= 8")

    @property
    def novel_patch(self) -> int:
        return self.discriminator.patch_size


# depth range of the +-0.4 box seen from any default-prior camera (|t| in [1.7, 1.9])
DESK_NEAR, DESK_FAR = 1.0, 2.6


def desk_config(**overrides) -> TrainConfig:
    """Small networks and sample counts for single-processor runs at 64x64."""
    base = TrainConfig(
        batch_size=4,
        field=FieldConfig(
            mlp_depth=4,
            mlp_width=64,
            position_encoding=EncodingConfig(num_frequencies=6),
            direction_encoding=EncodingConfig(num_frequencies=2),
        ),
        encoder=EncoderConfig(image_size=64, backbone="tiny", feature_dim=128),
        discriminator=DiscriminatorConfig(patch_size=16, channels=(32, 64, 128)),
        sampling=SamplingConfig(near=DESK_NEAR, far=DESK_FAR, num_coarse=16, num_fine=16),
        recon_patch=16,
        # at 64 px a 16 px discriminator separates the early foggy renders within a few dozen steps
        # and, at unit or 0.1 weight, erases density everywhere; 0.01 keeps reconstruction in charge
        weights=LossWeights(adv_color=0.01, adv_alpha=0.01),
    )
    return replace(base, **overrides)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Per-epoch stepwise exponential decay."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.initial_lr * cfg.decay_rate**epoch


@dataclass
class TrainState:
    encoder: Encoder
    field: RadianceField
    disc_color: Discriminator
    disc_alpha: Discriminator
    gen_opt: torch.optim.Adam
    disc_opt: torch.optim.Adam
    np_rng: np.random.Generator
    torch_gen: torch.Generator
    step: int = 0
    epoch: int = 0
    phase: int = 1
    anneal_steps: int = 1
    progress_history: list = dataclasses.field(default_factory=list)

    def generator_parameters(self):
        return [*self.encoder.parameters(), *self.field.parameters()]

    def discriminator_parameters(self):
        return [*self.disc_color.parameters(), *self.disc_alpha.parameters()]

    @property
    def progress(self) -> float:
        return min(max(self.step / self.anneal_steps, 0.0), 1.0)

    def modules(self) -> dict:
        return {"encoder": self.encoder, "field": self.field, "disc_color": self.disc_color, "disc_alpha": self.disc_alpha}


def init_state(cfg: TrainConfig, symmetric: bool = False) -> TrainState:
    torch.manual_seed(cfg.seed)
    field_cfg = cfg.field
    if cfg.symmetry != "auto":
        symmetric = cfg.symmetry == "on"
    field_cfg = replace(field_cfg, symmetry_enabled=symmetric)
    encoder = Encoder(cfg.encoder)
    radiance = RadianceField(field_cfg)
    dc = Discriminator(cfg.discriminator, "color")
    da = Discriminator(cfg.discriminator, "alpha")
    gen_opt = torch.optim.Adam([*encoder.parameters(), *radiance.parameters()], lr=cfg.initial_lr)
    disc_opt = torch.optim.Adam([*dc.parameters(), *da.parameters()], lr=cfg.initial_lr)
    return TrainState(
        encoder, radiance, dc, da, gen_opt, disc_opt,
        np.random.default_rng(cfg.seed), torch.Generator().manual_seed(cfg.seed),
    )


def set_lr(state: TrainState, lr: float):
    for opt in (state.gen_opt, state.disc_opt):
        for group in opt.param_groups:
            group["lr"] = lr


def _crop_pixels(rng, n, size, width, height):
    out = []
    for _ in range(n):
        ou = int(rng.integers(0, width - size + 1))
        ov = int(rng.integers(0, height - size + 1))
        out.append(PatchSpec(size, size, 1.0, (float(ou), float(ov))))
    return out


def _covering_patches(rng, n, size, width, height):
    intr = Intrinsics(1.0, 1.0, 0.0, 0.0, width, height)
    return [PatchSpec.covering(intr, size, rng) for _ in range(n)]


def _gather(images: torch.Tensor, patches: Sequence[PatchSpec]) -> torch.Tensor:
    return torch.cat([sample_patch(images[i : i + 1], p) for i, p in enumerate(patches)])


def _check_finite(terms: dict, step: int):
    for name, value in terms.items():
        if value is None:
            continue
        v = float(torch.as_tensor(value).detach())
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {name}={v} at step {step}")


def train_step(batch: dict, state: TrainState, cfg: TrainConfig) -> tuple[TrainState, LossReport]:
    """One generator update followed by one discriminator update.

    ``batch`` holds ``image (B, 3, H, W)``, ``mask (B, 1, H, W)``, ``intrinsics (B, 4)`` and, for
    pose supervision, ``gt_pose (B, 7)`` with a boolean ``labeled (B,)`` row selector.
    """
    w = cfg.weights
    image, mask, intr = batch["image"], batch["mask"], batch["intrinsics"]
    B, _, H, W = image.shape
    rng, gen = state.np_rng, state.torch_gen
    progress = state.progress
    state.progress_history.append(progress)
    use_novel = w.adv_color > 0 or w.adv_alpha > 0 or w.pose_consistency > 0
    use_adv = w.adv_color > 0 or w.adv_alpha > 0
    for p in state.discriminator_parameters():
        p.requires_grad_(False)

    enc = state.encoder(image, mask)

    def field_fn(shape_code, app_code):
        return lambda pts, dirs: state.field(pts, dirs, shape_code, app_code, progress)

    fn = field_fn(enc.shape_code, enc.appearance_code)
    crops = _crop_pixels(rng, B, cfg.recon_patch, W, H)
    pixels = torch.stack([p.pixels() for p in crops])
    o, d = batched_rays(enc.pose, intr, pixels)
    out = render_rays(fn, o, d, cfg.sampling, gen)
    tgt_rgb = _gather(image, crops).flatten(2).transpose(1, 2)
    tgt_alpha = _gather(mask, crops).flatten(1)
    terms = {
        "recon_color": reconstruction_loss(tgt_rgb, out.rgb),
        "recon_alpha": reconstruction_loss(tgt_alpha, out.alpha),
    }
    extras = {}

    labeled = batch.get("labeled")
    if labeled is not None and bool(labeled.any()):
        terms["pose_supervised"] = pose_supervised_loss(enc.pose[labeled], batch["gt_pose"][labeled])

    fake_c = fake_a = None
    if use_novel:
        novel = poses_to_tensor([sample_pose_prior(cfg.prior, rng) for _ in range(B)], dtype=image.dtype)
        P = cfg.novel_patch
        grids = _covering_patches(rng, B, P, W, H)
        npix = torch.stack([g.pixels() for g in grids])
        o, d = batched_rays(novel, intr, npix)
        nout = render_rays(fn, o, d, cfg.sampling, gen)
        fake_c = nout.rgb.transpose(1, 2).reshape(B, 3, P, P)
        fake_a = nout.alpha.reshape(B, 1, P, P)
        extras["novel_alpha_mass"] = float(nout.alpha.detach().mean())
        if use_adv:
            terms["adv_color"] = generator_adversarial_loss(state.disc_color(fake_c), cfg.saturating_generator)
            terms["adv_alpha"] = generator_adversarial_loss(state.disc_alpha(fake_a), cfg.saturating_generator)
        if w.pose_consistency > 0:
            up_c = F.interpolate(fake_c, size=(H, W), mode="bilinear", align_corners=False)
            up_a = F.interpolate(fake_a, size=(H, W), mode="bilinear", align_corners=False)
            re = state.encoder(up_c, up_a)
            terms["pose_consistency"] = pose_consistency_loss(novel, re.pose)

    _check_finite(terms, state.step)
    report = combine_losses(terms, w, extras)
    state.gen_opt.zero_grad(set_to_none=True)
    report.loss.backward()
    state.gen_opt.step()
    for p in state.discriminator_parameters():
        p.requires_grad_(True)

    if use_adv:
        real_idx = torch.roll(torch.arange(B), 1) if B > 1 else torch.arange(B)
        real_c = _gather(image[real_idx], grids)
        real_a = _gather(mask[real_idx], grids)
        d_c, _ = adversarial_losses(state.disc_color(real_c), state.disc_color(fake_c.detach()))
        d_a, _ = adversarial_losses(state.disc_alpha(real_a), state.disc_alpha(fake_a.detach()))
        _check_finite({"disc_color": d_c, "disc_alpha": d_a}, state.step)
        state.disc_opt.zero_grad(set_to_none=True)
        (d_c + d_a).backward()
        state.disc_opt.step()
        report.extras["disc_color"] = float(d_c.detach())
        report.extras["disc_alpha"] = float(d_a.detach())

    state.step += 1
    return state, report


def _batch_for(indices, tensors, gt_pose, labeled_mask) -> dict:
    idx = torch.as_tensor(indices)
    batch = {k: v[idx] for k, v in tensors.items()}
    if gt_pose is not None:
        batch["gt_pose"] = gt_pose[idx]
        batch["labeled"] = labeled_mask[idx]
    return batch


@dataclass
class TrainingResult:
    state: TrainState
    log: list[dict]
    phase1_ids: list[str] = dataclasses.field(default_factory=list)
    phase2_ids: list[str] = dataclasses.field(default_factory=list)


def run_training(records: Sequence[DatasetRecord], cfg: TrainConfig, out_dir=None) -> TrainingResult:
    """Train under ``cfg.regime``; writes ``train_log.jsonl`` and checkpoints when ``out_dir`` is set.

    * unsupervised: ground-truth poses are never read.
    * full: pose-supervised term on every record.
    * weak: phase 1 on the labeled subset with pose supervision, then (if ``finetune_unlabeled``)
      phase 2 on all records with the term active only on labeled ones; the lr schedule restarts.
    """
    records = list(records)
    if not records:
        raise ConfigError("empty dataset")
    n = len(records)
    if cfg.regime == "full" and not all(r.has_pose for r in records):
        missing = next(r.id for r in records if not r.has_pose)
        raise ConfigError(f"full regime needs poses on every record; {missing} has none")
    labeled_idx = np.zeros(0, dtype=int)
    if cfg.regime == "full":
        labeled_idx = np.arange(n)
    elif cfg.regime == "weak":
        posed = np.array([i for i, r in enumerate(records) if r.has_pose])
        k = max(1, int(round(cfg.labeled_fraction * n)))
        if len(posed) < k:
            raise ConfigError(f"weak regime needs {k} posed records, dataset has {len(posed)}")
        labeled_idx = np.sort(posed[np.random.default_rng(cfg.seed + 1).permutation(len(posed))[:k]])

    symmetric = all(r.symmetric for r in records)
    state = init_state(cfg, symmetric)
    tensors = stack_records(records)
    labeled_mask = torch.zeros(n, dtype=torch.bool)
    gt_pose = None
    if cfg.regime != "unsupervised":
        labeled_mask[torch.as_tensor(labeled_idx)] = True
        gt_pose = torch.zeros(n, 7)
        for i in labeled_idx:
            gt_pose[i] = torch.as_tensor(records[i].pose.to_vector(), dtype=torch.float32)

    if cfg.regime == "weak":
        phases = [(1, labeled_idx, cfg.phase1_epochs or cfg.epochs)]
        if cfg.finetune_unlabeled:
            phases.append((2, np.arange(n), cfg.epochs))
    else:
        phases = [(1, np.arange(n), cfg.epochs)]

    def steps_in(members, epochs):
        per_epoch = math.ceil(len(members) / cfg.batch_size)
        total = per_epoch * epochs
        return min(total, cfg.max_steps) if cfg.max_steps else total

    total_steps = sum(steps_in(m, e) for _, m, e in phases)
    state.anneal_steps = cfg.anneal_steps or max(1, int(round(cfg.anneal_fraction * total_steps)))

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / "train_log.jsonl").open("w", encoding="utf-8")
    history: list[dict] = []
    t0 = time.perf_counter()
    result = TrainingResult(state, history)
    try:
        for phase, members, epochs in phases:
            state.phase = phase
            ids = [records[i].id for i in members]
            if phase == 1:
                result.phase1_ids = ids
            else:
                result.phase2_ids = ids
            budget = steps_in(members, epochs)
            done = 0
            for epoch in range(epochs):
                if done >= budget:
                    break
                state.epoch = epoch
                lr = lr_at(epoch, cfg)
                set_lr(state, lr)
                order = members[state.np_rng.permutation(len(members))]
                for start in range(0, len(order), cfg.batch_size):
                    if done >= budget:
                        break
                    batch = _batch_for(order[start : start + cfg.batch_size], tensors, gt_pose, labeled_mask)
                    _, report = train_step(batch, state, cfg)
                    done += 1
                    rec = report.to_record(step=state.step, epoch=epoch, phase=phase, lr=lr, progress=state.progress_history[-1])
                    rec["wall_time"] = time.perf_counter() - t0
                    history.append(rec)
                    if log_file is not None:
                        log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                if out is not None and (epoch + 1) % cfg.checkpoint_every == 0:
                    save_training_checkpoint(out / f"checkpoint_p{phase}_e{epoch + 1:04d}.safetensors", state, cfg)
        if out is not None:
            save_training_checkpoint(out / "checkpoint_final.safetensors", state, cfg)
            save_resume_state(out / "train_state.pt", state)
    finally:
        if log_file is not None:
            log_file.close()
    return result


# -- persistence --


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    d["field"] = FieldConfig.from_dict(d["field"])
    d["encoder"] = EncoderConfig(**d["encoder"])
    d["discriminator"] = DiscriminatorConfig.from_dict(d["discriminator"])
    d["sampling"] = SamplingConfig(**d["sampling"])
    p = d["prior"]
    d["prior"] = PosePrior(*(tuple(p[k]) for k in ("azimuth_range", "elevation_range", "translation_mean", "translation_spread")))
    return TrainConfig(**d)


def save_training_checkpoint(path, state: TrainState, cfg: TrainConfig):
    save_checkpoint(
        path,
        state.modules(),
        {"train": config_to_dict(cfg), "field": state.field.cfg, "encoder": state.encoder.cfg},
        step=str(state.step),
        anneal_steps=str(state.anneal_steps),
    )


def load_model(path):
    """Rebuild ``(encoder, field, train config, progress)`` from a training checkpoint."""
    states, configs, meta = read_checkpoint(path)
    cfg = config_from_dict(configs["train"])
    encoder = Encoder(EncoderConfig(**configs["encoder"]))
    radiance = RadianceField(FieldConfig.from_dict(configs["field"]))
    encoder.load_state_dict(states["encoder"])
    radiance.load_state_dict(states["field"])
    progress = min(1.0, int(meta.get("step", "0")) / max(1, int(meta.get("anneal_steps", "1"))))
    return encoder.eval(), radiance.eval(), cfg, progress


def save_resume_state(path, state: TrainState):
    torch.save(
        {
            "step": state.step,
            "epoch": state.epoch,
            "phase": state.phase,
            "anneal_steps": state.anneal_steps,
            "gen_opt": state.gen_opt.state_dict(),
            "disc_opt": state.disc_opt.state_dict(),
            "np_rng": state.np_rng.bit_generator.state,
            "torch_gen": state.torch_gen.get_state(),
            "torch_global": torch.get_rng_state(),
            "modules": {k: m.state_dict() for k, m in state.modules().items()},
        },
        path,
    )


def load_resume_state(path, state: TrainState) -> TrainState:
    blob = torch.load(path, weights_only=False)
    for k, m in state.modules().items():
        m.load_state_dict(blob["modules"][k])
    state.gen_opt.load_state_dict(blob["gen_opt"])
    state.disc_opt.load_state_dict(blob["disc_opt"])
    state.np_rng.bit_generator.state = blob["np_rng"]
    state.torch_gen.set_state(blob["torch_gen"])
    torch.set_rng_state(blob["torch_global"])
    state.step, state.epoch, state.phase, state.anneal_steps = blob["step"], blob["epoch"], blob["phase"], blob["anneal_steps"]
    return state
