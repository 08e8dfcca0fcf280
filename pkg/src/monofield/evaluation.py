"""Image metrics and offset-aligned novel-view evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .data import AnalyticField, DatasetRecord, SyntheticSceneSpec, crop_to_mask
from .field import LatentCodes, RadianceField
from .geometry import CameraPose, Intrinsics, fit_offset_rotation
from .networks import Encoder, encode_image
from .rendering import SamplingConfig, render_image
from .training import ConfigError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a, b) -> float:
    """Peak-1 PSNR in dB; identical inputs return ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def masked_psnr(gt_rgb, gt_alpha, pred_rgb, pred_alpha, threshold: float = 0.5) -> float:
    """PSNR over pixels where either alpha reaches ``threshold`` (both images on a black canvas)."""
    region = (np.asarray(gt_alpha) >= threshold) | (np.asarray(pred_alpha) >= threshold)
    if not region.any():
        return PSNR_CAP
    return psnr(np.asarray(gt_rgb)[region], np.asarray(pred_rgb)[region])


def _gaussian_kernel() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    k = _gaussian_kernel()
    r = SSIM_WINDOW // 2
    out = correlate1d(correlate1d(img, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a**2
    var_b = _filter_valid(b * b) - mu_b**2
    cov = _filter_valid(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, peak 1) over fully covered windows; color averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if a.ndim == 2:
        return _ssim_channel(a, b)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[2])]))


# -- novel-view evaluation --


class Predictor(Protocol):
    def encode(self, record: DatasetRecord) -> tuple[object, CameraPose]: ...

    def render(self, codes, rotation: np.ndarray, translation: np.ndarray, intr: Intrinsics): ...


class ModelPredictor:
    """Encoder + radiance field."""

    def __init__(self, encoder: Encoder, field: RadianceField, sampling: SamplingConfig, progress: float = 1.0):
        self.encoder = encoder.eval()
        self.field = field.eval()
        self.sampling = SamplingConfig(sampling.near, sampling.far, sampling.num_coarse, sampling.num_fine, jitter=False)
        self.progress = progress

    def encode(self, record):
        image, mask = record.image, record.mask
        size = self.encoder.cfg.image_size
        if image.shape[:2] != (size, size):
            image, mask, _ = crop_to_mask(image, mask, record.intrinsics, size)
        return encode_image(image, mask, self.encoder)

    def render(self, codes: LatentCodes, rotation, translation, intr):
        s, a = codes.shape[None], codes.appearance[None]

        def fn(pts, dirs):
            return self.field(pts, dirs, s, a, self.progress)

        rgb, alpha, _ = render_image(fn, (rotation, translation), intr, self.sampling)
        return rgb, alpha


class AnalyticPredictor:
    """Renders the generator's own scenes at ground-truth source poses, optionally in a rotated frame.

    With ``frame`` set to ``F``, the scene is expressed in a canonical frame rotated by ``F.T`` and the
    reported poses are ``F.T @ R_gt``; the universal offset that realigns them is ``F``.
    """

    def __init__(self, specs: dict[str, SyntheticSceneSpec], sampling: SamplingConfig, frame: np.ndarray | None = None):
        self.specs = specs
        self.sampling = sampling
        self.frame = np.eye(3) if frame is None else np.asarray(frame)

    def encode(self, record):
        pose = record.pose
        return self.specs[record.instance], (self.frame.T @ pose.rotation, pose.translation)

    def render(self, spec, rotation, translation, intr):
        field = AnalyticField(spec)
        frame = torch.as_tensor(self.frame, dtype=torch.float64)

        def fn(pts, dirs):
            return field(pts @ frame.T, dirs)

        rgb, alpha, _ = render_image(fn, (rotation, translation), intr, self.sampling, dtype=torch.float64)
        return rgb, alpha


@dataclass
class EvalPair:
    source: DatasetRecord
    target: DatasetRecord


def make_pairs(records: Sequence[DatasetRecord]) -> list[EvalPair]:
    """Per instance: the lowest-id view is the input, every other view a held-out target."""
    by_instance: dict[str, list[DatasetRecord]] = {}
    for r in records:
        by_instance.setdefault(r.instance, []).append(r)
    pairs = []
    for inst in sorted(by_instance):
        views = sorted(by_instance[inst], key=lambda r: r.id)
        pairs += [EvalPair(views[0], t) for t in views[1:]]
    return pairs


@dataclass
class EvalReport:
    record_ids: list[str]
    psnr: list[float]
    ssim: list[float]
    offset: np.ndarray
    alignment_residual: float
    regime: str = ""
    mean_psnr: float = field(init=False)
    mean_ssim: float = field(init=False)

    def __post_init__(self):
        n = max(len(self.psnr), 1)
        self.mean_psnr = math.fsum(self.psnr) / n
        self.mean_ssim = math.fsum(self.ssim) / n

    def to_tsv(self) -> str:
        lines = ["record_id\tpsnr\tssim"]
        lines += [f"{r}\t{p:.4f}\t{s:.4f}" for r, p, s in zip(self.record_ids, self.psnr, self.ssim)]
        lines += [
            "",
            "# summary",
            f"regime\t{self.regime}",
            f"records\t{len(self.psnr)}",
            f"mean_psnr\t{self.mean_psnr:.4f}",
            f"mean_ssim\t{self.mean_ssim:.4f}",
            f"alignment_residual\t{self.alignment_residual:.6g}",
        ]
        return "\n".join(lines) + "\n"


def _rotation_of(pose) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pose, CameraPose):
        return pose.rotation, pose.translation
    return np.asarray(pose[0]), np.asarray(pose[1])


def evaluate_novel_views(
    predictor: Predictor,
    pairs: Sequence[EvalPair],
    calibration_fraction: float = 0.2,
    align: bool = True,
    regime: str = "",
) -> EvalReport:
    """Encode each input view, fit one offset rotation on a calibration split, score every held-out view.

    The calibration split is the first ``calibration_fraction`` of input views ordered by id, so the
    report does not depend on input order.  Held-out views render at ``offset.T @ R_gt`` with the
    ground-truth translation.
    """
    if not pairs:
        raise ValueError("no evaluation pairs")
    for p in pairs:
        if not (p.source.has_pose and p.target.has_pose):
            raise ConfigError(f"evaluation needs ground-truth poses ({p.source.id} -> {p.target.id})")
    pairs = sorted(pairs, key=lambda p: (p.target.id, p.source.id))
    encoded = {}
    for p in pairs:
        if p.source.id not in encoded:
            encoded[p.source.id] = predictor.encode(p.source)

    sources = sorted({p.source.id: p.source for p in pairs}.items())
    n_cal = max(1, int(round(calibration_fraction * len(sources))))
    cal = [rec for _, rec in sources[:n_cal]]
    pred_rots = [_rotation_of(encoded[r.id][1])[0] for r in cal]
    gt_rots = [r.pose.rotation for r in cal]
    offset, residual = _fit_rotations(pred_rots, gt_rots)
    if not align:
        offset = np.eye(3)
        residual = float(np.mean([np.sum((p - g) ** 2) for p, g in zip(pred_rots, gt_rots)]))

    ids, psnrs, ssims = [], [], []
    for p in pairs:
        codes, _ = encoded[p.source.id]
        gt = p.target.pose
        rgb, alpha = predictor.render(codes, offset.T @ gt.rotation, gt.translation, p.target.intrinsics)
        ids.append(p.target.id)
        psnrs.append(masked_psnr(p.target.image, p.target.mask, rgb, alpha))
        ssims.append(ssim(p.target.image, rgb))
    return EvalReport(ids, psnrs, ssims, offset, residual, regime)


def _fit_rotations(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]):
    """``fit_offset_rotation`` on raw rotation matrices."""

    class _R:
        def __init__(self, m):
            self.rotation = m

    return fit_offset_rotation([_R(m) for m in pred], [_R(m) for m in gt])
