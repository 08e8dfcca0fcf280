"""Differentiable volume rendering with hierarchical resampling and patch-wise ray grids."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .geometry import CameraPose, Intrinsics, batched_rays, poses_to_tensor, rays_from_extrinsics

# field_fn(points (B, R, S, 3), dirs (B, R, S, 3)) -> (density (B, R, S), rgb (B, R, S, 3))
FieldFn = Callable[[torch.Tensor, torch.Tensor], tuple]


@dataclass(frozen=True)
class SamplingConfig:
    near: float = 0.1
    far: float = 4.0
    num_coarse: int = 64
    num_fine: int = 128
    jitter: bool = True

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.num_coarse < 1 or self.num_fine < 0:
            raise ValueError(f"bad sample counts: coarse={self.num_coarse}, fine={self.num_fine}")


class RenderOutput(NamedTuple):
    rgb: torch.Tensor
    alpha: torch.Tensor
    depth: torch.Tensor
    weights: torch.Tensor
    t_values: torch.Tensor
    transmittance: torch.Tensor


@dataclass(frozen=True)
class PatchSpec:
    """A ``patch_height x patch_width`` grid: pixel ``(u, v) = offset + stride * (j, i)``."""

    patch_height: int = 80
    patch_width: int = 80
    stride: float = 1.0
    offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.patch_height < 1 or self.patch_width < 1 or not self.stride > 0:
            raise ValueError(f"invalid patch {self.patch_height}x{self.patch_width} stride {self.stride}")

    def pixels(self) -> torch.Tensor:
        """``(H*W, 2)`` float64 ``(u, v)`` coordinates, row-major."""
        v, u = torch.meshgrid(
            torch.arange(self.patch_height, dtype=torch.float64),
            torch.arange(self.patch_width, dtype=torch.float64),
            indexing="ij",
        )
        uv = torch.stack([u.flatten(), v.flatten()], dim=-1) * self.stride
        return uv + torch.tensor(self.offset, dtype=torch.float64)

    def check(self, intr: Intrinsics):
        u1 = self.offset[0] + (self.patch_width - 1) * self.stride
        v1 = self.offset[1] + (self.patch_height - 1) * self.stride
        if min(self.offset) < 0 or u1 > intr.width - 1 + 1e-9 or v1 > intr.height - 1 + 1e-9:
            raise IndexError(
                f"patch {self.patch_height}x{self.patch_width} stride {self.stride} offset {self.offset} "
                f"exceeds {intr.width}x{intr.height} image"
            )

    @classmethod
    def full(cls, intr: Intrinsics) -> PatchSpec:
        return cls(intr.height, intr.width, 1.0, (0.0, 0.0))

    @classmethod
    def random_crop(cls, intr: Intrinsics, size: int, rng: np.random.Generator) -> PatchSpec:
        """Stride-1 crop at a random integer offset."""
        ou = int(rng.integers(0, intr.width - size + 1))
        ov = int(rng.integers(0, intr.height - size + 1))
        return cls(size, size, 1.0, (float(ou), float(ov)))

    @classmethod
    def covering(cls, intr: Intrinsics, size: int, rng: np.random.Generator | None = None) -> PatchSpec:
        """Strided grid spanning the whole image (stride ``width / size``), random sub-stride offset."""
        stride = intr.width / size
        slack_u = intr.width - 1 - (size - 1) * stride
        slack_v = intr.height - 1 - (size - 1) * stride
        if slack_u < 0 or slack_v < 0:
            stride = (min(intr.width, intr.height) - 1) / max(size - 1, 1)
            slack_u = slack_v = 0.0
        if rng is None:
            off = (slack_u / 2, slack_v / 2)
        else:
            off = (float(rng.uniform(0, slack_u)), float(rng.uniform(0, slack_v)))
        return cls(size, size, stride, off)


def _generator(seed) -> torch.Generator | None:
    if seed is None or isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def stratified_sample(cfg: SamplingConfig, ray_count: int, seed=None, dtype=torch.float64) -> torch.Tensor:
    """One ``t`` per evenly spaced bin of ``[near, far]``; uniform within the bin when jittering, else its midpoint."""
    n = cfg.num_coarse
    width = (cfg.far - cfg.near) / n
    left = cfg.near + width * torch.arange(n, dtype=dtype)
    if cfg.jitter:
        u = torch.rand(ray_count, n, generator=_generator(seed), dtype=dtype)
    else:
        u = torch.full((ray_count, n), 0.5, dtype=dtype)
    return left + width * u


def bin_edges(t: torch.Tensor, far: float | None = None) -> torch.Tensor:
    """Sample ``i`` owns ``[t_i, t_{i+1})``; the last bin ends at ``far`` (or repeats the previous width)."""
    if far is None:
        last = t[..., -1:] + (t[..., -1:] - t[..., -2:-1] if t.shape[-1] > 1 else 1.0)
    else:
        last = torch.full_like(t[..., -1:], far)
    return torch.cat([t, last], dim=-1)


def hierarchical_resample(
    coarse_t: torch.Tensor,
    coarse_weights: torch.Tensor,
    num_fine: int,
    seed=None,
    far: float | None = None,
    deterministic: bool = False,
) -> torch.Tensor:
    """Inverse-transform samples from the piecewise-constant density proportional to the coarse weights.

    Returns sorted, detached ``(..., num_fine)`` t-values.  All-zero weight rows fall back to uniform.
    """
    t = coarse_t.detach()
    w = coarse_weights.detach().clamp_min(0)
    edges = bin_edges(t, far)
    total = w.sum(dim=-1, keepdim=True)
    w = torch.where(total > 1e-12, w, torch.ones_like(w))
    pdf = w / w.sum(dim=-1, keepdim=True)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)
    cdf[..., -1] = 1.0

    shape = (*t.shape[:-1], num_fine)
    if deterministic:
        u = ((torch.arange(num_fine, dtype=t.dtype) + 0.5) / num_fine).expand(shape).contiguous()
    else:
        u = torch.rand(shape, generator=_generator(seed), dtype=t.dtype)
    # bin index = number of interior cdf knots <= u; zero-mass bins are never selected
    idx = torch.searchsorted(cdf[..., 1:-1].contiguous(), u, right=True)
    c0 = torch.gather(cdf, -1, idx)
    p = torch.gather(pdf, -1, idx)
    e0 = torch.gather(edges, -1, idx)
    e1 = torch.gather(edges, -1, idx + 1)
    frac = ((u - c0) / p.clamp_min(1e-20)).clamp(0.0, 1.0)
    samples = e0 + frac * (e1 - e0)
    return torch.sort(samples, dim=-1).values


def composite(density: torch.Tensor, rgb: torch.Tensor, t: torch.Tensor, far: float) -> RenderOutput:
    """Alpha-composite samples along the last axis.

    ``density``/``t``: ``(..., N)``, ``rgb``: ``(..., N, 3)``.  ``delta_i = t_{i+1} - t_i`` with the last
    interval running to ``far``.
    """
    delta = torch.cat([t[..., 1:] - t[..., :-1], (far - t[..., -1:]).clamp_min(0)], dim=-1)
    tau = density * delta
    seg_alpha = -torch.expm1(-tau)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[..., :1]), tau[..., :-1]], dim=-1), dim=-1))
    weights = trans * seg_alpha
    color = (weights[..., None] * rgb).sum(dim=-2)
    alpha = weights.sum(dim=-1)
    depth = (weights * t).sum(dim=-1) / alpha.clamp_min(1e-8)
    return RenderOutput(color, alpha, depth, weights, t, trans)


def composite_ray(density, rgb, t_values, far: float) -> RenderOutput:
    """Single-ray compositing with argument checks; ``density (N,)``, ``rgb (N, 3)``, ``t_values (N,)``."""
    density = torch.as_tensor(density, dtype=torch.float64)
    rgb = torch.as_tensor(rgb, dtype=torch.float64)
    t = torch.as_tensor(t_values, dtype=torch.float64)
    if t.dim() != 1 or density.shape != t.shape or rgb.shape != (*t.shape, 3):
        raise ValueError(f"shape mismatch: density {tuple(density.shape)}, rgb {tuple(rgb.shape)}, t {tuple(t.shape)}")
    if t.numel() > 1 and not bool((t[1:] > t[:-1]).all()):
        raise ValueError("t_values must be strictly increasing")
    if bool((density < 0).any()):
        raise ValueError("densities must be non-negative")
    return composite(density, rgb, t, far)


def render_rays(
    field_fn: FieldFn,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    cfg: SamplingConfig,
    seed=None,
) -> RenderOutput:
    """Coarse pass, fine resampling, then a single composite over the sorted union of both sample sets.

    ``origins``/``dirs``: ``(B, R, 3)``.  The coarse field outputs are reused in the union, so every
    sample is queried exactly once.
    """
    gen = _generator(seed)
    B, R = origins.shape[:2]
    dtype = origins.dtype
    t_c = stratified_sample(cfg, B * R, gen, dtype=dtype).reshape(B, R, -1)

    def query(t):
        pts = origins[:, :, None, :] + t[..., None] * dirs[:, :, None, :]
        return field_fn(pts, dirs[:, :, None, :].expand_as(pts))

    sigma_c, rgb_c = query(t_c)
    if cfg.num_fine == 0:
        return composite(sigma_c, rgb_c, t_c, cfg.far)
    coarse = composite(sigma_c.detach(), rgb_c.detach(), t_c, cfg.far)
    t_f = hierarchical_resample(t_c, coarse.weights, cfg.num_fine, gen, far=cfg.far, deterministic=not cfg.jitter)
    sigma_f, rgb_f = query(t_f)
    t_all, order = torch.sort(torch.cat([t_c, t_f], dim=-1), dim=-1)
    sigma = torch.gather(torch.cat([sigma_c, sigma_f], dim=-1), -1, order)
    rgb = torch.gather(torch.cat([rgb_c, rgb_f], dim=-2), -2, order[..., None].expand(-1, -1, -1, 3))
    return composite(sigma, rgb, t_all, cfg.far)


def intrinsics_tensor(intr: Intrinsics, batch: int, dtype=torch.float64) -> torch.Tensor:
    v = torch.tensor([intr.focal_x, intr.focal_y, intr.principal_x, intr.principal_y], dtype=dtype)
    return v.expand(batch, 4)


def render_patch(
    field_fn: FieldFn,
    pose,
    intr: Intrinsics,
    patch: PatchSpec,
    cfg: SamplingConfig,
    seed=None,
    dtype=torch.float64,
) -> RenderOutput:
    """Render a patch for one ``CameraPose`` or a ``(B, 7)`` pose tensor; outputs are ``(B, H*W, ...)``.

    ``field_fn`` already closes over the latent codes (see ``RadianceField``).
    """
    patch.check(intr)
    if isinstance(pose, CameraPose):
        pose = poses_to_tensor([pose], dtype=dtype)
    pixels = patch.pixels().to(pose.dtype)
    origins, dirs = batched_rays(pose, intrinsics_tensor(intr, pose.shape[0], pose.dtype), pixels)
    return render_rays(field_fn, origins, dirs, cfg, seed)


def render_image(field_fn: FieldFn, pose, intr: Intrinsics, cfg: SamplingConfig, seed=None, chunk: int = 4096,
                 dtype=torch.float32):
    """Full-image render in ray chunks; returns ``(rgb HxWx3, alpha HxW, depth HxW)`` float64 arrays.

    ``pose`` is a ``CameraPose`` or a ``(rotation 3x3, translation 3)`` pair for arbitrary rotations.
    """
    if isinstance(pose, CameraPose):
        rot, t = pose.rotation, pose.translation
    else:
        rot, t = pose
    rot = torch.as_tensor(np.asarray(rot), dtype=dtype)[None]
    t = torch.as_tensor(np.asarray(t), dtype=dtype)[None]
    pixels = PatchSpec.full(intr).pixels().to(dtype)
    gen = _generator(seed)
    rgb, alpha, depth = [], [], []
    with torch.no_grad():
        for start in range(0, pixels.shape[0], chunk):
            o, d = rays_from_extrinsics(rot, t, intrinsics_tensor(intr, 1, dtype), pixels[start : start + chunk])
            out = render_rays(field_fn, o, d, cfg, gen)
            rgb.append(out.rgb[0])
            alpha.append(out.alpha[0])
            depth.append(out.depth[0])
    h, w = intr.height, intr.width
    return (
        torch.cat(rgb).reshape(h, w, 3).double().numpy(),
        torch.cat(alpha).reshape(h, w).double().numpy(),
        torch.cat(depth).reshape(h, w).double().numpy(),
    )


def sample_patch(images: torch.Tensor, patch: PatchSpec) -> torch.Tensor:
    """Bilinearly sample ``(B, C, H, W)`` images on a patch grid -> ``(B, C, ph, pw)``.

    Integer grid points return the stored pixels exactly.
    """
    B, _, H, W = images.shape
    uv = patch.pixels().to(images.dtype)
    gx = uv[:, 0] / (W - 1) * 2 - 1
    gy = uv[:, 1] / (H - 1) * 2 - 1
    grid = torch.stack([gx, gy], dim=-1).reshape(1, patch.patch_height, patch.patch_width, 2).expand(B, -1, -1, -1)
    if patch.stride == 1.0 and float(patch.offset[0]).is_integer() and float(patch.offset[1]).is_integer():
        u0, v0 = int(patch.offset[0]), int(patch.offset[1])
        return images[:, :, v0 : v0 + patch.patch_height, u0 : u0 + patch.patch_width]
    return F.grid_sample(images, grid, mode="bilinear", align_corners=True)


# -- image outputs --


def write_png(path, image: np.ndarray):
    """Write ``HxW`` (grayscale) or ``HxWx3`` values in ``[0, 1]`` as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path)


def read_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path))
    return img.astype(np.float64) / 255.0


def write_pfm(path, data: np.ndarray):
    """Grayscale ``Pf`` map, little-endian float32, rows stored bottom to top."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D map, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        channels = 1 if header == b"Pf" else 3
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dt, count=w * h * channels)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float32)

