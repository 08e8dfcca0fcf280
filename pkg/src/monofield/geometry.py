"""Camera poses, pinhole rays and pose alignment.

Conventions
-----------
* Camera frame: x right, y down, z forward (pixel ``(u, v)`` back-projects to
  ``((u - cx) / fx, (v - cy) / fy, 1)``).
* World frame: object-centric, origin at the object center, ``-y`` is up.
* ``CameraPose.rotation`` is ``R = R_az @ R_el``, the camera-to-world rotation.
  ``R_az`` turns about the world up axis, ``R_el`` about the camera right axis.
  The world-to-camera extrinsic rotation is ``R.T``; a world point maps to the
  camera as ``x_cam = R.T @ x_world + t``.  The camera center is therefore
  ``-R @ t`` (equivalently ``-E.T @ t`` with ``E = R.T`` the extrinsic
  rotation).
* ``t`` is the object center expressed in the camera frame, so ``t_z > 0``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

NORM_EPS = 1e-8
POSE_DIM = 7


class InvalidPoseError(ValueError):
    pass


def _normalize_pair(c: float, s: float, name: str) -> tuple[float, float]:
    n = math.hypot(c, s)
    if not n > NORM_EPS:
        raise InvalidPoseError(f"degenerate {name} pair ({c!r}, {s!r}): norm {n:.3g} <= {NORM_EPS}")
    return c / n, s / n


def azimuth_matrix(cos_az: float, sin_az: float) -> np.ndarray:
    """Rotation about the world up axis (``y``)."""
    return np.array([[cos_az, 0.0, sin_az], [0.0, 1.0, 0.0], [-sin_az, 0.0, cos_az]])


def elevation_matrix(cos_el: float, sin_el: float) -> np.ndarray:
    """Rotation about the camera right axis (``x``); positive lifts the camera."""
    return np.array([[1.0, 0.0, 0.0], [0.0, cos_el, sin_el], [0.0, -sin_el, cos_el]])


def rotation_from_params(raw4: Sequence[float]) -> np.ndarray:
    """Build ``R_az @ R_el`` from unnormalized ``(cos_az, sin_az, cos_el, sin_el)``."""
    if len(raw4) != 4:
        raise ValueError(f"expected 4 rotation parameters, got {len(raw4)}")
    ca, sa = _normalize_pair(float(raw4[0]), float(raw4[1]), "azimuth (cos, sin)")
    ce, se = _normalize_pair(float(raw4[2]), float(raw4[3]), "elevation (cos, sin)")
    return azimuth_matrix(ca, sa) @ elevation_matrix(ce, se)


@dataclass(frozen=True)
class CameraPose:
    """Azimuth/elevation rotation plus object translation in the camera frame.

    Rotation pairs are normalized on construction; ``t_z`` must be positive.
    """

    cos_az: float
    sin_az: float
    cos_el: float
    sin_el: float
    t_x: float
    t_y: float
    t_z: float

    def __post_init__(self):
        ca, sa = _normalize_pair(self.cos_az, self.sin_az, "azimuth (cos, sin)")
        ce, se = _normalize_pair(self.cos_el, self.sin_el, "elevation (cos, sin)")
        for name, value in zip(("cos_az", "sin_az", "cos_el", "sin_el"), (ca, sa, ce, se)):
            object.__setattr__(self, name, float(value))
        for name in ("t_x", "t_y", "t_z"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InvalidPoseError(f"non-finite translation component {name}={value}")
            object.__setattr__(self, name, value)
        if not self.t_z > 0:
            raise InvalidPoseError(f"t_z must be positive (camera in front of object), got {self.t_z}")

    @classmethod
    def from_angles(cls, azimuth: float, elevation: float, translation=(0.0, 0.0, 1.8)) -> CameraPose:
        tx, ty, tz = translation
        return cls(math.cos(azimuth), math.sin(azimuth), math.cos(elevation), math.sin(elevation), tx, ty, tz)

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> CameraPose:
        if len(vec) != POSE_DIM:
            raise ValueError(f"pose vector must have {POSE_DIM} numbers, got {len(vec)}")
        return cls(*(float(v) for v in vec))

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.cos_az, self.sin_az, self.cos_el, self.sin_el, self.t_x, self.t_y, self.t_z], dtype=np.float64
        )

    @property
    def azimuth(self) -> float:
        return math.atan2(self.sin_az, self.cos_az)

    @property
    def elevation(self) -> float:
        return math.atan2(self.sin_el, self.cos_el)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.t_x, self.t_y, self.t_z])

    @property
    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation ``R_az @ R_el``."""
        return azimuth_matrix(self.cos_az, self.sin_az) @ elevation_matrix(self.cos_el, self.sin_el)

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation @ self.translation

    def with_rotation(self, rotation: np.ndarray) -> CameraPose:
        """Same translation, rotation replaced by the azimuth/elevation read off ``rotation``.

        Only exact for matrices of the form ``R_az @ R_el``; otherwise this is the
        azimuth/elevation whose camera forward axis matches ``rotation``'s.
        """
        forward = rotation[:, 2]
        sin_el = forward[1]
        cos_el = math.hypot(forward[0], forward[2])
        if cos_el > 1e-9:
            cos_az, sin_az = forward[2] / cos_el, forward[0] / cos_el
        else:
            # looking straight along the up axis: recover azimuth from the right axis
            cos_az, sin_az = rotation[0, 0], -rotation[2, 0]
        return CameraPose(cos_az, sin_az, cos_el, sin_el, self.t_x, self.t_y, self.t_z)


@dataclass(frozen=True)
class Intrinsics:
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.focal_x}, {self.focal_y})")
        # a tight crop around an off-center object can move the principal point off the crop
        if not (np.isfinite(self.principal_x) and np.isfinite(self.principal_y)):
            raise ValueError(f"principal point ({self.principal_x}, {self.principal_y}) must be finite")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    @classmethod
    def default(cls, size: int = 112) -> Intrinsics:
        """Focal 120 px at 112 px, scaled proportionally to ``size``.

        With the default pose prior the whole +-0.4 scene box stays inside the frame.
        """
        f = 120.0 * size / 112.0
        return cls(f, f, size / 2.0, size / 2.0, size, size)

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.focal_x, self.focal_y, self.principal_x, self.principal_y, self.width, self.height],
            dtype=np.float64,
        )

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> Intrinsics:
        fx, fy, cx, cy, w, h = (float(v) for v in vec)
        if w != int(w) or h != int(h):
            raise ValueError(f"image size must be integral, got {w}x{h}")
        return cls(fx, fy, cx, cy, int(w), int(h))

    def matrix(self) -> np.ndarray:
        return np.array([[self.focal_x, 0.0, self.principal_x], [0.0, self.focal_y, self.principal_y], [0, 0, 1.0]])


@dataclass
class RayBatch:
    origins: torch.Tensor
    directions: torch.Tensor
    pixel_coords: torch.Tensor
    target_rgb: torch.Tensor | None = None
    target_alpha: torch.Tensor | None = None

    def __post_init__(self):
        n = self.origins.shape[0]
        for name in ("directions", "pixel_coords", "target_rgb", "target_alpha"):
            value = getattr(self, name)
            if value is not None and value.shape[0] != n:
                raise ValueError(f"RayBatch.{name} has {value.shape[0]} rows, expected {n}")

    def __len__(self):
        return self.origins.shape[0]


@dataclass(frozen=True)
class PosePrior:
    """Uniform prior over azimuth, elevation and a jittered translation."""

    azimuth_range: tuple[float, float] = (0.0, 2 * math.pi)
    elevation_range: tuple[float, float] = (math.radians(-10.0), math.radians(40.0))
    translation_mean: tuple[float, float, float] = (0.0, 0.0, 1.8)
    translation_spread: tuple[float, float, float] = (0.0, 0.0, 0.1)

    def __post_init__(self):
        for name in ("azimuth_range", "elevation_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
        if any(s < 0 for s in self.translation_spread):
            raise ValueError("translation_spread must be non-negative")
        if not self.translation_mean[2] - self.translation_spread[2] > 0:
            raise ValueError("prior allows t_z <= 0; need translation_mean[2] > translation_spread[2]")


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_pose_prior(prior: PosePrior, seed) -> CameraPose:
    """Draw one pose; ``seed`` is an int or a ``numpy.random.Generator`` (advanced in place)."""
    rng = _as_generator(seed)
    az = rng.uniform(*prior.azimuth_range) if prior.azimuth_range[1] > prior.azimuth_range[0] else prior.azimuth_range[0]
    el = (
        rng.uniform(*prior.elevation_range)
        if prior.elevation_range[1] > prior.elevation_range[0]
        else prior.elevation_range[0]
    )
    jitter = rng.uniform(-1.0, 1.0, size=3) * np.asarray(prior.translation_spread)
    t = np.asarray(prior.translation_mean) + jitter
    return CameraPose.from_angles(az, el, tuple(t))


def _check_pixels(pixels: np.ndarray, intr: Intrinsics):
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError(f"pixel coordinates must be (N, 2), got {pixels.shape}")
    u, v = pixels[:, 0], pixels[:, 1]
    bad = (u < 0) | (u > intr.width - 1) | (v < 0) | (v > intr.height - 1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IndexError(f"pixel ({u[i]}, {v[i]}) outside {intr.width}x{intr.height} image")


def camera_directions(pixels: torch.Tensor, intr: Intrinsics) -> torch.Tensor:
    """Unnormalized camera-frame directions for ``(u, v)`` pixel coordinates."""
    u, v = pixels[..., 0], pixels[..., 1]
    x = (u - intr.principal_x) / intr.focal_x
    y = (v - intr.principal_y) / intr.focal_y
    return torch.stack([x, y, torch.ones_like(x)], dim=-1)


def generate_rays(pose: CameraPose, intr: Intrinsics, patch, image=None, mask=None) -> RayBatch:
    """Rays through the given ``(u, v)`` pixels; targets are gathered when ``image``/``mask`` are given.

    Targets use the nearest pixel for fractional (strided) coordinates.
    """
    pixels = np.asarray(patch, dtype=np.float64).reshape(-1, 2)
    _check_pixels(pixels, intr)
    pix = torch.from_numpy(pixels)
    rot = torch.from_numpy(pose.rotation)
    dirs = camera_directions(pix, intr) @ rot.T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = torch.from_numpy(pose.camera_center).expand(len(pixels), 3).clone()
    target_rgb = target_alpha = None
    if image is not None or mask is not None:
        iu = np.clip(np.rint(pixels[:, 0]).astype(int), 0, intr.width - 1)
        iv = np.clip(np.rint(pixels[:, 1]).astype(int), 0, intr.height - 1)
        if image is not None:
            target_rgb = torch.as_tensor(np.asarray(image)[iv, iu], dtype=torch.float64)
        if mask is not None:
            target_alpha = torch.as_tensor(np.asarray(mask)[iv, iu], dtype=torch.float64)
    return RayBatch(origins, dirs, pix, target_rgb, target_alpha)


def project_points(points: np.ndarray, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Pinhole projection of world points to ``(u, v)`` pixels."""
    cam = points @ pose.rotation + pose.translation  # (R.T @ p).T == p @ R
    u = intr.focal_x * cam[:, 0] / cam[:, 2] + intr.principal_x
    v = intr.focal_y * cam[:, 1] / cam[:, 2] + intr.principal_y
    return np.stack([u, v], axis=-1)


# -- batched, differentiable counterparts used by the networks and the renderer --


def normalize_pose_params(raw: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Normalize both (cos, sin) pairs of ``(..., 7)`` or ``(..., 4)`` pose tensors."""
    az = raw[..., 0:2]
    el = raw[..., 2:4]
    az = az / az.norm(dim=-1, keepdim=True).clamp_min(eps)
    el = el / el.norm(dim=-1, keepdim=True).clamp_min(eps)
    return torch.cat([az, el, raw[..., 4:]], dim=-1)


def rotation_matrices(params: torch.Tensor) -> torch.Tensor:
    """``(..., >=4)`` normalized pose parameters -> ``(..., 3, 3)`` camera-to-world rotations."""
    ca, sa, ce, se = params[..., 0], params[..., 1], params[..., 2], params[..., 3]
    zero = torch.zeros_like(ca)
    # R_az @ R_el written out
    r00, r01, r02 = ca, -sa * se, sa * ce
    r10, r11, r12 = zero, ce, se
    r20, r21, r22 = -sa, -ca * se, ca * ce
    return torch.stack(
        [torch.stack([r00, r01, r02], -1), torch.stack([r10, r11, r12], -1), torch.stack([r20, r21, r22], -1)], -2
    )


def poses_to_tensor(poses: Sequence[CameraPose], dtype=torch.float32) -> torch.Tensor:
    return torch.tensor(np.stack([p.to_vector() for p in poses]), dtype=dtype)


def batched_rays(pose_params: torch.Tensor, intr: torch.Tensor, pixels: torch.Tensor):
    """Rays for a batch of poses.

    ``pose_params`` is ``(B, 7)`` (normalized), ``intr`` is ``(B, 4)`` rows of ``(fx, fy, cx, cy)`` and
    ``pixels`` is ``(P, 2)`` shared by the batch or ``(B, P, 2)``.  Returns ``(origins, directions)``,
    each ``(B, P, 3)``, differentiable in the pose.
    """
    return rays_from_extrinsics(rotation_matrices(pose_params), pose_params[:, 4:7], intr, pixels)


def rays_from_extrinsics(rot: torch.Tensor, t: torch.Tensor, intr: torch.Tensor, pixels: torch.Tensor):
    """Like ``batched_rays`` for arbitrary camera-to-world rotations ``(B, 3, 3)`` and translations ``(B, 3)``."""
    if pixels.dim() == 2:
        pixels = pixels.expand(rot.shape[0], -1, -1)
    pixels = pixels.to(rot.dtype)
    intr = intr.to(rot.dtype)
    x = (pixels[..., 0] - intr[:, 2:3]) / intr[:, 0:1]
    y = (pixels[..., 1] - intr[:, 3:4]) / intr[:, 1:2]
    dirs_cam = torch.stack([x, y, torch.ones_like(x)], dim=-1)
    dirs_cam = dirs_cam / dirs_cam.norm(dim=-1, keepdim=True)
    dirs = torch.einsum("bij,bpj->bpi", rot, dirs_cam)
    centers = -torch.einsum("bij,bj->bi", rot, t.to(rot.dtype))
    origins = centers[:, None, :].expand(-1, pixels.shape[1], -1)
    return origins, dirs


def fit_offset_rotation(pred: Sequence[CameraPose], gt: Sequence[CameraPose]) -> tuple[np.ndarray, float]:
    """Rotation ``O`` minimizing ``mean ||O @ R_pred_i - R_gt_i||_F^2`` (orthogonal Procrustes).

    Returns ``(O, residual)`` where ``residual`` is the minimized mean squared Frobenius distance.
    """
    if len(pred) == 0 or len(pred) != len(gt):
        raise ValueError(f"need equal, non-empty pose lists (got {len(pred)} and {len(gt)})")
    rp = np.stack([p.rotation for p in pred])
    rg = np.stack([g.rotation for g in gt])
    m = np.einsum("nij,nkj->ik", rg, rp)
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    offset = u @ np.diag([1.0, 1.0, d]) @ vt
    resid = float(np.mean(np.sum((offset @ rp - rg) ** 2, axis=(1, 2))))
    return offset, resid


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in radians of the relative rotation ``a.T @ b``."""
    c = (np.trace(a.T @ b) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


# -- pose serialization: 7 numbers (cos_az, sin_az, cos_el, sin_el, t_x, t_y, t_z) --

_POSE_STRUCT = struct.Struct("<7f")


def format_pose(pose: CameraPose) -> str:
    return " ".join(repr(float(v)) for v in pose.to_vector())


def parse_pose(text: str) -> CameraPose:
    parts = text.split()
    if len(parts) != POSE_DIM:
        raise ValueError(f"pose needs {POSE_DIM} numbers, got {len(parts)}")
    return CameraPose.from_vector([float(p) for p in parts])


def pose_to_bytes(pose: CameraPose) -> bytes:
    return _POSE_STRUCT.pack(*pose.to_vector())


def pose_from_bytes(data: bytes) -> CameraPose:
    return CameraPose.from_vector(_POSE_STRUCT.unpack(data))
