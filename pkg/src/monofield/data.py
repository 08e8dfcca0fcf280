"""Dataset records, manifest I/O, mask-tight cropping and the synthetic primitives generator.

Manifest format (``manifest.tsv``): one UTF-8 line per record, tab-separated::

    id  image_path  mask_path  category  symmetric(0|1)  [7 pose numbers]  6 intrinsics numbers

Pose numbers are ``cos_az sin_az cos_el sin_el t_x t_y t_z``; intrinsics are
``focal_x focal_y principal_x principal_y width height``.  Paths are relative to
the manifest's directory.  Lines starting with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from scipy import ndimage

from .geometry import CameraPose, Intrinsics, PosePrior, sample_pose_prior
from .rendering import SamplingConfig, read_png, render_image, write_png

SYNTH_SAMPLING = SamplingConfig(num_coarse=128, num_fine=128, jitter=False)


class ManifestError(ValueError):
    pass


class EmptyMaskError(ValueError):
    """Raised for records without foreground; callers skip the record."""


class PoseAudit:
    """Counts reads of ground-truth poses through ``DatasetRecord.pose``."""

    def __init__(self):
        self.count = 0


class DatasetRecord:
    """A masked object image with intrinsics and an optional ground-truth pose.

    Reading ``pose`` is counted by the record's ``PoseAudit`` (if any); use ``has_pose``
    to test for presence without a read.
    """

    def __init__(self, id, image, mask, intrinsics: Intrinsics, pose: CameraPose | None = None,
                 category: str = "object", symmetric: bool = False, audit: PoseAudit | None = None):
        image = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3 or mask.shape != image.shape[:2]:
            raise ValueError(f"record {id}: image {image.shape} and mask {mask.shape} resolutions differ")
        if (image.shape[1], image.shape[0]) != (intrinsics.width, intrinsics.height):
            raise ValueError(f"record {id}: intrinsics size {intrinsics.width}x{intrinsics.height} != image")
        self.id = str(id)
        self.image = image
        self.mask = mask
        self.intrinsics = intrinsics
        self.category = category
        self.symmetric = bool(symmetric)
        self._pose = pose
        self.audit = audit

    @property
    def has_pose(self) -> bool:
        return self._pose is not None

    @property
    def pose(self) -> CameraPose | None:
        if self.audit is not None:
            self.audit.count += 1
        return self._pose

    @property
    def instance(self) -> str:
        return instance_of(self.id)

    def __repr__(self):
        return f"DatasetRecord(id={self.id!r}, size={self.image.shape[1]}x{self.image.shape[0]}, posed={self.has_pose})"


def instance_of(record_id: str) -> str:
    """Records ``<instance>_v<k>`` share an instance; other ids are their own instance."""
    head, sep, tail = record_id.rpartition("_v")
    return head if sep and tail.isdigit() else record_id


# -- cropping --


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Inclusive ``(row0, row1, col0, col1)`` of ``mask >= 0.5``."""
    rows = np.flatnonzero((mask >= 0.5).any(axis=1))
    cols = np.flatnonzero((mask >= 0.5).any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("mask has no pixel >= 0.5")
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def crop_to_mask(image, mask, intr: Intrinsics, out_size: int = 112):
    """Square crop around the tight mask box (zero padded), resampled to ``out_size``.

    Returns ``(image, mask, intrinsics)``.  Output pixel ``j`` samples input coordinate
    ``a + s * j`` with ``s = side / out_size``; intrinsics are updated exactly for that map.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    r0, r1, c0, c1 = mask_bbox(mask)
    side = max(r1 - r0 + 1, c1 - c0 + 1)
    s = side / out_size
    # pixel centers are integers, so columns c0..c1 span edges [c0 - 0.5, c1 + 0.5]
    au = (c0 + c1) / 2 - side / 2 + 0.5 * s
    av = (r0 + r1) / 2 - side / 2 + 0.5 * s
    jj = np.arange(out_size, dtype=np.float64)
    rows = (av + s * jj)[:, None].repeat(out_size, axis=1)
    cols = (au + s * jj)[None, :].repeat(out_size, axis=0)
    coords = np.stack([rows, cols])

    def resample(channel):
        return ndimage.map_coordinates(channel, coords, order=1, mode="grid-constant", cval=0.0)

    masked = np.where((mask >= 0.5)[..., None], image, 0.0)
    out_mask = np.clip(resample(mask), 0.0, 1.0)
    out_img = np.stack([resample(masked[..., c]) for c in range(3)], axis=-1)
    out_img = np.where((out_mask >= 0.5)[..., None], np.clip(out_img, 0.0, 1.0), 0.0)
    new_intr = Intrinsics(
        intr.focal_x / s, intr.focal_y / s, (intr.principal_x - au) / s, (intr.principal_y - av) / s, out_size, out_size
    )
    return out_img, out_mask, new_intr


# -- synthetic scenes --


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" (size = (radius,)) or "box" (size = half extents)
    center: tuple[float, float, float]
    size: tuple[float, ...]
    albedo: tuple[float, float, float]

    def extent(self) -> np.ndarray:
        """Per-axis half extent around the center."""
        if self.kind == "sphere":
            return np.full(3, self.size[0])
        return np.asarray(self.size, dtype=np.float64)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    instance_id: str
    parts: tuple[Primitive, ...]
    half_extent: float = 0.4

    def __post_init__(self):
        if len(self.parts) not in (1, 2):
            raise ValueError(f"{self.instance_id}: need one primitive or a union of two, got {len(self.parts)}")
        for p in self.parts:
            if p.kind not in ("sphere", "box"):
                raise ValueError(f"{self.instance_id}: unknown primitive kind {p.kind!r}")
            if p.kind == "sphere" and len(p.size) != 1 or p.kind == "box" and len(p.size) != 3:
                raise ValueError(f"{self.instance_id}: bad size {p.size} for {p.kind}")
            if min(p.size) <= 0 or not all(0.0 <= a <= 1.0 for a in p.albedo):
                raise ValueError(f"{self.instance_id}: sizes must be positive and albedo in [0, 1]")
            reach = np.abs(np.asarray(p.center)) + p.extent()
            if (reach > self.half_extent + 1e-12).any():
                raise ValueError(
                    f"{self.instance_id}: {p.kind} at {p.center} reaches {reach.max():.3f} outside the "
                    f"+-{self.half_extent} scene box"
                )

    @property
    def primitive(self) -> str:
        return self.parts[0].kind if len(self.parts) == 1 else "union-of-2"

    @property
    def symmetric(self) -> bool:
        """Mirror-symmetric under ``y -> -y`` (every part centered on ``y = 0``)."""
        return all(p.center[1] == 0.0 for p in self.parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSceneSpec:
        parts = tuple(
            Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]), tuple(p["albedo"])) for p in d["parts"]
        )
        return cls(d["instance_id"], parts, d.get("half_extent", 0.4))


class AnalyticField:
    """Piecewise-constant density/albedo of a scene spec, usable as a renderer ``field_fn``."""

    def __init__(self, spec: SyntheticSceneSpec, density: float = 100.0):
        self.spec = spec
        self.density = density

    def inside(self, points: torch.Tensor) -> list[torch.Tensor]:
        masks = []
        for p in self.spec.parts:
            d = points - torch.tensor(p.center, dtype=points.dtype)
            if p.kind == "sphere":
                masks.append(d.norm(dim=-1) <= p.size[0])
            else:
                masks.append((d.abs() <= torch.tensor(p.size, dtype=points.dtype)).all(dim=-1))
        return masks

    def __call__(self, points: torch.Tensor, dirs: torch.Tensor):
        masks = self.inside(points)
        occ = torch.zeros(points.shape[:-1], dtype=points.dtype)
        rgb = torch.zeros(points.shape, dtype=points.dtype)
        for p, m in zip(self.spec.parts, masks):
            mf = m.to(points.dtype)
            fresh = mf * (1.0 - occ)  # first listed part wins where parts overlap
            rgb = rgb + fresh[..., None] * torch.tensor(p.albedo, dtype=points.dtype)
            occ = torch.maximum(occ, mf)
        return occ * self.density, rgb


def _quantized(rng, lo, hi, size=None):
    return np.round(rng.uniform(lo, hi, size) * 255.0) / 255.0


def random_scene_specs(n: int, seed, kinds=("sphere", "box", "union-of-2"), half_extent: float = 0.4):
    """Random mirror-symmetric primitives (centers on ``y = 0``) with 8-bit-exact albedos."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == "union-of-2":
            parts = []
            for sign in (-1.0, 1.0):
                r = float(rng.uniform(0.12, 0.18))
                cx = sign * float(rng.uniform(0.1, half_extent - r))
                cz = float(rng.uniform(-0.1, 0.1))
                sub = "sphere" if rng.random() < 0.5 else "box"
                size = (r,) if sub == "sphere" else tuple(float(v) for v in rng.uniform(0.06, r, 3))
                parts.append(Primitive(sub, (cx, 0.0, cz), size, tuple(float(a) for a in _quantized(rng, 0.1, 1.0, 3))))
            parts = tuple(parts)
        elif kind == "sphere":
            r = float(rng.uniform(0.28, 0.4))
            parts = (Primitive("sphere", (0.0, 0.0, 0.0), (r,), tuple(float(a) for a in _quantized(rng, 0.1, 1.0, 3))),)
        else:
            size = tuple(float(v) for v in rng.uniform(0.18, 0.34, 3))
            parts = (Primitive("box", (0.0, 0.0, 0.0), size, tuple(float(a) for a in _quantized(rng, 0.1, 1.0, 3))),)
        specs.append(SyntheticSceneSpec(f"inst{i:04d}", parts, half_extent))
    return specs


def render_spec(spec: SyntheticSceneSpec, pose: CameraPose, intr: Intrinsics, cfg: SamplingConfig = SYNTH_SAMPLING):
    """Float64 ``(rgb, alpha, depth)`` of an analytic scene."""
    return render_image(AnalyticField(spec), pose, intr, cfg, dtype=torch.float64)


def generate_synthetic_dataset(
    specs: Sequence[SyntheticSceneSpec],
    views_per_instance: int,
    prior: PosePrior,
    cfg: SamplingConfig = SYNTH_SAMPLING,
    seed=0,
    out_dir=".",
    intrinsics: Intrinsics | None = None,
) -> Path:
    """Render every instance from ``views_per_instance`` prior poses; returns the manifest path.

    Writes ``images/<id>.png``, ``masks/<id>.png``, ``manifest.tsv`` and ``scenes.json``.
    Record ids are ``<instance>_v<k>``; each view draws from its own seed derived from ``seed``.
    """
    if cfg.num_coarse + cfg.num_fine < 256:
        raise ValueError("synthetic ground truth needs at least 256 samples per ray")
    intr = intrinsics or Intrinsics.default()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(len(specs) * views_per_instance)
    lines = []
    for i, spec in enumerate(specs):
        for k in range(views_per_instance):
            rng = np.random.default_rng(seeds[i * views_per_instance + k])
            pose = sample_pose_prior(prior, rng)
            rgb, alpha, _ = render_spec(spec, pose, intr, cfg)
            rid = f"{spec.instance_id}_v{k:02d}"
            write_png(out / "images" / f"{rid}.png", rgb)
            write_png(out / "masks" / f"{rid}.png", alpha)
            lines.append(
                format_manifest_line(rid, f"images/{rid}.png", f"masks/{rid}.png", spec.primitive, spec.symmetric, pose, intr)
            )
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    (out / "scenes.json").write_text(json.dumps([s.to_dict() for s in specs], indent=1), encoding="utf-8")
    return manifest


def load_scene_specs(path) -> dict[str, SyntheticSceneSpec]:
    specs = [SyntheticSceneSpec.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
    return {s.instance_id: s for s in specs}


# -- manifest --


def format_manifest_line(rid, image_path, mask_path, category, symmetric, pose: CameraPose | None, intr: Intrinsics):
    fields = [str(rid), str(image_path), str(mask_path), str(category), "1" if symmetric else "0"]
    if pose is not None:
        fields += [repr(float(v)) for v in pose.to_vector()]
    fields += [repr(float(v)) for v in intr.to_vector()]
    for f in fields[:4]:
        if "\t" in f or "\n" in f:
            raise ValueError(f"manifest field {f!r} contains a tab or newline")
    return "\t".join(fields)


def parse_manifest_line(line: str, lineno: int, base: Path):
    fields = line.rstrip("\n").split("\t")
    if len(fields) not in (11, 18):
        raise ManifestError(
            f"line {lineno}: expected 11 fields (no pose) or 18 fields (7 pose numbers), got {len(fields)}"
        )
    rid, img, msk, category, sym = fields[:5]
    if sym not in ("0", "1"):
        raise ManifestError(f"line {lineno}: symmetric flag must be 0 or 1, got {sym!r}")
    try:
        numbers = [float(v) for v in fields[5:]]
        pose = CameraPose.from_vector(numbers[:7]) if len(numbers) == 13 else None
        intr = Intrinsics.from_vector(numbers[-6:])
    except ValueError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc
    return rid, base / img, base / msk, category, sym == "1", pose, intr


def load_manifest(path, audit: PoseAudit | None = None) -> Iterator[DatasetRecord]:
    """Lazily yield validated records; images are read as each record is produced."""
    path = Path(path)
    base = path.parent
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.startswith("#"):
                continue
            rid, img_path, mask_path, category, symmetric, pose, intr = parse_manifest_line(line, lineno, base)
            for p in (img_path, mask_path):
                if not p.is_file():
                    raise FileNotFoundError(f"line {lineno}: missing file {p}")
            image = read_png(img_path)
            if image.ndim == 3 and image.shape[2] == 4:
                image = image[..., :3]
            mask = read_png(mask_path)
            if mask.ndim == 3:
                mask = mask[..., 0]
            try:
                yield DatasetRecord(rid, image, mask, intr, pose, category, symmetric, audit)
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc


def stack_records(records: Sequence[DatasetRecord], dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Batch tensors: ``image (N, 3, H, W)``, ``mask (N, 1, H, W)``, ``intrinsics (N, 4)``."""
    images = torch.tensor(np.stack([r.image for r in records]), dtype=dtype).permute(0, 3, 1, 2).contiguous()
    masks = torch.tensor(np.stack([r.mask for r in records]), dtype=dtype)[:, None]
    intr = torch.tensor(np.stack([r.intrinsics.to_vector()[:4] for r in records]), dtype=dtype)
    return {"image": images, "mask": masks, "intrinsics": intr}

