import numpy as np
import pytest

from monofield.data import (
    DatasetRecord,
    EmptyMaskError,
    ManifestError,
    PoseAudit,
    Primitive,
    SyntheticSceneSpec,
    crop_to_mask,
    format_manifest_line,
    generate_synthetic_dataset,
    instance_of,
    load_manifest,
    load_scene_specs,
    mask_bbox,
    random_scene_specs,
    render_spec,
    stack_records,
)
from monofield.geometry import CameraPose, Intrinsics, PosePrior, fit_offset_rotation, project_points
from monofield.rendering import SamplingConfig


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    specs = random_scene_specs(5, seed=11)
    manifest = generate_synthetic_dataset(specs, 4, PosePrior(), seed=3, out_dir=out, intrinsics=Intrinsics.default(48))
    return manifest, specs


def _sphere(radius=0.3, center=(0.0, 0.0, 0.0)):
    return SyntheticSceneSpec("inst0000", (Primitive("sphere", center, (radius,), (0.6, 0.4, 0.2)),))


# -- cropping --


def test_full_mask_crop_is_plain_resize():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(32, 32, 3))
    mask = np.ones((32, 32))
    intr = Intrinsics(50.0, 50.0, 15.5, 15.5, 32, 32)
    out, out_mask, new = crop_to_mask(img, mask, intr, 64)
    assert out.shape == (64, 64, 3) and np.allclose(out_mask[1:-1, 1:-1], 1.0)
    # pixel-center convention: x_new = (x_old + 0.5) * 64/32 - 0.5
    assert new.principal_x == pytest.approx((15.5 + 0.5) * 2 - 0.5)
    assert new.focal_x == pytest.approx(100.0)
    # on a linear ramp bilinear resampling is exact: output column j samples x = -0.25 + 0.5 j
    ramp = np.dstack([np.tile(np.arange(32) / 31.0, (32, 1))] * 3)
    out, _, _ = crop_to_mask(ramp, mask, intr, 64)
    x = -0.25 + 0.5 * np.arange(64)
    interior = (x >= 0) & (x <= 31)
    assert np.allclose(out[5, interior, 0], x[interior] / 31.0)


def test_single_pixel_mask_crop():
    img = np.zeros((20, 20, 3))
    img[7, 9] = (1.0, 0.5, 0.25)
    mask = np.zeros((20, 20))
    mask[7, 9] = 1.0
    assert mask_bbox(mask) == (7, 7, 9, 9)
    out, out_mask, new = crop_to_mask(img, mask, Intrinsics(30, 30, 9.5, 9.5, 20, 20), 16)
    assert out.shape == (16, 16, 3) and np.isfinite(out).all()
    assert out_mask.max() >= 0.5
    # the principal point may leave the crop; it still maps through the pixel transform
    assert new.principal_y == pytest.approx((9.5 - (7 - 0.5 + 0.5 / 16)) * 16)
    # the single pixel is stretched over the whole crop
    assert new.focal_x == pytest.approx(30 * 16)


def test_crop_intrinsics_follow_the_pixel_map():
    mask = np.zeros((64, 80))
    mask[10:51, 20:61] = 1.0
    img = np.dstack([mask] * 3) * 0.5
    intr = Intrinsics(90.0, 90.0, 39.5, 31.5, 80, 64)
    _, _, new = crop_to_mask(img, mask, intr, 112)
    side = 41
    s = side / 112
    a_u = 40.0 - side / 2 + 0.5 * s
    a_v = 30.0 - side / 2 + 0.5 * s
    pose = CameraPose.from_angles(0.4, 0.2)
    pts = np.random.default_rng(1).uniform(-0.3, 0.3, (50, 3))
    before = project_points(pts, pose, intr)
    after = project_points(pts, pose, new)
    mapped = np.stack([(before[:, 0] - a_u) / s, (before[:, 1] - a_v) / s], axis=1)
    assert np.abs(after - mapped).max() < 0.5
    assert np.abs(after - mapped).max() < 1e-9


def test_crop_keeps_object_centered():
    spec = _sphere(0.25)
    intr = Intrinsics.default(96)
    pose = CameraPose.from_angles(0.3, -0.2, (0.1, -0.05, 1.8))
    rgb, alpha, _ = render_spec(spec, pose, intr)
    out, out_mask, new = crop_to_mask(rgb, alpha, intr, 64)
    center = project_points(np.zeros((1, 3)), pose, new)[0]
    r0, r1, c0, c1 = mask_bbox(out_mask)
    assert abs(center[0] - (c0 + c1) / 2) < 0.75
    assert abs(center[1] - (r0 + r1) / 2) < 0.75


def test_crop_is_idempotent():
    intr = Intrinsics.default(96)
    for spec in random_scene_specs(4, seed=3):
        rgb, alpha, _ = render_spec(spec, CameraPose.from_angles(0.7, 0.3), intr)
        i1, m1, n1 = crop_to_mask(rgb, alpha, intr, 64)
        i2, m2, n2 = crop_to_mask(i1, m1, n1, 64)
        assert np.abs(i2 - i1).mean() < 1e-6
        assert np.abs(m2 - m1).mean() < 1e-6


def test_empty_mask_raises():
    with pytest.raises(EmptyMaskError):
        crop_to_mask(np.zeros((8, 8, 3)), np.full((8, 8), 0.49), Intrinsics(8, 8, 3.5, 3.5, 8, 8))


# -- records --


def test_record_validation():
    intr = Intrinsics(10, 10, 3.5, 3.5, 8, 8)
    with pytest.raises(ValueError, match="resolutions differ"):
        DatasetRecord("a", np.zeros((8, 8, 3)), np.zeros((7, 8)), intr)
    with pytest.raises(ValueError, match="intrinsics size"):
        DatasetRecord("a", np.zeros((8, 9, 3)), np.zeros((8, 9)), intr)


def test_instance_ids():
    assert instance_of("inst0003_v01") == "inst0003"
    assert instance_of("chair_7") == "chair_7"
    assert instance_of("a_vx") == "a_vx"


def test_pose_audit_counts_reads():
    audit = PoseAudit()
    intr = Intrinsics(10, 10, 3.5, 3.5, 8, 8)
    rec = DatasetRecord("a", np.zeros((8, 8, 3)), np.ones((8, 8)), intr, CameraPose.from_angles(0, 0), audit=audit)
    assert rec.has_pose and audit.count == 0
    _ = rec.pose
    _ = rec.pose
    assert audit.count == 2


def test_stack_records_shapes():
    intr = Intrinsics(10, 10, 3.5, 3.5, 8, 8)
    recs = [DatasetRecord(str(i), np.full((8, 8, 3), i / 4), np.ones((8, 8)), intr) for i in range(3)]
    t = stack_records(recs)
    assert t["image"].shape == (3, 3, 8, 8) and t["mask"].shape == (3, 1, 8, 8) and t["intrinsics"].shape == (3, 4)


# -- synthetic generator --


def test_spec_outside_box_rejected():
    with pytest.raises(ValueError, match="outside"):
        _sphere(0.3, (0.2, 0.0, 0.0))
    with pytest.raises(ValueError):
        SyntheticSceneSpec("x", ())


def test_random_specs_fit_and_are_symmetric():
    for spec in random_scene_specs(30, seed=5):
        assert spec.symmetric
        assert spec.primitive in ("sphere", "box", "union-of-2")


def test_generator_counts(small_dataset):
    manifest, specs = small_dataset
    records = list(load_manifest(manifest))
    assert len(records) == 20
    assert all(r.has_pose for r in records)
    assert len({r.instance for r in records}) == 5
    assert all(r.mask.sum() > 0 for r in records)
    assert set(load_scene_specs(manifest.parent / "scenes.json")) == {s.instance_id for s in specs}


def test_rerender_matches_stored_image(small_dataset):
    manifest, _ = small_dataset
    specs = load_scene_specs(manifest.parent / "scenes.json")
    for rec in list(load_manifest(manifest))[:6]:
        rgb, alpha, _ = render_spec(specs[rec.instance], rec.pose, rec.intrinsics)
        assert np.abs(rgb - rec.image).mean() < 1e-3
        assert np.abs(alpha - rec.mask).mean() < 1e-3


def test_ground_truth_frame_needs_no_offset(small_dataset):
    manifest, _ = small_dataset
    poses = [r.pose for r in load_manifest(manifest)]
    offset, residual = fit_offset_rotation(poses, poses)
    assert np.allclose(offset, np.eye(3), atol=1e-9) and residual < 1e-12


def test_sphere_silhouette_matches_projection():
    intr = Intrinsics.default(64)
    pose = CameraPose.from_angles(0.5, 0.25)
    r = 0.3
    _, alpha, _ = render_spec(_sphere(r), pose, intr)
    # analytic silhouette: pixel rays whose distance to the center is below r
    ys, xs = np.mgrid[0:64, 0:64]
    d = np.stack([(xs - intr.principal_x) / intr.focal_x, (ys - intr.principal_y) / intr.focal_y, np.ones_like(xs, float)], -1)
    d = d @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    c = pose.camera_center
    proj = -(d @ c)
    dist = np.linalg.norm(c + proj[..., None] * d, axis=-1)
    truth = dist < r
    pred = alpha >= 0.5
    iou = (truth & pred).sum() / (truth | pred).sum()
    assert iou >= 0.98


def test_generator_rejects_coarse_sampling(tmp_path):
    with pytest.raises(ValueError, match="256"):
        generate_synthetic_dataset([_sphere()], 1, PosePrior(), SamplingConfig(num_coarse=64, num_fine=64), out_dir=tmp_path)


# -- manifest --


def test_empty_manifest(tmp_path):
    p = tmp_path / "manifest.tsv"
    p.write_text("# nothing here\n\n")
    assert list(load_manifest(p)) == []


def test_manifest_round_trip_is_bit_exact(small_dataset, tmp_path):
    manifest, _ = small_dataset
    records = list(load_manifest(manifest))
    lines = [
        format_manifest_line(r.id, manifest.parent / "images" / f"{r.id}.png", manifest.parent / "masks" / f"{r.id}.png",
                             r.category, r.symmetric, r.pose, r.intrinsics)
        for r in records
    ]
    again_path = tmp_path / "again.tsv"
    again_path.write_text("".join(line + "\n" for line in lines))
    again = list(load_manifest(again_path))
    for a, b in zip(records, again):
        assert a.id == b.id and a.category == b.category and a.symmetric == b.symmetric
        assert np.array_equal(a.pose.to_vector(), b.pose.to_vector())
        assert np.array_equal(a.intrinsics.to_vector(), b.intrinsics.to_vector())
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


def test_manifest_without_pose(small_dataset, tmp_path):
    manifest, _ = small_dataset
    rec = next(load_manifest(manifest))
    line = format_manifest_line(rec.id, manifest.parent / "images" / f"{rec.id}.png",
                                manifest.parent / "masks" / f"{rec.id}.png", "object", False, None, rec.intrinsics)
    p = tmp_path / "m.tsv"
    p.write_text(line + "\n")
    (loaded,) = load_manifest(p)
    assert not loaded.has_pose and loaded.pose is None


def test_manifest_wrong_pose_count_names_line(small_dataset, tmp_path):
    manifest, _ = small_dataset
    lines = manifest.read_text().splitlines()
    fields = lines[1].split("\t")
    del fields[11]  # 6 pose numbers
    p = manifest.parent / "bad.tsv"
    p.write_text(lines[0] + "\n" + "\t".join(fields) + "\n")
    with pytest.raises(ManifestError, match="line 2"):
        list(load_manifest(p))


def test_manifest_missing_file_names_path(small_dataset, tmp_path):
    manifest, _ = small_dataset
    line = manifest.read_text().splitlines()[0].replace("images/", "nowhere/")
    p = tmp_path / "m.tsv"
    p.write_text(line + "\n")
    with pytest.raises(FileNotFoundError, match="nowhere"):
        list(load_manifest(p))


def test_manifest_is_lazy(small_dataset, tmp_path):
    manifest, _ = small_dataset
    lines = manifest.read_text().splitlines()
    p = manifest.parent / "lazy.tsv"
    p.write_text(lines[0] + "\nbroken\n")
    it = load_manifest(p)
    assert next(it).id == lines[0].split("\t")[0]
    with pytest.raises(ManifestError):
        next(it)
