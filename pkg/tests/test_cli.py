import json
import subprocess
import sys

import numpy as np
import pytest

from monofield.cli import dump_config, parse_config_text, render_outputs, run
from monofield.rendering import read_pfm, read_png

FAST_TRAIN = [
    "--set", "train.max_steps=2",
    "--set", "train.epochs=1",
    "--set", "train.recon_patch=8",
    "--set", "train.sampling.num_coarse=8",
    "--set", "train.sampling.num_fine=8",
    "--set", "train.discriminator.patch_size=8",
]


def _last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run(["gen-data", "--set", f"data.out_dir={json.dumps(str(out))}", "--set", "data.image_size=32"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("cli_run")
    cfg = run_dir / "train.cfg"
    cfg.write_text(f'# tiny run\ndata.manifest = "{dataset / "manifest.tsv"}"\nout_dir = "{run_dir}"\ntrain.seed = 3\n')
    assert run(["train", str(cfg), *FAST_TRAIN]) == 0
    return run_dir


def test_gen_data_counts(dataset):
    lines = (dataset / "manifest.tsv").read_text().splitlines()
    assert len(lines) == 20
    assert len(list((dataset / "images").glob("*.png"))) == 20
    assert len(list((dataset / "masks").glob("*.png"))) == 20
    assert (dataset / "effective_config.cfg").exists()


def test_train_writes_checkpoint_and_log(trained):
    assert (trained / "checkpoint_final.safetensors").exists()
    log = (trained / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 2
    rec = json.loads(log[0])
    for key in ("step", "epoch", "lr", "recon_color", "wall_time"):
        assert key in rec


def test_render_sweep_contract(dataset, trained, tmp_path, capsys):
    out = tmp_path / "render"
    status = run([
        "render",
        "--set", f'checkpoint="{trained / "checkpoint_final.safetensors"}"',
        "--set", f'data.manifest="{dataset / "manifest.tsv"}"',
        "--set", f'out_dir="{out}"',
        "--set", "num_coarse=8",
        "--set", "num_fine=8",
    ])
    assert status == 0
    assert _last_json(capsys.readouterr().out)["status"] == "ok"
    assert len(list(out.glob("novel_*.png"))) == 8
    assert len(list(out.glob("depth_*.pfm"))) == 8
    for name in render_outputs(8):
        assert (out / name).exists(), name
    assert read_png(out / "novel_03.png").shape[:2] == read_pfm(out / "depth_03.pfm").shape
    rows = (out / "views.tsv").read_text().splitlines()[1:]
    az = np.array([float(r.split("\t")[2]) for r in rows])
    steps = np.mod(np.diff(az), 2 * np.pi)
    assert np.allclose(steps, 2 * np.pi / 8)


def test_eval_analytic_report(dataset, tmp_path, capsys):
    report = tmp_path / "report.tsv"
    status = run([
        "eval",
        "--set", f'data.manifest="{dataset / "manifest.tsv"}"',
        "--set", f'analytic_scenes="{dataset / "scenes.json"}"',
        "--set", f'out="{report}"',
        "--set", "num_coarse=128",
        "--set", "num_fine=128",
        "--set", 'regime="oracle"',
    ])
    assert status == 0
    summary = _last_json(capsys.readouterr().out)
    assert summary["mean_psnr"] >= 40.0
    text = report.read_text()
    assert text.startswith("record_id\tpsnr\tssim\n") and "regime\toracle" in text
    assert len([line for line in text.splitlines() if line.startswith("inst")]) == 15


def test_eval_with_checkpoint(dataset, trained, tmp_path):
    report = tmp_path / "r.tsv"
    status = run([
        "eval",
        "--set", f'data.manifest="{dataset / "manifest.tsv"}"',
        "--set", f'checkpoint="{trained / "checkpoint_final.safetensors"}"',
        "--set", f'out="{report}"',
        "--set", "num_coarse=8",
        "--set", "num_fine=8",
    ])
    assert status == 0 and report.exists()


def test_malformed_key_exits_2(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(f'data.manifest = "{dataset / "manifest.tsv"}"\ntrain.epochz = 3\n')
    assert run(["train", str(cfg)]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["exit"] == 2 and err["key"] == "train.epochz" and "train.epochz" in err["error"]


@pytest.mark.parametrize(
    "override, key",
    [
        ("train.epochs=\"ten\"", "train.epochs"),
        ("train.regime=\"semi\"", None),
        ("data.manifest=\"/no/such/manifest.tsv\"", "data.manifest"),
        ("preset=\"huge\"", "preset"),
    ],
)
def test_invalid_values_exit_2(dataset, override, key, capsys):
    args = ["train", "--set", f'data.manifest="{dataset / "manifest.tsv"}"', "--set", override]
    assert run(args) == 2
    err = json.loads(capsys.readouterr().err.strip())
    if key:
        assert err.get("key") == key


def test_runtime_failure_exits_1(dataset, tmp_path, capsys):
    bogus = tmp_path / "not_a_checkpoint.safetensors"
    bogus.write_bytes(b"garbage")
    status = run([
        "render",
        "--set", f'checkpoint="{bogus}"',
        "--set", f'data.manifest="{dataset / "manifest.tsv"}"',
        "--set", f'out_dir="{tmp_path / "r"}"',
    ])
    assert status == 1
    assert json.loads(capsys.readouterr().err.strip())["exit"] == 1


def test_dry_run_has_no_side_effects(tmp_path, capsys):
    out = tmp_path / "never"
    assert run(["gen-data", "--dry-run", "--set", f'data.out_dir="{out}"']) == 0
    assert not out.exists()
    printed = parse_config_text(capsys.readouterr().out)
    assert printed["data.out_dir"] == str(out) and printed["data.instances"] == 5


def test_effective_config_reproduces_run(dataset, trained, tmp_path):
    eff = trained / "effective_config.cfg"
    flat = parse_config_text(eff.read_text())
    assert flat["train.max_steps"] == 2 and flat["train.seed"] == 3
    assert parse_config_text(dump_config(flat)) == flat
    rerun = tmp_path / "rerun"
    status = run(["train", str(eff), "--set", f'out_dir="{rerun}"'])
    assert status == 0
    a = [json.loads(x) for x in (trained / "train_log.jsonl").read_text().splitlines()]
    b = [json.loads(x) for x in (rerun / "train_log.jsonl").read_text().splitlines()]
    for x, y in zip(a, b):
        x.pop("wall_time"), y.pop("wall_time")
    assert a == b


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "monofield.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("gen-data", "train", "render", "eval"):
        assert name in proc.stdout
