"""Command-line entry points: ``gen-data``, ``train``, ``render``, ``eval``.

Configs are text files of flat dotted keys, one ``key = value`` per line (``#`` starts a comment).
Values are JSON literals (no trailing comments); anything that does not parse as JSON is taken as a bare string.
``--set key=value`` overrides a file entry.  Every run writes ``effective_config.cfg`` (same format)
next to its outputs.

Exit status: 0 on success, 2 on config validation failure, 1 on runtime failure.  Errors are a single
JSON line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

from .data import (
    DatasetRecord,
    crop_to_mask,
    generate_synthetic_dataset,
    load_manifest,
    load_scene_specs,
    random_scene_specs,
)
from .geometry import CameraPose, Intrinsics, PosePrior
from .training import ConfigError, TrainConfig, desk_config

COMMANDS = ("gen-data", "train", "render", "eval")
PRESETS = ("desk", "full")

# command-level keys (anything under ``train.`` is a TrainConfig field)
BASE_KEYS = {
    "gen-data": {
        "data.out_dir": "data",
        "data.instances": 5,
        "data.views_per_instance": 4,
        "data.seed": 0,
        "data.image_size": 64,
        "data.kinds": ["sphere", "box", "union-of-2"],
        "data.azimuth_range": [0.0, 2 * math.pi],
        "data.elevation_range": [math.radians(-10.0), math.radians(40.0)],
        "data.translation_mean": [0.0, 0.0, 1.8],
        "data.translation_spread": [0.0, 0.0, 0.1],
    },
    "train": {
        "data.manifest": None,
        "out_dir": "run",
        "preset": "desk",
    },
    "render": {
        "checkpoint": None,
        "data.manifest": None,
        "record": "",
        "out_dir": "render",
        "steps": 8,
        "num_coarse": 64,
        "num_fine": 64,
    },
    "eval": {
        "checkpoint": "",
        "data.manifest": None,
        "out": "report.tsv",
        "calibration_fraction": 0.2,
        "align": True,
        "regime": "",
        "analytic_scenes": "",
        "num_coarse": 64,
        "num_fine": 64,
    },
}
REQUIRED_PATHS = {
    "train": ("data.manifest",),
    "render": ("checkpoint", "data.manifest"),
    "eval": ("data.manifest",),
}


class CliError(Exception):
    def __init__(self, message: str, status: int, key: str | None = None):
        super().__init__(message)
        self.status = status
        self.key = key


# -- flat config format --


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def format_value(value) -> str:
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected 'key = value'", 2)
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def dump_config(flat: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(flat.items()))


def flatten(obj, prefix: str = "") -> dict:
    """Dataclass tree -> ``{dotted.key: leaf}``."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = list(value) if isinstance(value, tuple) else value
    return out


def _coerce(key: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise CliError(f"{key} must be true or false, got {value!r}", 2, key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise CliError(f"{key} must be an integer, got {value!r}", 2, key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CliError(f"{key} must be a number, got {value!r}", 2, key)
        return float(value)
    if isinstance(default, (tuple, list)):
        if not isinstance(value, list):
            raise CliError(f"{key} must be a list, got {value!r}", 2, key)
        return tuple(value) if isinstance(default, tuple) else value
    if isinstance(default, str) and not isinstance(value, str):
        raise CliError(f"{key} must be a string, got {value!r}", 2, key)
    return value


def rebuild(obj, flat: dict, prefix: str = ""):
    """Apply ``flat`` (already known-key-checked) onto a dataclass tree."""
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            if any(k.startswith(key + ".") for k in flat):
                changes[f.name] = rebuild(value, flat, key + ".")
        elif key in flat:
            changes[f.name] = _coerce(key, value, flat[key])
    return dataclasses.replace(obj, **changes) if changes else obj


def train_defaults(preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise CliError(f"preset must be one of {PRESETS}, got {preset!r}", 2, "preset")
    return desk_config() if preset == "desk" else TrainConfig()


def resolve(command: str, flat: dict) -> tuple[dict, TrainConfig | None]:
    """Validate keys and types; returns the full effective flat tree and the training config (train only)."""
    base = dict(BASE_KEYS[command])
    tcfg = None
    known = set(base)
    if command == "train":
        preset = flat.get("preset", base["preset"])
        tcfg = train_defaults(preset)
        train_flat = {f"train.{k}": v for k, v in flatten(tcfg).items()}
        known |= set(train_flat)
        base.update(train_flat)
    for key in sorted(flat):
        if key not in known:
            raise CliError(f"unknown config key {key!r}", 2, key)
    merged = dict(base)
    for key, value in flat.items():
        merged[key] = _coerce(key, base[key], value)
    if tcfg is not None:
        sub = {k[len("train."):]: v for k, v in flat.items() if k.startswith("train.")}
        try:
            tcfg = rebuild(tcfg, sub)
        except (ValueError, TypeError) as e:
            raise CliError(f"invalid training config: {e}", 2) from None
        merged.update({f"train.{k}": v for k, v in flatten(tcfg).items()})
    for key in REQUIRED_PATHS.get(command, ()):
        path = merged.get(key)
        if not path:
            raise CliError(f"missing required key {key!r}", 2, key)
        if not Path(path).exists():
            raise CliError(f"{key}: path does not exist: {path}", 2, key)
    if command == "eval":
        if not merged["checkpoint"] and not merged["analytic_scenes"]:
            raise CliError("eval needs 'checkpoint' or 'analytic_scenes'", 2, "checkpoint")
        for key in ("checkpoint", "analytic_scenes"):
            if merged[key] and not Path(merged[key]).exists():
                raise CliError(f"{key}: path does not exist: {merged[key]}", 2, key)
    if command == "gen-data":
        try:
            _prior_from(merged)
        except ValueError as e:
            raise CliError(f"invalid pose prior: {e}", 2) from None
    return merged, tcfg


# -- commands --


def _prior_from(c: dict) -> PosePrior:
    return PosePrior(
        tuple(c["data.azimuth_range"]),
        tuple(c["data.elevation_range"]),
        tuple(c["data.translation_mean"]),
        tuple(c["data.translation_spread"]),
    )


def _write_effective(out_dir: Path, command: str, c: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.cfg").write_text(f"# monofield {command}\n" + dump_config(c), encoding="utf-8")


def _fit_records(records, size: int) -> list[DatasetRecord]:
    out = []
    for r in records:
        if r.image.shape[:2] == (size, size):
            out.append(r)
            continue
        image, mask, intr = crop_to_mask(r.image, r.mask, r.intrinsics, size)
        pose = r.pose if r.has_pose else None
        out.append(DatasetRecord(r.id, image, mask, intr, pose, r.category, r.symmetric, r.audit))
    return out


def cmd_gen_data(c: dict) -> dict:
    out = Path(c["data.out_dir"])
    specs = random_scene_specs(c["data.instances"], c["data.seed"], tuple(c["data.kinds"]))
    manifest = generate_synthetic_dataset(
        specs,
        c["data.views_per_instance"],
        _prior_from(c),
        seed=c["data.seed"],
        out_dir=out,
        intrinsics=Intrinsics.default(c["data.image_size"]),
    )
    _write_effective(out, "gen-data", c)
    return {"manifest": str(manifest), "records": c["data.instances"] * c["data.views_per_instance"]}


def cmd_train(c: dict, tcfg: TrainConfig) -> dict:
    from .training import run_training

    out = Path(c["out_dir"])
    records = _fit_records(load_manifest(c["data.manifest"]), tcfg.encoder.image_size)
    _write_effective(out, "train", c)
    result = run_training(records, tcfg, out)
    return {"checkpoint": str(out / "checkpoint_final.safetensors"), "steps": result.state.step}


def _pick_record(manifest, record_id: str) -> DatasetRecord:
    for r in load_manifest(manifest):
        if not record_id or r.id == record_id:
            return r
    raise RuntimeError(f"record {record_id!r} not found in {manifest}")


def render_outputs(steps: int) -> list[str]:
    """Filenames written by ``render``."""
    names = ["input.png", "input_reconstruction.png", "input_alpha.png", "input_depth.pfm"]
    for k in range(steps):
        names += [f"novel_{k:02d}.png", f"depth_{k:02d}.pfm"]
    return names + ["views.tsv"]


def cmd_render(c: dict) -> dict:
    from .evaluation import ModelPredictor
    from .rendering import SamplingConfig, write_pfm, write_png
    from .training import load_model

    encoder, field, tcfg, progress = load_model(c["checkpoint"])
    record = _pick_record(c["data.manifest"], c["record"])
    sampling = SamplingConfig(tcfg.sampling.near, tcfg.sampling.far, c["num_coarse"], c["num_fine"], jitter=False)
    predictor = ModelPredictor(encoder, field, sampling, progress)
    size = encoder.cfg.image_size
    image, mask, intr = record.image, record.mask, record.intrinsics
    if image.shape[:2] != (size, size):
        image, mask, intr = crop_to_mask(image, mask, intr, size)
    codes, pose = predictor.encode(DatasetRecord(record.id, image, mask, intr))
    out = Path(c["out_dir"])
    _write_effective(out, "render", c)

    from .rendering import render_image

    def fn(pts, dirs):
        return field(pts, dirs, codes.shape[None], codes.appearance[None], progress)

    write_png(out / "input.png", image)
    rgb, alpha, depth = render_image(fn, pose, intr, sampling)
    write_png(out / "input_reconstruction.png", rgb)
    write_png(out / "input_alpha.png", alpha)
    write_pfm(out / "input_depth.pfm", depth)
    rows = ["file\tdepth_file\tazimuth\televation"]
    for k in range(c["steps"]):
        az = (pose.azimuth + 2 * math.pi * k / c["steps"]) % (2 * math.pi)
        view = CameraPose.from_angles(az, pose.elevation, pose.translation)
        rgb, _, depth = render_image(fn, view, intr, sampling)
        write_png(out / f"novel_{k:02d}.png", rgb)
        write_pfm(out / f"depth_{k:02d}.pfm", depth)
        rows.append(f"novel_{k:02d}.png\tdepth_{k:02d}.pfm\t{az:.6f}\t{pose.elevation:.6f}")
    (out / "views.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return {"out_dir": str(out), "files": len(render_outputs(c["steps"]))}


def cmd_eval(c: dict) -> dict:
    from .evaluation import AnalyticPredictor, ModelPredictor, evaluate_novel_views, make_pairs
    from .rendering import SamplingConfig

    records = list(load_manifest(c["data.manifest"]))
    if c["analytic_scenes"]:
        sampling = SamplingConfig(num_coarse=c["num_coarse"], num_fine=c["num_fine"], jitter=False)
        predictor = AnalyticPredictor(load_scene_specs(c["analytic_scenes"]), sampling)
    else:
        from .training import load_model

        encoder, field, tcfg, progress = load_model(c["checkpoint"])
        sampling = SamplingConfig(tcfg.sampling.near, tcfg.sampling.far, c["num_coarse"], c["num_fine"], jitter=False)
        predictor = ModelPredictor(encoder, field, sampling, progress)
    report = evaluate_novel_views(
        predictor, make_pairs(records), c["calibration_fraction"], c["align"], c["regime"]
    )
    out = Path(c["out"])
    _write_effective(out.parent, "eval", c)
    out.write_text(report.to_tsv(), encoding="utf-8")
    return {"report": str(out), "mean_psnr": report.mean_psnr, "mean_ssim": report.mean_ssim}


# -- entry point --


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monofield",
        description="Single-image radiance fields: synthetic data, training, rendering and evaluation.",
        epilog="Config files hold flat dotted keys ('train.epochs = 50'); --set overrides them. "
        "Exit codes: 0 ok, 2 invalid config, 1 runtime failure.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "render a synthetic dataset (images/, masks/, manifest.tsv, scenes.json)",
        "train": "train encoder, field and discriminators; writes checkpoints and train_log.jsonl",
        "render": "input reconstruction plus an azimuth sweep of novel views (novel_XX.png, depth_XX.pfm)",
        "eval": "offset-aligned held-out view PSNR/SSIM report",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("config", nargs="?", help="flat dotted-key config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config, then exit")
    return parser


def load_flat(config_path: str | None, overrides: list[str]) -> dict:
    flat = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config file not found: {config_path}", 2)
        flat.update(parse_config_text(path.read_text(encoding="utf-8"), config_path))
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}", 2)
        key, value = item.split("=", 1)
        flat[key.strip()] = parse_value(value)
    return flat


def _emit_error(err: CliError | Exception, status: int):
    payload = {"status": "error", "exit": status, "error": str(err), "type": type(err).__name__}
    if isinstance(err, CliError) and err.key:
        payload["key"] = err.key
    print(json.dumps(payload), file=sys.stderr)


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        flat = load_flat(args.config, args.set)
        c, tcfg = resolve(args.command, flat)
    except CliError as e:
        _emit_error(e, e.status)
        return e.status
    if args.dry_run:
        sys.stdout.write(dump_config(c))
        return 0
    try:
        if args.command == "gen-data":
            summary = cmd_gen_data(c)
        elif args.command == "train":
            summary = cmd_train(c, tcfg)
        elif args.command == "render":
            summary = cmd_render(c)
        else:
            summary = cmd_eval(c)
    except ConfigError as e:
        _emit_error(e, 2)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1
        _emit_error(e, 1)
        return 1
    print(json.dumps({"status": "ok", **summary}))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
